//! Synthetic two-class dataset for exercising the trainer at desk scale.
//!
//! Every image is 32×32×3 uniform noise in `[0, 0.2)` with one bright shape
//! added on top: class 0 carries a full-width horizontal stripe through the
//! middle rows, class 1 a 6×6 blob at a random position. Each sample also
//! carries a stride-4 segmentation mask (8×8 cells, 1 where the bright
//! shape covers the majority of the cell), so the same generator feeds both
//! the classification and the segmentation task.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Elem, Tensor};

pub const TOY_IMAGE_SIDE: usize = 32;
pub const TOY_IMAGE_CHANNELS: usize = 3;
pub const TOY_MASK_STRIDE: usize = 4;
pub const TOY_MASK_SIDE: usize = TOY_IMAGE_SIDE / TOY_MASK_STRIDE;
pub const TOY_CLASSES: usize = 2;

/// Brightness added to pixels the shape covers; noise peaks at 0.2, so
/// shape pixels land in `[0.8, 1.0)` and a 0.5 threshold recovers them.
const SHAPE_BRIGHTNESS: f64 = 0.8;
const NOISE_CEILING: f64 = 0.2;
const STRIPE_ROWS: usize = 4;
const BLOB_SIDE: usize = 6;

/// Which target the trainer reads; images and both target kinds are
/// generated identically either way.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyMode {
    Classification,
    Segmentation,
}

#[derive(Clone, Debug)]
pub struct ToySample<T: Elem> {
    /// `[32, 32, 3]`, values in `[0, 1)`.
    pub image: Tensor<T>,
    /// 0 = stripe, 1 = blob.
    pub label: usize,
    /// Row-major 8×8 cell labels at stride 4: 1 where the shape covers at
    /// least half the cell's pixels.
    pub mask: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ToyDataset<T: Elem> {
    pub seed: u64,
    pub mode: ToyMode,
    pub samples: Vec<ToySample<T>>,
}

/// Generates `n` samples with labels alternating 0, 1, 0, … so the classes
/// balance within one. `n` must be at least 2 so both classes appear.
pub fn make_toy_dataset<T: Elem>(seed: u64, n: usize, mode: ToyMode) -> ToyDataset<T> {
    assert!(n >= 2, "a two-class dataset needs at least 2 samples");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n).map(|i| make_sample(&mut rng, i % 2)).collect();
    ToyDataset { seed, mode, samples }
}

fn make_sample<T: Elem>(rng: &mut ChaCha8Rng, label: usize) -> ToySample<T> {
    let side = TOY_IMAGE_SIDE;
    let mut pixels = vec![0.0f64; side * side * TOY_IMAGE_CHANNELS];
    for v in pixels.iter_mut() {
        *v = rng.random::<f64>() * NOISE_CEILING;
    }

    // Both shapes are drawn from the RNG for every sample so the stream
    // advances identically regardless of the label.
    let stripe_top: usize = rng.random_range(12..=16);
    let blob_top: usize = rng.random_range(2..=side - BLOB_SIDE - 2);
    let blob_left: usize = rng.random_range(2..=side - BLOB_SIDE - 2);

    let covered = |row: usize, col: usize| -> bool {
        match label {
            0 => (stripe_top..stripe_top + STRIPE_ROWS).contains(&row),
            _ => {
                (blob_top..blob_top + BLOB_SIDE).contains(&row)
                    && (blob_left..blob_left + BLOB_SIDE).contains(&col)
            }
        }
    };

    for row in 0..side {
        for col in 0..side {
            if covered(row, col) {
                for ch in 0..TOY_IMAGE_CHANNELS {
                    pixels[(row * side + col) * TOY_IMAGE_CHANNELS + ch] += SHAPE_BRIGHTNESS;
                }
            }
        }
    }

    let mut mask = vec![0usize; TOY_MASK_SIDE * TOY_MASK_SIDE];
    for cell_row in 0..TOY_MASK_SIDE {
        for cell_col in 0..TOY_MASK_SIDE {
            let mut hits = 0;
            for dr in 0..TOY_MASK_STRIDE {
                for dc in 0..TOY_MASK_STRIDE {
                    if covered(cell_row * TOY_MASK_STRIDE + dr, cell_col * TOY_MASK_STRIDE + dc) {
                        hits += 1;
                    }
                }
            }
            if 2 * hits >= TOY_MASK_STRIDE * TOY_MASK_STRIDE {
                mask[cell_row * TOY_MASK_SIDE + cell_col] = 1;
            }
        }
    }

    let data: Vec<T> = pixels.into_iter().map(T::from_f64).collect();
    let image = Tensor::new(vec![side, side, TOY_IMAGE_CHANNELS], data)
        .expect("toy image dimensions are consistent by construction");
    ToySample { image, label, mask }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_determined_by_the_seed_alone() {
        let a = make_toy_dataset::<f32>(11, 6, ToyMode::Classification);
        let b = make_toy_dataset::<f32>(11, 6, ToyMode::Segmentation);
        assert_eq!(a.samples.len(), b.samples.len());
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.label, y.label);
            assert_eq!(x.mask, y.mask);
        }
        let c = make_toy_dataset::<f32>(12, 6, ToyMode::Classification);
        assert!(a.samples.iter().zip(&c.samples).any(|(x, y)| x.image != y.image));
    }

    #[test]
    fn labels_alternate_and_balance_within_one() {
        let data = make_toy_dataset::<f32>(0, 7, ToyMode::Classification);
        let ones: usize = data.samples.iter().map(|s| s.label).sum();
        assert_eq!(ones, 3);
        assert_eq!(data.samples[0].label, 0);
        assert_eq!(data.samples[1].label, 1);
    }

    /// The whole point of the task is that it is trivially separable: a
    /// stripe floods the middle rows with brightness, a blob cannot.
    #[test]
    fn mean_brightness_of_the_middle_rows_separates_the_classes() {
        let data = make_toy_dataset::<f64>(3, 64, ToyMode::Classification);
        let mut correct = 0;
        for sample in &data.samples {
            let mut sum = 0.0;
            let mut count = 0;
            for row in 12..20 {
                for col in 0..TOY_IMAGE_SIDE {
                    for ch in 0..TOY_IMAGE_CHANNELS {
                        sum += sample.image.data()
                            [(row * TOY_IMAGE_SIDE + col) * TOY_IMAGE_CHANNELS + ch];
                        count += 1;
                    }
                }
            }
            let predicted = if sum / count as f64 > 0.35 { 0 } else { 1 };
            if predicted == sample.label {
                correct += 1;
            }
        }
        assert_eq!(correct, 64, "the hand detector must separate the classes");
    }

    /// Recovers each mask from the pixels alone: a cell is foreground when
    /// most of its 4×4 patch is brighter than any noise pixel can be.
    #[test]
    fn masks_mark_majority_bright_cells_at_stride_four() {
        let data = make_toy_dataset::<f32>(5, 16, ToyMode::Segmentation);
        for (i, sample) in data.samples.iter().enumerate() {
            assert_eq!(sample.image.shape(), &[32, 32, 3]);
            let foreground: usize = sample.mask.iter().sum();
            assert!(foreground > 0, "sample {i} has an all-background mask");
            assert!(foreground < sample.mask.len(), "sample {i} is all foreground");
            for cell_row in 0..TOY_MASK_SIDE {
                for cell_col in 0..TOY_MASK_SIDE {
                    let mut bright = 0;
                    for dr in 0..TOY_MASK_STRIDE {
                        for dc in 0..TOY_MASK_STRIDE {
                            let row = cell_row * TOY_MASK_STRIDE + dr;
                            let col = cell_col * TOY_MASK_STRIDE + dc;
                            let v = sample.image.data()
                                [(row * TOY_IMAGE_SIDE + col) * TOY_IMAGE_CHANNELS];
                            if v > 0.5 {
                                bright += 1;
                            }
                        }
                    }
                    let expected = usize::from(2 * bright >= 16);
                    assert_eq!(
                        sample.mask[cell_row * TOY_MASK_SIDE + cell_col],
                        expected,
                        "sample {i}, cell ({cell_row}, {cell_col})"
                    );
                }
            }
        }
    }

    #[test]
    fn pixels_stay_in_the_unit_interval() {
        let data = make_toy_dataset::<f64>(9, 4, ToyMode::Classification);
        for sample in &data.samples {
            for &v in sample.image.data() {
                assert!((0.0..1.0).contains(&v), "pixel {v} out of range");
            }
        }
    }
}
