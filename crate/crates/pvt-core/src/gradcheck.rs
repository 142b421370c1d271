//! Central finite-difference verification of tape gradients.
//!
//! Checks run in `f64`: a step of `1e-5` against a tolerance of `1e-6`
//! works for individual operations, while composite models accumulate
//! enough truncation error that `1e-4`/`1e-4` is the realistic regime.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{sra_forward, AttentionConfig, AttentionWeights, ModelError};
use crate::backbone::{backbone_forward_on_tape, classify_forward_on_tape, ModelConfig};
use crate::checkpoint::ModelWeights;
use crate::data::{make_toy_dataset, ToyMode, TOY_CLASSES};
use crate::heads::{seg_head_forward_on_tape, SegHeadConfig};
use crate::tape::{Tape, TapeError, Var};
use crate::tensor::{Tensor, TensorSet};
use crate::train::TrainError;

/// Error between an analytic and a numeric derivative, relative to the
/// larger of the two magnitudes but never amplified below scale 1:
/// `|a − n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1.0_f64.max(analytic.abs()).max(numeric.abs())
}

/// Largest observed deviation, kept for diagnostics.
#[derive(Clone, Debug)]
pub struct WorstDeviation {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub worst: Option<WorstDeviation>,
}

impl GradCheckReport {
    fn observe(&mut self, tensor: &str, index: usize, analytic: f64, numeric: f64) {
        let rel_err = relative_error(analytic, numeric);
        self.checked += 1;
        self.mean_rel_err += rel_err;
        if rel_err >= self.max_rel_err {
            self.max_rel_err = rel_err;
            self.worst = Some(WorstDeviation {
                tensor: tensor.to_string(),
                index,
                analytic,
                numeric,
                rel_err,
            });
        }
    }

    fn finish(mut self) -> Self {
        if self.checked > 0 {
            self.mean_rel_err /= self.checked as f64;
        }
        self
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tolerance
    }
}

/// Checks the gradient of a scalar-valued function of one tensor. `f`
/// builds the loss on the given tape from the registered input variable;
/// every input element is perturbed by `±step`.
pub fn grad_check_fn<E, F>(x: &Tensor<f64>, step: f64, f: F) -> Result<GradCheckReport, E>
where
    E: From<TapeError>,
    F: Fn(&mut Tape<f64>, Var) -> Result<Var, E>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let loss = f(&mut tape, xv)?;
    tape.backward(loss).map_err(E::from)?;
    let analytic = tape.grad(xv).map_err(E::from)?;
    drop(tape);

    let eval = |input: &Tensor<f64>| -> Result<f64, E> {
        let mut tape = Tape::new();
        let xv = tape.leaf(input.clone(), true);
        let loss = f(&mut tape, xv)?;
        Ok(tape
            .value(loss)
            .item()
            .map_err(|e| E::from(TapeError::Tensor(e)))?)
    };

    let mut report = GradCheckReport::default();
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        report.observe("x", i, analytic.data()[i], (fp - fm) / (2.0 * step));
    }
    Ok(report.finish())
}

/// Checks the gradients of a scalar loss with respect to a whole weight
/// set. `build` constructs the loss on a fresh tape and returns it along
/// with the tape variables of the parameters to check, keyed by the same
/// names the [`TensorSet`] traversal uses.
///
/// `stride` subsamples each tensor (element 0 is always included); pass 1
/// to sweep every scalar. Weights are restored to their original values
/// before returning.
pub fn grad_check_set<W, E, F>(
    weights: &mut W,
    step: f64,
    stride: usize,
    build: F,
) -> Result<GradCheckReport, E>
where
    W: TensorSet<f64>,
    E: From<TapeError>,
    F: Fn(&mut Tape<f64>, &W) -> Result<(Var, Vec<(String, Var)>), E>,
{
    assert!(stride >= 1, "stride must be at least 1");
    let mut tape = Tape::new();
    let (loss, params) = build(&mut tape, weights)?;
    tape.backward(loss).map_err(E::from)?;
    let mut analytic = Vec::with_capacity(params.len());
    for (name, var) in params {
        analytic.push((name, tape.grad(var).map_err(E::from)?));
    }
    drop(tape);

    let eval = |w: &W| -> Result<f64, E> {
        let mut tape = Tape::new();
        let (loss, _) = build(&mut tape, w)?;
        let value = tape
            .value(loss)
            .item()
            .map_err(|e| E::from(TapeError::Tensor(e)))?;
        Ok(value)
    };

    let mut report = GradCheckReport::default();
    for (name, grad) in &analytic {
        let mut i = 0;
        while i < grad.numel() {
            let orig = weights
                .with_tensor_mut(name, |t| {
                    let v = t.data_mut()[i];
                    t.data_mut()[i] = v + step;
                    v
                })
                .unwrap_or_else(|| panic!("parameter {name} missing from weight set"));
            let fp = eval(&*weights)?;
            weights.with_tensor_mut(name, |t| t.data_mut()[i] = orig - step);
            let fm = eval(&*weights)?;
            weights.with_tensor_mut(name, |t| t.data_mut()[i] = orig);
            report.observe(name, i, grad.data()[i], (fp - fm) / (2.0 * step));
            i += stride;
        }
    }
    Ok(report.finish())
}

// ── standard sweeps ─────────────────────────────────────────────────────
//
// Shared by the `gradcheck` CLI subcommand and the acceptance suite, so a
// verification run always means the same set of checks.

/// One sweep's outcome, labeled by what it checked.
#[derive(Clone, Debug)]
pub struct NamedReport {
    pub name: &'static str,
    pub report: GradCheckReport,
}

/// Tensor-sweep stride at which the full-model checks finish in well
/// under a minute while still probing every parameter tensor.
pub const MODEL_SWEEP_STRIDE: usize = 23;

const PROBE_STEP: f64 = 1e-5;

fn probe(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let data = (0..shape.iter().product())
        .map(|_| rng.random::<f64>() * 2.0 - 1.0)
        .collect();
    Tensor::new(shape.to_vec(), data).expect("probe shapes are consistent")
}

/// Sums `value` against a fixed weighting so normalizing operations
/// (softmax, layer norm) still see a non-degenerate upstream gradient.
fn weighted_sum(tape: &mut Tape<f64>, value: Var, weighting: &Tensor<f64>) -> Result<Var, TapeError> {
    let w = tape.constant(weighting.clone());
    let p = tape.mul(value, w)?;
    tape.sum_all(p)
}

/// Central-difference check of every differentiable tape operation, each
/// against randomized inputs drawn from `seed`.
pub fn primitive_sweeps(seed: u64) -> Result<Vec<NamedReport>, TapeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<NamedReport> = Vec::new();
    let mut run = |name: &'static str,
                   x: Tensor<f64>,
                   f: &dyn Fn(&mut Tape<f64>, Var) -> Result<Var, TapeError>|
     -> Result<(), TapeError> {
        out.push(NamedReport {
            name,
            report: grad_check_fn(&x, PROBE_STEP, f)?,
        });
        Ok(())
    };

    let c34 = probe(&mut rng, &[3, 4]);
    let w34 = probe(&mut rng, &[3, 4]);
    run("add", probe(&mut rng, &[3, 4]), &|t, v| {
        let b = t.constant(c34.clone());
        let y = t.add(v, b)?;
        weighted_sum(t, y, &w34)
    })?;
    let bias_base = probe(&mut rng, &[3, 4]);
    run("add-broadcast-bias", probe(&mut rng, &[4]), &|t, v| {
        let x = t.constant(bias_base.clone());
        let y = t.add(x, v)?;
        weighted_sum(t, y, &w34)
    })?;
    run("sub", probe(&mut rng, &[3, 4]), &|t, v| {
        let b = t.constant(c34.clone());
        let y = t.sub(b, v)?;
        weighted_sum(t, y, &w34)
    })?;
    run("mul", probe(&mut rng, &[3, 4]), &|t, v| {
        let y = t.mul(v, v)?;
        weighted_sum(t, y, &w34)
    })?;
    run("scale", probe(&mut rng, &[3, 4]), &|t, v| {
        let y = t.scale(v, -1.37)?;
        weighted_sum(t, y, &w34)
    })?;

    let rhs = probe(&mut rng, &[4, 2]);
    let w32 = probe(&mut rng, &[3, 2]);
    run("matmul-lhs", probe(&mut rng, &[3, 4]), &|t, v| {
        let b = t.constant(rhs.clone());
        let y = t.matmul(v, b)?;
        weighted_sum(t, y, &w32)
    })?;
    let lhs = probe(&mut rng, &[3, 4]);
    run("matmul-rhs", probe(&mut rng, &[4, 2]), &|t, v| {
        let a = t.constant(lhs.clone());
        let y = t.matmul(a, v)?;
        weighted_sum(t, y, &w32)
    })?;

    let w43 = probe(&mut rng, &[4, 3]);
    run("reshape", probe(&mut rng, &[3, 4]), &|t, v| {
        let y = t.reshape(v, &[4, 3])?;
        weighted_sum(t, y, &w43)
    })?;
    let w423 = probe(&mut rng, &[4, 2, 3]);
    run("transpose", probe(&mut rng, &[2, 3, 4]), &|t, v| {
        let y = t.transpose(v, &[2, 0, 1])?;
        weighted_sum(t, y, &w423)
    })?;
    let w64 = probe(&mut rng, &[6, 4]);
    run("concat", probe(&mut rng, &[3, 4]), &|t, v| {
        let y = t.concat(&[v, v], 0)?;
        weighted_sum(t, y, &w64)
    })?;
    let w33 = probe(&mut rng, &[3, 3]);
    run("slice", probe(&mut rng, &[3, 5]), &|t, v| {
        let y = t.slice(v, 1, 1, 4)?;
        weighted_sum(t, y, &w33)
    })?;

    let w35 = probe(&mut rng, &[3, 5]);
    run("softmax", probe(&mut rng, &[3, 5]), &|t, v| {
        let y = t.softmax(v, 1)?;
        weighted_sum(t, y, &w35)
    })?;
    let ln_x = probe(&mut rng, &[3, 5]);
    let ln_gamma = probe(&mut rng, &[5]);
    let ln_beta = probe(&mut rng, &[5]);
    let eps = 1e-6;
    run("layer-norm-x", ln_x.clone(), &|t, v| {
        let g = t.constant(ln_gamma.clone());
        let b = t.constant(ln_beta.clone());
        let y = t.layer_norm(v, g, b, eps)?;
        weighted_sum(t, y, &w35)
    })?;
    run("layer-norm-gamma", ln_gamma.clone(), &|t, v| {
        let x = t.constant(ln_x.clone());
        let b = t.constant(ln_beta.clone());
        let y = t.layer_norm(x, v, b, eps)?;
        weighted_sum(t, y, &w35)
    })?;
    run("layer-norm-beta", ln_beta.clone(), &|t, v| {
        let x = t.constant(ln_x.clone());
        let g = t.constant(ln_gamma.clone());
        let y = t.layer_norm(x, g, v, eps)?;
        weighted_sum(t, y, &w35)
    })?;
    run("gelu", probe(&mut rng, &[2, 7]), &|t, v| {
        let y = t.gelu(v)?;
        let w = t.mul(y, y)?;
        t.sum_all(w)
    })?;

    let w572 = probe(&mut rng, &[5, 7, 2]);
    run("bilinear-up", probe(&mut rng, &[3, 4, 2]), &|t, v| {
        let y = t.bilinear_resize(v, 5, 7)?;
        weighted_sum(t, y, &w572)
    })?;
    let w222 = probe(&mut rng, &[2, 2, 2]);
    run("bilinear-down", probe(&mut rng, &[4, 6, 2]), &|t, v| {
        let y = t.bilinear_resize(v, 2, 2)?;
        weighted_sum(t, y, &w222)
    })?;

    run("sum-all", probe(&mut rng, &[3, 4]), &|t, v| {
        let y = t.mul(v, v)?;
        t.sum_all(y)
    })?;
    run("mean-all", probe(&mut rng, &[3, 4]), &|t, v| {
        let y = t.mul(v, v)?;
        t.mean_all(y)
    })?;
    let w4 = probe(&mut rng, &[4]);
    run("sum-axis", probe(&mut rng, &[3, 4]), &|t, v| {
        let y = t.sum_axis(v, 0)?;
        weighted_sum(t, y, &w4)
    })?;
    let w3 = probe(&mut rng, &[3]);
    run("mean-axis", probe(&mut rng, &[3, 4]), &|t, v| {
        let y = t.mean_axis(v, 1)?;
        weighted_sum(t, y, &w3)
    })?;
    run("var-axis", probe(&mut rng, &[3, 4]), &|t, v| {
        let y = t.var_axis(v, 1)?;
        weighted_sum(t, y, &w3)
    })?;
    run("cross-entropy", probe(&mut rng, &[4, 3]), &|t, v| {
        t.cross_entropy_mean(v, &[0, 2, 1, 1])
    })?;

    Ok(out)
}

/// Checks one spatial-reduction attention layer (R = 2 on a 4×4 grid):
/// once with respect to the input tokens, once with respect to every
/// weight tensor including the reduction projection and norm.
pub fn attention_sweeps(seed: u64) -> Result<Vec<NamedReport>, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = AttentionConfig {
        channels: 8,
        heads: 2,
        reduction: 2,
    };
    let (h, w) = (4, 4);
    let weights = AttentionWeights::<f64>::init(&cfg, &mut rng);
    let x = probe(&mut rng, &[h * w, cfg.channels]);
    let weighting = probe(&mut rng, &[h * w, cfg.channels]);

    let input_report = grad_check_fn(&x, PROBE_STEP, |tape, v| {
        let vars = weights.register(tape, false);
        let y = sra_forward(tape, v, h, w, &cfg, &vars)?;
        Ok::<_, ModelError>(weighted_sum(tape, y, &weighting)?)
    })?;

    let mut set = AttentionSet { weights };
    let weight_report = grad_check_set(&mut set, PROBE_STEP, 1, |tape, set| {
        let xv = tape.constant(x.clone());
        let vars = set.weights.register(tape, true);
        let y = sra_forward(tape, xv, h, w, &cfg, &vars)?;
        let loss = weighted_sum(tape, y, &weighting)?;
        let mut named = vec![
            ("query.weight".to_string(), vars.query.weight),
            ("query.bias".to_string(), vars.query.bias),
            ("key.weight".to_string(), vars.key.weight),
            ("key.bias".to_string(), vars.key.bias),
            ("value.weight".to_string(), vars.value.weight),
            ("value.bias".to_string(), vars.value.bias),
            ("output.weight".to_string(), vars.output.weight),
            ("output.bias".to_string(), vars.output.bias),
        ];
        if let Some(sr) = &vars.sr {
            named.push(("sr.proj.weight".to_string(), sr.proj.weight));
            named.push(("sr.proj.bias".to_string(), sr.proj.bias));
            named.push(("sr.norm.gamma".to_string(), sr.norm.gamma));
            named.push(("sr.norm.beta".to_string(), sr.norm.beta));
        }
        Ok::<_, ModelError>((loss, named))
    })?;

    Ok(vec![
        NamedReport {
            name: "sra-layer-input",
            report: input_report,
        },
        NamedReport {
            name: "sra-layer-weights",
            report: weight_report,
        },
    ])
}

struct AttentionSet {
    weights: AttentionWeights<f64>,
}

impl TensorSet<f64> for AttentionSet {
    fn for_each_tensor(&self, f: &mut dyn FnMut(&str, &Tensor<f64>)) {
        let w = &self.weights;
        for (name, lin) in [
            ("query", &w.query),
            ("key", &w.key),
            ("value", &w.value),
            ("output", &w.output),
        ] {
            f(&format!("{name}.weight"), &lin.weight);
            f(&format!("{name}.bias"), &lin.bias);
        }
        if let Some(sr) = &w.sr {
            f("sr.proj.weight", &sr.proj.weight);
            f("sr.proj.bias", &sr.proj.bias);
            f("sr.norm.gamma", &sr.norm.gamma);
            f("sr.norm.beta", &sr.norm.beta);
        }
    }

    fn for_each_tensor_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f64>)) {
        let w = &mut self.weights;
        for (name, lin) in [
            ("query", &mut w.query),
            ("key", &mut w.key),
            ("value", &mut w.value),
            ("output", &mut w.output),
        ] {
            f(&format!("{name}.weight"), &mut lin.weight);
            f(&format!("{name}.bias"), &mut lin.bias);
        }
        if let Some(sr) = &mut w.sr {
            f("sr.proj.weight", &mut sr.proj.weight);
            f("sr.proj.bias", &mut sr.proj.bias);
            f("sr.norm.gamma", &mut sr.norm.gamma);
            f("sr.norm.beta", &mut sr.norm.beta);
        }
    }
}

/// Full-model checks on the micro preset: the classification loss on one
/// toy sample, and the segmentation loss with the fusion head attached.
/// Every parameter tensor is probed at the given stride.
pub fn model_sweeps(seed: u64, stride: usize) -> Result<Vec<NamedReport>, TrainError> {
    let model = ModelConfig::pvt_micro(TOY_CLASSES);
    let dataset = make_toy_dataset::<f64>(seed, 2, ToyMode::Classification);
    let sample = &dataset.samples[0];
    let mut out = Vec::new();

    let mut weights = ModelWeights::<f64>::init(&model, None, seed)?;
    let report = grad_check_set(&mut weights, PROBE_STEP, stride, |tape, w| {
        let image = tape.constant(sample.image.clone());
        let vars = w.register(tape, true);
        let logits = classify_forward_on_tape(tape, image, &model, &vars.backbone)?;
        let loss = tape.cross_entropy_mean(logits, &[sample.label])?;
        Ok::<_, TrainError>((loss, vars.named_vars()))
    })?;
    out.push(NamedReport {
        name: "pvt-micro-classification",
        report,
    });

    let seg = SegHeadConfig::new(TOY_CLASSES);
    let mut weights = ModelWeights::<f64>::init(&model, Some(&seg), seed)?;
    let report = grad_check_set(&mut weights, PROBE_STEP, stride, |tape, w| {
        let image = tape.constant(sample.image.clone());
        let vars = w.register(tape, true);
        let head = vars.seg_head.as_ref().expect("head was initialized");
        let pyramid = backbone_forward_on_tape(tape, image, &model, &vars.backbone)?;
        let cells = seg_head_forward_on_tape(tape, &pyramid, head)?;
        let shape = tape.value(cells).shape().to_vec();
        let rows = shape[0] * shape[1];
        let flat = tape.reshape(cells, &[rows, shape[2]])?;
        let loss = tape.cross_entropy_mean(flat, &sample.mask)?;
        Ok::<_, TrainError>((loss, vars.named_vars()))
    })?;
    out.push(NamedReport {
        name: "pvt-micro-segmentation",
        report,
    });

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_larger_magnitude_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        // Tiny values are compared on an absolute scale of 1.
        assert!((relative_error(1e-9, 0.0) - 1e-9).abs() < 1e-20);
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // Loss is sum(x²) but pretend the gradient is that of sum(x) by
        // checking a deliberately mismatched function pairing: the check
        // itself must flag the discrepancy.
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let report = grad_check_fn(&x, 1e-5, |t, v| {
            let y = t.mul(v, v)?;
            t.sum_all(y)
        })
        .unwrap();
        assert!(report.passes(1e-6));
        // Now corrupt: compare sum(x²) analytic grads against sum(x³)'s
        // numeric slope by evaluating a different function.
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), true);
        let y = tape.mul(v, v).unwrap();
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        let analytic = tape.grad(v).unwrap();
        let mut report = GradCheckReport::default();
        for i in 0..x.numel() {
            // Numeric slope of sum(x³) is 3x²; analytic is 2x. These only
            // coincide at x = 0 or x = 2/3, so every probe here deviates.
            let numeric = 3.0 * x.data()[i] * x.data()[i];
            report.observe("x", i, analytic.data()[i], numeric);
        }
        let report = report.finish();
        assert!(!report.passes(1e-6));
        assert!(report.worst.is_some());
    }

    struct OneTensor {
        w: Tensor<f64>,
    }

    impl TensorSet<f64> for OneTensor {
        fn for_each_tensor(&self, f: &mut dyn FnMut(&str, &Tensor<f64>)) {
            f("w", &self.w);
        }
        fn for_each_tensor_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f64>)) {
            f("w", &mut self.w);
        }
    }

    #[test]
    fn set_driver_sweeps_and_restores_weights() {
        let mut set = OneTensor {
            w: Tensor::new(vec![2, 2], vec![0.3, -0.7, 1.1, 0.2]).unwrap(),
        };
        let before = set.w.clone();
        let report = grad_check_set(&mut set, 1e-5, 1, |tape, w| {
            let v = tape.leaf(w.w.clone(), true);
            let sq = tape.mul(v, v)?;
            let loss = tape.sum_all(sq)?;
            Ok::<_, TapeError>((loss, vec![("w".to_string(), v)]))
        })
        .unwrap();
        assert_eq!(report.checked, 4);
        assert!(report.passes(1e-6));
        assert_eq!(set.w.data(), before.data());
    }

    #[test]
    fn primitive_sweeps_cover_every_rule_and_pass() {
        let reports = primitive_sweeps(0).unwrap();
        assert!(reports.len() >= 20);
        for NamedReport { name, report } in &reports {
            assert!(report.checked > 0, "{name} checked nothing");
            assert!(
                report.passes(1e-6),
                "{name}: max rel err {}",
                report.max_rel_err
            );
        }
    }

    #[test]
    fn attention_sweeps_check_input_and_weights() {
        let reports = attention_sweeps(1).unwrap();
        assert_eq!(reports.len(), 2);
        for NamedReport { name, report } in &reports {
            assert!(
                report.passes(1e-5),
                "{name}: max rel err {}",
                report.max_rel_err
            );
        }
        // The weight sweep must reach the spatial-reduction tensors.
        let weights = &reports[1].report;
        assert!(weights.checked > 8 * 8 + 8 * 4);
    }

    #[test]
    fn model_sweeps_probe_both_task_heads() {
        // Coarse stride keeps this a smoke test; the acceptance suite
        // runs the fine sweep.
        let reports = model_sweeps(2, 977).unwrap();
        let names: Vec<_> = reports.iter().map(|r| r.name).collect();
        assert_eq!(
            names,
            ["pvt-micro-classification", "pvt-micro-segmentation"]
        );
        for NamedReport { name, report } in &reports {
            assert!(report.checked > 0, "{name} checked nothing");
            assert!(
                report.passes(1e-4),
                "{name}: max rel err {}",
                report.max_rel_err
            );
        }
    }

    #[test]
    fn set_driver_stride_subsamples() {
        let mut set = OneTensor {
            w: Tensor::new(vec![5], vec![0.1, 0.2, 0.3, 0.4, 0.5]).unwrap(),
        };
        let report = grad_check_set(&mut set, 1e-5, 2, |tape, w| {
            let v = tape.leaf(w.w.clone(), true);
            let sq = tape.mul(v, v)?;
            let loss = tape.sum_all(sq)?;
            Ok::<_, TapeError>((loss, vec![("w".to_string(), v)]))
        })
        .unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.max_rel_err.is_finite());
    }
}
