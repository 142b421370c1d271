//! Dense prediction head over the feature pyramid.
//!
//! Each pyramid level is projected to a shared embedding width by its own
//! linear layer, resampled (align-corners bilinear) onto the finest grid,
//! and summed; a final per-position linear layer produces class logits at
//! stride 4. Nothing here mixes neighboring positions except the
//! resampling, so the head stays convolution-free like the backbone.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{linear, LinearVars, LinearWeights, ModelError, Result};
use crate::backbone::{FeaturePyramid, ModelConfig, PyramidVars};
use crate::tape::{Tape, Var};
use crate::tensor::{Elem, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegHeadConfig {
    /// Shared width the four levels are projected to before fusion.
    pub embed_channels: usize,
    pub num_classes: usize,
}

impl SegHeadConfig {
    pub fn new(num_classes: usize) -> Self {
        SegHeadConfig {
            embed_channels: 32,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_channels == 0 || self.num_classes == 0 {
            return Err(ModelError::Config(
                "segmentation head needs positive embed_channels and num_classes".to_string(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SegHeadWeights<T: Elem> {
    /// One `[C_i, D]` projection per pyramid level.
    pub laterals: Vec<LinearWeights<T>>,
    /// `[D, num_classes]` per-position classifier.
    pub classifier: LinearWeights<T>,
}

impl<T: Elem> SegHeadWeights<T> {
    pub fn init(cfg: &SegHeadConfig, model: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(SegHeadWeights {
            laterals: model
                .stages
                .iter()
                .map(|s| LinearWeights::init(s.channels, cfg.embed_channels, rng))
                .collect(),
            classifier: LinearWeights::init(cfg.embed_channels, cfg.num_classes, rng),
        })
    }

    /// All-zero weights with the right shapes, used as a loading skeleton.
    pub(crate) fn zeroed(cfg: &SegHeadConfig, model: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let zero_linear = |i: usize, o: usize| LinearWeights {
            weight: Tensor::zeros(&[i, o]),
            bias: Tensor::zeros(&[o]),
        };
        Ok(SegHeadWeights {
            laterals: model
                .stages
                .iter()
                .map(|s| zero_linear(s.channels, cfg.embed_channels))
                .collect(),
            classifier: zero_linear(cfg.embed_channels, cfg.num_classes),
        })
    }

    pub fn register(&self, tape: &mut Tape<T>, requires_grad: bool) -> SegHeadVars {
        SegHeadVars {
            laterals: self
                .laterals
                .iter()
                .map(|l| l.register(tape, requires_grad))
                .collect(),
            classifier: self.classifier.register(tape, requires_grad),
        }
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, l) in self.laterals.iter().enumerate() {
            l.visit(&format!("{prefix}.laterals.{i}"), f);
        }
        self.classifier.visit(&format!("{prefix}.classifier"), f);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, l) in self.laterals.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.laterals.{i}"), f);
        }
        self.classifier.visit_mut(&format!("{prefix}.classifier"), f);
    }
}

#[derive(Clone, Debug)]
pub struct SegHeadVars {
    pub laterals: Vec<LinearVars>,
    pub classifier: LinearVars,
}

impl SegHeadVars {
    /// `(name, var)` pairs mirroring the weight traversal, without the
    /// owner's prefix.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        for (i, l) in self.laterals.iter().enumerate() {
            out.push((format!("laterals.{i}.weight"), l.weight));
            out.push((format!("laterals.{i}.bias"), l.bias));
        }
        out.push(("classifier.weight".to_string(), self.classifier.weight));
        out.push(("classifier.bias".to_string(), self.classifier.bias));
        out
    }
}

/// Fuses the pyramid into stride-4 logits: `[h₁, w₁, num_classes]`.
pub fn seg_head_forward_on_tape<T: Elem>(
    tape: &mut Tape<T>,
    pyramid: &PyramidVars,
    vars: &SegHeadVars,
) -> Result<Var> {
    if vars.laterals.len() != pyramid.levels.len() {
        return Err(ModelError::Config(format!(
            "head has {} lateral projections for {} pyramid levels",
            vars.laterals.len(),
            pyramid.levels.len()
        )));
    }
    let (h0, w0) = pyramid.sizes[0];
    let mut fused: Option<Var> = None;
    for ((&level, &(h, w)), lateral) in pyramid
        .levels
        .iter()
        .zip(&pyramid.sizes)
        .zip(&vars.laterals)
    {
        let channels = tape.value(level).shape()[2];
        let tokens = tape.reshape(level, &[h * w, channels])?;
        let embedded = tape.matmul(tokens, lateral.weight)?;
        let embedded = tape.add(embedded, lateral.bias)?;
        let embed_dim = tape.value(embedded).shape()[1];
        let grid = tape.reshape(embedded, &[h, w, embed_dim])?;
        let aligned = if (h, w) == (h0, w0) {
            grid
        } else {
            tape.bilinear_resize(grid, h0, w0)?
        };
        fused = Some(match fused {
            Some(acc) => tape.add(acc, aligned)?,
            None => aligned,
        });
    }
    let fused = fused.expect("pyramid always has four levels");
    let embed_dim = tape.value(fused).shape()[2];
    let tokens = tape.reshape(fused, &[h0 * w0, embed_dim])?;
    let logits = linear(tape, tokens, &vars.classifier)?;
    let num_classes = tape.value(logits).shape()[1];
    Ok(tape.reshape(logits, &[h0, w0, num_classes])?)
}

/// Convenience head forward on a plain feature pyramid.
pub fn seg_head_forward<T: Elem>(
    pyramid: &FeaturePyramid<T>,
    weights: &SegHeadWeights<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let mut levels = Vec::with_capacity(4);
    let mut sizes = Vec::with_capacity(4);
    for level in &pyramid.levels {
        let shape = level.shape();
        if shape.len() != 3 {
            return Err(ModelError::Config(format!(
                "pyramid level must be an [h, w, c] grid, got {shape:?}"
            )));
        }
        sizes.push((shape[0], shape[1]));
        levels.push(tape.constant(level.clone()));
    }
    let pyramid_vars = PyramidVars {
        levels: [levels[0], levels[1], levels[2], levels[3]],
        sizes: [sizes[0], sizes[1], sizes[2], sizes[3]],
    };
    let vars = weights.register(&mut tape, false);
    let logits = seg_head_forward_on_tape(&mut tape, &pyramid_vars, &vars)?;
    Ok(tape.value(logits).clone())
}
