//! Multi-head self-attention with optional spatial reduction of the
//! key/value sequence.
//!
//! The spatial reduction groups the token grid into R×R blocks — the same
//! row-major gather the patch embedding uses — flattens each block into a
//! single wide vector, projects it back to the channel width, and
//! layer-normalizes. Queries still come from the full sequence, so the
//! attention matrix shrinks from n×n to n×(n/R²) while the output length
//! is unchanged. At R = 1 the reduction is the identity gather, and with
//! an identity projection plus bypassed norm the layer degenerates to
//! plain multi-head attention bit for bit.

use rand::Rng;
use thiserror::Error;

use crate::init::{trunc_normal, INIT_STD};
use crate::tape::{AttentionEvent, Tape, TapeError, Var};
use crate::tensor::{Elem, Tensor, TensorError};

/// Epsilon inside every layer-norm denominator.
pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("channels {channels} not divisible by {heads} heads")]
    HeadsDivideChannels { channels: usize, heads: usize },
    #[error("token count {tokens} does not match grid {h}×{w}")]
    GridMismatch { tokens: usize, h: usize, w: usize },
    #[error("reduction {reduction} does not divide grid {h}×{w}")]
    ReductionDividesGrid { reduction: usize, h: usize, w: usize },
    #[error("class token requires reduction 1, got {reduction}")]
    ClassTokenWithReduction { reduction: usize },
    #[error("input {height}×{width} not divisible by {divisor}")]
    InputNotDivisible {
        height: usize,
        width: usize,
        divisor: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<V> = std::result::Result<V, ModelError>;

/// Shape of one attention layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub channels: usize,
    pub heads: usize,
    /// Side length R of the key/value reduction blocks; 1 disables it.
    pub reduction: usize,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.reduction == 0 {
            return Err(ModelError::Config(format!(
                "channels, heads, and reduction must be positive, got {self:?}"
            )));
        }
        if self.channels % self.heads != 0 {
            return Err(ModelError::HeadsDivideChannels {
                channels: self.channels,
                heads: self.heads,
            });
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

// ── weight containers ───────────────────────────────────────────────────

/// Dense projection `x·W + b` with `W` stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct LinearWeights<T: Elem> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Elem> LinearWeights<T> {
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        LinearWeights {
            weight: trunc_normal(&[in_dim, out_dim], INIT_STD, rng),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    /// Identity projection, used to degenerate spatial reduction at R = 1.
    pub fn identity(dim: usize) -> Self {
        let mut weight = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            weight.data_mut()[i * dim + i] = T::one();
        }
        LinearWeights {
            weight,
            bias: Tensor::zeros(&[dim]),
        }
    }

    pub fn register(&self, tape: &mut Tape<T>, requires_grad: bool) -> LinearVars {
        LinearVars {
            weight: tape.leaf(self.weight.clone(), requires_grad),
            bias: tape.leaf(self.bias.clone(), requires_grad),
        }
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&format!("{prefix}.weight"), &self.weight);
        f(&format!("{prefix}.bias"), &self.bias);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

/// Layer-norm gain and shift over the channel axis.
#[derive(Clone, Debug)]
pub struct NormWeights<T: Elem> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Elem> NormWeights<T> {
    pub fn init(dim: usize) -> Self {
        NormWeights {
            gamma: Tensor::ones(&[dim]),
            beta: Tensor::zeros(&[dim]),
        }
    }

    pub fn register(&self, tape: &mut Tape<T>, requires_grad: bool) -> NormVars {
        NormVars {
            gamma: tape.leaf(self.gamma.clone(), requires_grad),
            beta: tape.leaf(self.beta.clone(), requires_grad),
        }
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&format!("{prefix}.gamma"), &self.gamma);
        f(&format!("{prefix}.beta"), &self.beta);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NormVars {
    pub gamma: Var,
    pub beta: Var,
}

/// Projection and norm applied to gathered R×R key/value blocks.
#[derive(Clone, Debug)]
pub struct SpatialReductionWeights<T: Elem> {
    /// `[R²·C, C]` block projection.
    pub proj: LinearWeights<T>,
    pub norm: NormWeights<T>,
    /// Skips the norm; only used to make R = 1 collapse onto plain MHA.
    pub bypass_norm: bool,
}

impl<T: Elem> SpatialReductionWeights<T> {
    pub fn init(channels: usize, reduction: usize, rng: &mut impl Rng) -> Self {
        SpatialReductionWeights {
            proj: LinearWeights::init(reduction * reduction * channels, channels, rng),
            norm: NormWeights::init(channels),
            bypass_norm: false,
        }
    }

    /// Exact identity reduction for R = 1: identity projection, norm
    /// bypassed.
    pub fn identity(channels: usize) -> Self {
        SpatialReductionWeights {
            proj: LinearWeights::identity(channels),
            norm: NormWeights::init(channels),
            bypass_norm: true,
        }
    }

    pub fn register(&self, tape: &mut Tape<T>, requires_grad: bool) -> SpatialReductionVars {
        SpatialReductionVars {
            proj: self.proj.register(tape, requires_grad),
            norm: self.norm.register(tape, requires_grad),
            bypass_norm: self.bypass_norm,
        }
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.proj.visit(&format!("{prefix}.proj"), f);
        self.norm.visit(&format!("{prefix}.norm"), f);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.proj.visit_mut(&format!("{prefix}.proj"), f);
        self.norm.visit_mut(&format!("{prefix}.norm"), f);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SpatialReductionVars {
    pub proj: LinearVars,
    pub norm: NormVars,
    pub bypass_norm: bool,
}

/// Full attention layer: fused query/key/value/output projections plus the
/// optional spatial reduction. Head `j` of a fused `[C, C]` projection
/// lives in columns `j·d .. (j+1)·d`.
#[derive(Clone, Debug)]
pub struct AttentionWeights<T: Elem> {
    pub query: LinearWeights<T>,
    pub key: LinearWeights<T>,
    pub value: LinearWeights<T>,
    pub output: LinearWeights<T>,
    /// Present whenever reduction > 1; at reduction 1 it is only
    /// materialized for the degeneracy tests.
    pub sr: Option<SpatialReductionWeights<T>>,
}

impl<T: Elem> AttentionWeights<T> {
    pub fn init(cfg: &AttentionConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.channels;
        AttentionWeights {
            query: LinearWeights::init(c, c, rng),
            key: LinearWeights::init(c, c, rng),
            value: LinearWeights::init(c, c, rng),
            output: LinearWeights::init(c, c, rng),
            sr: (cfg.reduction > 1).then(|| SpatialReductionWeights::init(c, cfg.reduction, rng)),
        }
    }

    pub fn register(&self, tape: &mut Tape<T>, requires_grad: bool) -> AttentionVars {
        AttentionVars {
            query: self.query.register(tape, requires_grad),
            key: self.key.register(tape, requires_grad),
            value: self.value.register(tape, requires_grad),
            output: self.output.register(tape, requires_grad),
            sr: self.sr.as_ref().map(|sr| sr.register(tape, requires_grad)),
        }
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.query.visit(&format!("{prefix}.query"), f);
        self.key.visit(&format!("{prefix}.key"), f);
        self.value.visit(&format!("{prefix}.value"), f);
        self.output.visit(&format!("{prefix}.output"), f);
        if let Some(sr) = &self.sr {
            sr.visit(&format!("{prefix}.sr"), f);
        }
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.query.visit_mut(&format!("{prefix}.query"), f);
        self.key.visit_mut(&format!("{prefix}.key"), f);
        self.value.visit_mut(&format!("{prefix}.value"), f);
        self.output.visit_mut(&format!("{prefix}.output"), f);
        if let Some(sr) = &mut self.sr {
            sr.visit_mut(&format!("{prefix}.sr"), f);
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub query: LinearVars,
    pub key: LinearVars,
    pub value: LinearVars,
    pub output: LinearVars,
    pub sr: Option<SpatialReductionVars>,
}

// ── forward operations ──────────────────────────────────────────────────

/// `x·W + b` on the tape.
pub fn linear<T: Elem>(tape: &mut Tape<T>, x: Var, w: &LinearVars) -> Result<Var> {
    let y = tape.matmul(x, w.weight)?;
    Ok(tape.add(y, w.bias)?)
}

/// Regroups an `[h, w, c]` grid into row-major `block × block` tiles,
/// flattening each tile (row, column, channel) into one vector:
/// the result is `[(h/block)·(w/block), block²·c]`.
pub fn gather_blocks<T: Elem>(tape: &mut Tape<T>, grid: Var, block: usize) -> Result<Var> {
    let shape = tape.value(grid).shape().to_vec();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if block == 0 || h % block != 0 || w % block != 0 {
        return Err(ModelError::ReductionDividesGrid {
            reduction: block,
            h,
            w,
        });
    }
    let (hb, wb) = (h / block, w / block);
    let tiled = tape.reshape(grid, &[hb, block, wb, block, c])?;
    let regrouped = tape.transpose(tiled, &[0, 2, 1, 3, 4])?;
    Ok(tape.reshape(regrouped, &[hb * wb, block * block * c])?)
}

/// Spatial reduction of a token sequence laid out on an `h × w` grid:
/// gather R×R blocks, project `[R²·C → C]`, then layer-norm (unless the
/// weights bypass it).
pub fn spatial_reduce<T: Elem>(
    tape: &mut Tape<T>,
    x: Var,
    h: usize,
    w: usize,
    reduction: usize,
    sr: &SpatialReductionVars,
    eps: T,
) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let (tokens, c) = (shape[0], shape[1]);
    if tokens != h * w {
        return Err(ModelError::GridMismatch { tokens, h, w });
    }
    let grid = tape.reshape(x, &[h, w, c])?;
    let gathered = gather_blocks(tape, grid, reduction)?;
    let projected = linear(tape, gathered, &sr.proj)?;
    if sr.bypass_norm {
        Ok(projected)
    } else {
        Ok(tape.layer_norm(projected, sr.norm.gamma, sr.norm.beta, eps)?)
    }
}

/// Scaled dot-product attention: `softmax(q·kᵀ/√d)·v`. Accepts `[n, d]`
/// single-head operands or `[heads, n, d]` batched ones; records the shape
/// of the attention matrix it forms.
pub fn attention_core<T: Elem>(tape: &mut Tape<T>, q: Var, k: Var, v: Var) -> Result<Var> {
    let q_shape = tape.value(q).shape().to_vec();
    let k_shape = tape.value(k).shape().to_vec();
    let rank = q_shape.len();
    if rank != 2 && rank != 3 {
        return Err(ModelError::Config(format!(
            "attention operands must be rank 2 or 3, got {q_shape:?}"
        )));
    }
    let d = q_shape[rank - 1];
    let mut swap: Vec<usize> = (0..rank).collect();
    swap.swap(rank - 2, rank - 1);
    let kt = tape.transpose(k, &swap)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, T::from_f64(1.0 / (d as f64).sqrt()))?;
    let probs = tape.softmax(scaled, rank - 1)?;
    tape.record_attention(AttentionEvent {
        queries: q_shape[rank - 2],
        keys: k_shape[rank - 2],
        heads: if rank == 3 { q_shape[0] } else { 1 },
    });
    Ok(tape.matmul(probs, v)?)
}

/// `[n, C] → [heads, n, C/heads]`.
fn split_heads<T: Elem>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let (n, c) = (shape[0], shape[1]);
    let split = tape.reshape(x, &[n, heads, c / heads])?;
    Ok(tape.transpose(split, &[1, 0, 2])?)
}

/// `[heads, n, d] → [n, heads·d]`.
fn merge_heads<T: Elem>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let (heads, n, d) = (shape[0], shape[1], shape[2]);
    let joined = tape.transpose(x, &[1, 0, 2])?;
    Ok(tape.reshape(joined, &[n, heads * d])?)
}

fn attention_with_kv<T: Elem>(
    tape: &mut Tape<T>,
    x: Var,
    kv_source: Var,
    cfg: &AttentionConfig,
    w: &AttentionVars,
) -> Result<Var> {
    let q = linear(tape, x, &w.query)?;
    let k = linear(tape, kv_source, &w.key)?;
    let v = linear(tape, kv_source, &w.value)?;
    let q = split_heads(tape, q, cfg.heads)?;
    let k = split_heads(tape, k, cfg.heads)?;
    let v = split_heads(tape, v, cfg.heads)?;
    let context = attention_core(tape, q, k, v)?;
    let merged = merge_heads(tape, context)?;
    linear(tape, merged, &w.output)
}

/// Plain multi-head self-attention over `[n, C]` tokens. Any spatial
/// reduction weights on `w` are ignored.
pub fn mha_forward<T: Elem>(
    tape: &mut Tape<T>,
    x: Var,
    cfg: &AttentionConfig,
    w: &AttentionVars,
) -> Result<Var> {
    cfg.validate()?;
    attention_with_kv(tape, x, x, cfg, w)
}

/// Spatial-reduction attention over tokens on an `h × w` grid. The row
/// count of `x` decides whether a class token is present: `h·w` rows mean
/// none, `h·w + 1` mean the first row is a class token (allowed only at
/// reduction 1, where keys and values keep the full sequence).
pub fn sra_forward<T: Elem>(
    tape: &mut Tape<T>,
    x: Var,
    h: usize,
    w: usize,
    cfg: &AttentionConfig,
    weights: &AttentionVars,
) -> Result<Var> {
    cfg.validate()?;
    let tokens = tape.value(x).shape()[0];
    let has_class_token = if tokens == h * w {
        false
    } else if tokens == h * w + 1 {
        true
    } else {
        return Err(ModelError::GridMismatch { tokens, h, w });
    };
    if has_class_token && cfg.reduction > 1 {
        return Err(ModelError::ClassTokenWithReduction {
            reduction: cfg.reduction,
        });
    }
    if cfg.reduction > 1 && weights.sr.is_none() {
        return Err(ModelError::Config(format!(
            "reduction {} requires spatial-reduction weights",
            cfg.reduction
        )));
    }
    let eps = T::from_f64(LAYER_NORM_EPS);
    let kv = match &weights.sr {
        Some(sr) if cfg.reduction > 1 => {
            spatial_reduce(tape, x, h, w, cfg.reduction, sr, eps)?
        }
        Some(sr) => {
            // R = 1: block gathering is the identity, so the reduction is
            // just the projection (and norm) applied to every token —
            // including a class token if one is present.
            let projected = linear(tape, x, &sr.proj)?;
            if sr.bypass_norm {
                projected
            } else {
                tape.layer_norm(projected, sr.norm.gamma, sr.norm.beta, eps)?
            }
        }
        None => x,
    };
    attention_with_kv(tape, x, kv, cfg, weights)
}
