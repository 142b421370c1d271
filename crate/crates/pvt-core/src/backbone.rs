//! Four-stage pyramid transformer backbone, plus a single-resolution
//! columnar baseline built from the same encoder layers.
//!
//! Each stage embeds non-overlapping P×P patches of its input grid with a
//! linear projection (rows flattened row, column, channel), layer-norms
//! them, adds a learned position embedding, and runs a stack of pre-norm
//! encoder layers whose attention reduces keys and values spatially. The
//! stage output is reshaped back onto its grid and fed to the next stage,
//! so the four stages produce feature maps at strides 4, 8, 16, and 32.
//!
//! Position embeddings are stored for a square reference resolution and
//! bilinearly resampled (align-corners) whenever the input grid differs.
//! Classification prepends a learned class token to the stage-4 sequence
//! after the position embedding is added; the class row reserved for it
//! in the stage-4 embedding table is never added to anything, so it stays
//! inert under training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    gather_blocks, linear, sra_forward, AttentionConfig, AttentionVars, AttentionWeights,
    LinearVars, LinearWeights, ModelError, NormVars, NormWeights, Result,
    SpatialReductionWeights, LAYER_NORM_EPS,
};
use crate::init::{trunc_normal, INIT_STD};
use crate::tape::{Tape, Var};
use crate::tensor::{Elem, Tensor, TensorSet};

/// Square input side the stored position embeddings correspond to.
pub const REFERENCE_RESOLUTION: usize = 224;

// ── configuration ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    /// Side length of the square patches this stage embeds.
    pub patch_size: usize,
    /// Channel width of the stage.
    pub channels: usize,
    /// Number of encoder layers.
    pub depth: usize,
    /// Key/value spatial reduction factor R.
    pub reduction: usize,
    /// Attention heads.
    pub heads: usize,
    /// FFN hidden width as a multiple of `channels`.
    pub ffn_expansion: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: String,
    pub input_channels: usize,
    pub num_classes: usize,
    pub stages: [StageConfig; 4],
    /// Square input side the position embeddings are stored for.
    pub reference_resolution: usize,
}

fn stage(
    patch_size: usize,
    channels: usize,
    depth: usize,
    reduction: usize,
    heads: usize,
    ffn_expansion: usize,
) -> StageConfig {
    StageConfig {
        patch_size,
        channels,
        depth,
        reduction,
        heads,
        ffn_expansion,
    }
}

impl ModelConfig {
    fn preset_with(variant: &str, depths: [usize; 4], num_classes: usize) -> Self {
        ModelConfig {
            variant: variant.to_string(),
            input_channels: 3,
            num_classes,
            stages: [
                stage(4, 64, depths[0], 8, 1, 8),
                stage(2, 128, depths[1], 4, 2, 8),
                stage(2, 320, depths[2], 2, 5, 4),
                stage(2, 512, depths[3], 1, 8, 4),
            ],
            reference_resolution: REFERENCE_RESOLUTION,
        }
    }

    pub fn pvt_tiny(num_classes: usize) -> Self {
        Self::preset_with("pvt-tiny", [2, 2, 2, 2], num_classes)
    }

    pub fn pvt_small(num_classes: usize) -> Self {
        Self::preset_with("pvt-small", [3, 4, 6, 3], num_classes)
    }

    pub fn pvt_medium(num_classes: usize) -> Self {
        Self::preset_with("pvt-medium", [3, 4, 18, 3], num_classes)
    }

    pub fn pvt_large(num_classes: usize) -> Self {
        Self::preset_with("pvt-large", [3, 8, 27, 3], num_classes)
    }

    /// Desk-scale variant for tests and the toy trainer: same stage
    /// structure, narrow channels, one layer per stage.
    pub fn pvt_micro(num_classes: usize) -> Self {
        ModelConfig {
            variant: "pvt-micro".to_string(),
            input_channels: 3,
            num_classes,
            stages: [
                stage(4, 8, 1, 8, 1, 2),
                stage(2, 16, 1, 4, 2, 2),
                stage(2, 32, 1, 2, 4, 2),
                stage(2, 64, 1, 1, 8, 2),
            ],
            reference_resolution: REFERENCE_RESOLUTION,
        }
    }

    /// Looks up a named preset; `num_classes` applies to all of them.
    pub fn preset(name: &str, num_classes: usize) -> Option<Self> {
        match name {
            "pvt-tiny" => Some(Self::pvt_tiny(num_classes)),
            "pvt-small" => Some(Self::pvt_small(num_classes)),
            "pvt-medium" => Some(Self::pvt_medium(num_classes)),
            "pvt-large" => Some(Self::pvt_large(num_classes)),
            "pvt-micro" => Some(Self::pvt_micro(num_classes)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.num_classes == 0 {
            return Err(ModelError::Config(format!(
                "input_channels and num_classes must be positive in {}",
                self.variant
            )));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.patch_size == 0 || s.depth == 0 || s.ffn_expansion == 0 {
                return Err(ModelError::Config(format!(
                    "stage {i} of {} has a zero field: {s:?}",
                    self.variant
                )));
            }
            self.attention_config(i).validate()?;
        }
        let strides = self.stage_strides();
        for (i, stride) in strides.iter().enumerate() {
            if self.reference_resolution % stride != 0 {
                return Err(ModelError::Config(format!(
                    "reference resolution {} not divisible by stage-{} stride {}",
                    self.reference_resolution, i, stride
                )));
            }
            let ref_grid = self.reference_resolution / stride;
            if ref_grid % self.stages[i].reduction != 0 {
                return Err(ModelError::Config(format!(
                    "stage-{i} reduction {} does not divide its reference grid {ref_grid}",
                    self.stages[i].reduction
                )));
            }
        }
        Ok(())
    }

    /// Cumulative downsampling factor after each stage.
    pub fn stage_strides(&self) -> [usize; 4] {
        let mut strides = [0; 4];
        let mut acc = 1;
        for (i, s) in self.stages.iter().enumerate() {
            acc *= s.patch_size;
            strides[i] = acc;
        }
        strides
    }

    /// Side of the square token grid stage `i` has at the reference
    /// resolution.
    pub fn reference_grid(&self, stage: usize) -> usize {
        self.reference_resolution / self.stage_strides()[stage]
    }

    pub fn attention_config(&self, stage: usize) -> AttentionConfig {
        let s = &self.stages[stage];
        AttentionConfig {
            channels: s.channels,
            heads: s.heads,
            reduction: s.reduction,
        }
    }
}

// ── weight containers ───────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct EncoderLayerWeights<T: Elem> {
    pub norm1: NormWeights<T>,
    pub attn: AttentionWeights<T>,
    pub norm2: NormWeights<T>,
    pub ffn_in: LinearWeights<T>,
    pub ffn_out: LinearWeights<T>,
}

impl<T: Elem> EncoderLayerWeights<T> {
    pub fn init(acfg: &AttentionConfig, ffn_expansion: usize, rng: &mut impl Rng) -> Self {
        let c = acfg.channels;
        EncoderLayerWeights {
            norm1: NormWeights::init(c),
            attn: AttentionWeights::init(acfg, rng),
            norm2: NormWeights::init(c),
            ffn_in: LinearWeights::init(c, c * ffn_expansion, rng),
            ffn_out: LinearWeights::init(c * ffn_expansion, c, rng),
        }
    }

    pub fn register(&self, tape: &mut Tape<T>, requires_grad: bool) -> EncoderLayerVars {
        EncoderLayerVars {
            norm1: self.norm1.register(tape, requires_grad),
            attn: self.attn.register(tape, requires_grad),
            norm2: self.norm2.register(tape, requires_grad),
            ffn_in: self.ffn_in.register(tape, requires_grad),
            ffn_out: self.ffn_out.register(tape, requires_grad),
        }
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.norm1.visit(&format!("{prefix}.norm1"), f);
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.norm2.visit(&format!("{prefix}.norm2"), f);
        self.ffn_in.visit(&format!("{prefix}.ffn_in"), f);
        self.ffn_out.visit(&format!("{prefix}.ffn_out"), f);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.norm1.visit_mut(&format!("{prefix}.norm1"), f);
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        self.norm2.visit_mut(&format!("{prefix}.norm2"), f);
        self.ffn_in.visit_mut(&format!("{prefix}.ffn_in"), f);
        self.ffn_out.visit_mut(&format!("{prefix}.ffn_out"), f);
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayerVars {
    pub norm1: NormVars,
    pub attn: AttentionVars,
    pub norm2: NormVars,
    pub ffn_in: LinearVars,
    pub ffn_out: LinearVars,
}

#[derive(Clone, Debug)]
pub struct StageWeights<T: Elem> {
    /// `[P²·in, C]` patch projection.
    pub patch_proj: LinearWeights<T>,
    pub patch_norm: NormWeights<T>,
    /// `[g², C]` at the reference grid side g; stage 4 stores `[g² + 1, C]`
    /// with row 0 reserved for the class token.
    pub pos_embed: Tensor<T>,
    pub layers: Vec<EncoderLayerWeights<T>>,
    pub final_norm: NormWeights<T>,
}

impl<T: Elem> StageWeights<T> {
    pub fn register(&self, tape: &mut Tape<T>, requires_grad: bool) -> StageVars {
        StageVars {
            patch_proj: self.patch_proj.register(tape, requires_grad),
            patch_norm: self.patch_norm.register(tape, requires_grad),
            pos_embed: tape.leaf(self.pos_embed.clone(), requires_grad),
            layers: self
                .layers
                .iter()
                .map(|l| l.register(tape, requires_grad))
                .collect(),
            final_norm: self.final_norm.register(tape, requires_grad),
        }
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.patch_proj.visit(&format!("{prefix}.patch_proj"), f);
        self.patch_norm.visit(&format!("{prefix}.patch_norm"), f);
        f(&format!("{prefix}.pos_embed"), &self.pos_embed);
        for (j, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("{prefix}.layers.{j}"), f);
        }
        self.final_norm.visit(&format!("{prefix}.final_norm"), f);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.patch_proj.visit_mut(&format!("{prefix}.patch_proj"), f);
        self.patch_norm.visit_mut(&format!("{prefix}.patch_norm"), f);
        f(&format!("{prefix}.pos_embed"), &mut self.pos_embed);
        for (j, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("{prefix}.layers.{j}"), f);
        }
        self.final_norm.visit_mut(&format!("{prefix}.final_norm"), f);
    }
}

#[derive(Clone, Debug)]
pub struct StageVars {
    pub patch_proj: LinearVars,
    pub patch_norm: NormVars,
    pub pos_embed: Var,
    pub layers: Vec<EncoderLayerVars>,
    pub final_norm: NormVars,
}

#[derive(Clone, Debug)]
pub struct BackboneWeights<T: Elem> {
    pub stages: Vec<StageWeights<T>>,
    /// `[1, C₄]`, prepended to the stage-4 sequence in classification mode.
    pub class_token: Tensor<T>,
    /// `[C₄, num_classes]` head applied to the class token.
    pub classifier: LinearWeights<T>,
}

impl<T: Elem> BackboneWeights<T> {
    pub fn register(&self, tape: &mut Tape<T>, requires_grad: bool) -> BackboneVars {
        BackboneVars {
            stages: self
                .stages
                .iter()
                .map(|s| s.register(tape, requires_grad))
                .collect(),
            class_token: tape.leaf(self.class_token.clone(), requires_grad),
            classifier: self.classifier.register(tape, requires_grad),
        }
    }
}

impl<T: Elem> TensorSet<T> for BackboneWeights<T> {
    fn for_each_tensor(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&format!("stages.{i}"), f);
        }
        f("class_token", &self.class_token);
        self.classifier.visit("classifier", f);
    }

    fn for_each_tensor_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&format!("stages.{i}"), f);
        }
        f("class_token", &mut self.class_token);
        self.classifier.visit_mut("classifier", f);
    }
}

#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub stages: Vec<StageVars>,
    pub class_token: Var,
    pub classifier: LinearVars,
}

impl BackboneVars {
    /// `(name, var)` pairs in the same order and with the same names as the
    /// [`TensorSet`] traversal of [`BackboneWeights`].
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        let lin = |out: &mut Vec<(String, Var)>, prefix: &str, l: &LinearVars| {
            out.push((format!("{prefix}.weight"), l.weight));
            out.push((format!("{prefix}.bias"), l.bias));
        };
        let norm = |out: &mut Vec<(String, Var)>, prefix: &str, n: &NormVars| {
            out.push((format!("{prefix}.gamma"), n.gamma));
            out.push((format!("{prefix}.beta"), n.beta));
        };
        for (i, s) in self.stages.iter().enumerate() {
            let sp = format!("stages.{i}");
            lin(&mut out, &format!("{sp}.patch_proj"), &s.patch_proj);
            norm(&mut out, &format!("{sp}.patch_norm"), &s.patch_norm);
            out.push((format!("{sp}.pos_embed"), s.pos_embed));
            for (j, l) in s.layers.iter().enumerate() {
                let lp = format!("{sp}.layers.{j}");
                norm(&mut out, &format!("{lp}.norm1"), &l.norm1);
                lin(&mut out, &format!("{lp}.attn.query"), &l.attn.query);
                lin(&mut out, &format!("{lp}.attn.key"), &l.attn.key);
                lin(&mut out, &format!("{lp}.attn.value"), &l.attn.value);
                lin(&mut out, &format!("{lp}.attn.output"), &l.attn.output);
                if let Some(sr) = &l.attn.sr {
                    lin(&mut out, &format!("{lp}.attn.sr.proj"), &sr.proj);
                    norm(&mut out, &format!("{lp}.attn.sr.norm"), &sr.norm);
                }
                norm(&mut out, &format!("{lp}.norm2"), &l.norm2);
                lin(&mut out, &format!("{lp}.ffn_in"), &l.ffn_in);
                lin(&mut out, &format!("{lp}.ffn_out"), &l.ffn_out);
            }
            norm(&mut out, &format!("{sp}.final_norm"), &s.final_norm);
        }
        out.push(("class_token".to_string(), self.class_token));
        lin(&mut out, "classifier", &self.classifier);
        out
    }
}

// ── initialization ──────────────────────────────────────────────────────

/// `in × out` linear layer whose weight comes from `fill` and whose bias
/// starts at zero.
fn filled_linear<T: Elem>(
    fill: &mut impl FnMut(&[usize]) -> Tensor<T>,
    in_dim: usize,
    out_dim: usize,
) -> LinearWeights<T> {
    LinearWeights {
        weight: fill(&[in_dim, out_dim]),
        bias: Tensor::zeros(&[out_dim]),
    }
}

/// Builds the weight tree for `cfg`, drawing every projection-like tensor
/// from `fill`; biases are zeros, norm gains ones.
fn build_backbone<T: Elem>(
    cfg: &ModelConfig,
    fill: &mut impl FnMut(&[usize]) -> Tensor<T>,
) -> BackboneWeights<T> {
    let mut stages = Vec::with_capacity(4);
    let mut in_channels = cfg.input_channels;
    for (i, s) in cfg.stages.iter().enumerate() {
        let c = s.channels;
        let patch_dim = s.patch_size * s.patch_size * in_channels;
        let ref_grid = cfg.reference_grid(i);
        let pos_rows = ref_grid * ref_grid + usize::from(i == 3);
        let layers = (0..s.depth)
            .map(|_| EncoderLayerWeights {
                norm1: NormWeights::init(c),
                attn: AttentionWeights {
                    query: filled_linear(fill, c, c),
                    key: filled_linear(fill, c, c),
                    value: filled_linear(fill, c, c),
                    output: filled_linear(fill, c, c),
                    sr: (s.reduction > 1).then(|| SpatialReductionWeights {
                        proj: filled_linear(fill, s.reduction * s.reduction * c, c),
                        norm: NormWeights::init(c),
                        bypass_norm: false,
                    }),
                },
                norm2: NormWeights::init(c),
                ffn_in: filled_linear(fill, c, c * s.ffn_expansion),
                ffn_out: filled_linear(fill, c * s.ffn_expansion, c),
            })
            .collect();
        stages.push(StageWeights {
            patch_proj: filled_linear(fill, patch_dim, c),
            patch_norm: NormWeights::init(c),
            pos_embed: fill(&[pos_rows, c]),
            layers,
            final_norm: NormWeights::init(c),
        });
        in_channels = c;
    }
    let c4 = cfg.stages[3].channels;
    BackboneWeights {
        stages,
        class_token: fill(&[1, c4]),
        classifier: filled_linear(fill, c4, cfg.num_classes),
    }
}

/// Fresh weights for `cfg`, fully determined by `seed`.
pub fn init_weights<T: Elem>(cfg: &ModelConfig, seed: u64) -> Result<BackboneWeights<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(build_backbone(cfg, &mut |shape| {
        trunc_normal(shape, INIT_STD, &mut rng)
    }))
}

/// All-zero weights with the right shapes, used as a loading skeleton.
pub(crate) fn zeroed_weights<T: Elem>(cfg: &ModelConfig) -> Result<BackboneWeights<T>> {
    cfg.validate()?;
    Ok(build_backbone(cfg, &mut |shape| Tensor::zeros(shape)))
}

// ── forward ─────────────────────────────────────────────────────────────

/// Patch embedding: gather P×P tiles of `[h, w, c]`, project, layer-norm.
/// Returns the tokens and the resulting grid size.
pub fn patch_embed<T: Elem>(
    tape: &mut Tape<T>,
    image: Var,
    patch: usize,
    proj: &LinearVars,
    norm: &NormVars,
) -> Result<(Var, (usize, usize))> {
    let shape = tape.value(image).shape().to_vec();
    if shape.len() != 3 {
        return Err(ModelError::Config(format!(
            "patch_embed expects an [h, w, c] grid, got {shape:?}"
        )));
    }
    let (h, w) = (shape[0], shape[1]);
    if h % patch != 0 || w % patch != 0 {
        return Err(ModelError::InputNotDivisible {
            height: h,
            width: w,
            divisor: patch,
        });
    }
    let gathered = gather_blocks(tape, image, patch)?;
    let tokens = linear(tape, gathered, proj)?;
    let eps = T::from_f64(LAYER_NORM_EPS);
    let tokens = tape.layer_norm(tokens, norm.gamma, norm.beta, eps)?;
    Ok((tokens, (h / patch, w / patch)))
}

/// Resamples a stored position embedding from its reference grid to
/// another grid. A leading class row, if present, is carried over
/// untouched.
pub fn interpolate_pos_embed<T: Elem>(
    pe: &Tensor<T>,
    from: (usize, usize),
    to: (usize, usize),
    has_class_row: bool,
) -> Result<Tensor<T>> {
    let rows = from.0 * from.1 + usize::from(has_class_row);
    if pe.rank() != 2 || pe.shape()[0] != rows {
        return Err(ModelError::Config(format!(
            "position embedding shape {:?} does not match grid {from:?} (class row: {has_class_row})",
            pe.shape()
        )));
    }
    let c = pe.shape()[1];
    let spatial = if has_class_row {
        pe.slice(0, 1, rows)?
    } else {
        pe.clone()
    };
    let resized = spatial
        .reshape(&[from.0, from.1, c])?
        .bilinear_resize(to.0, to.1)?
        .reshape(&[to.0 * to.1, c])?;
    if has_class_row {
        let class_row = pe.slice(0, 0, 1)?;
        Ok(Tensor::concat(&[&class_row, &resized], 0)?)
    } else {
        Ok(resized)
    }
}

/// Tape version of [`interpolate_pos_embed`], restricted to the spatial
/// rows (the class row never joins the graph).
fn spatial_pos_embed_on_tape<T: Elem>(
    tape: &mut Tape<T>,
    pe: Var,
    ref_grid: usize,
    grid: (usize, usize),
    has_class_row: bool,
) -> Result<Var> {
    let c = tape.value(pe).shape()[1];
    let rows = ref_grid * ref_grid;
    let spatial = if has_class_row {
        tape.slice(pe, 0, 1, rows + 1)?
    } else {
        pe
    };
    if grid == (ref_grid, ref_grid) {
        return Ok(spatial);
    }
    let g = tape.reshape(spatial, &[ref_grid, ref_grid, c])?;
    let resized = tape.bilinear_resize(g, grid.0, grid.1)?;
    Ok(tape.reshape(resized, &[grid.0 * grid.1, c])?)
}

struct StageOutput {
    grid: Var,
    size: (usize, usize),
    class_token: Option<Var>,
}

fn stage_forward<T: Elem>(
    tape: &mut Tape<T>,
    input: Var,
    stage_index: usize,
    cfg: &ModelConfig,
    vars: &StageVars,
    class_token: Option<Var>,
) -> Result<StageOutput> {
    let scfg = &cfg.stages[stage_index];
    let (tokens, (h, w)) = patch_embed(
        tape,
        input,
        scfg.patch_size,
        &vars.patch_proj,
        &vars.patch_norm,
    )?;
    let is_last = stage_index == 3;
    let pe = spatial_pos_embed_on_tape(
        tape,
        vars.pos_embed,
        cfg.reference_grid(stage_index),
        (h, w),
        is_last,
    )?;
    let mut x = tape.add(tokens, pe)?;
    let with_class = class_token.is_some();
    if let Some(class_token) = class_token {
        x = tape.concat(&[class_token, x], 0)?;
    }
    let acfg = cfg.attention_config(stage_index);
    for layer in &vars.layers {
        x = encoder_layer_forward(tape, x, (h, w), &acfg, layer)?;
    }
    let eps = T::from_f64(LAYER_NORM_EPS);
    x = tape.layer_norm(x, vars.final_norm.gamma, vars.final_norm.beta, eps)?;
    let (class_token, spatial) = if with_class {
        let n = h * w;
        (
            Some(tape.slice(x, 0, 0, 1)?),
            tape.slice(x, 0, 1, n + 1)?,
        )
    } else {
        (None, x)
    };
    let grid = tape.reshape(spatial, &[h, w, scfg.channels])?;
    Ok(StageOutput {
        grid,
        size: (h, w),
        class_token,
    })
}

/// One pre-norm encoder layer: spatial-reduction attention and a GELU FFN,
/// each behind a residual connection.
pub fn encoder_layer_forward<T: Elem>(
    tape: &mut Tape<T>,
    x: Var,
    grid: (usize, usize),
    acfg: &AttentionConfig,
    vars: &EncoderLayerVars,
) -> Result<Var> {
    let eps = T::from_f64(LAYER_NORM_EPS);
    let normed = tape.layer_norm(x, vars.norm1.gamma, vars.norm1.beta, eps)?;
    let attended = sra_forward(tape, normed, grid.0, grid.1, acfg, &vars.attn)?;
    let x = tape.add(x, attended)?;
    let normed = tape.layer_norm(x, vars.norm2.gamma, vars.norm2.beta, eps)?;
    let hidden = linear(tape, normed, &vars.ffn_in)?;
    let hidden = tape.gelu(hidden)?;
    let hidden = linear(tape, hidden, &vars.ffn_out)?;
    Ok(tape.add(x, hidden)?)
}

/// The four stage outputs as `[h, w, C]` grid variables, at strides
/// 4, 8, 16, 32.
pub struct PyramidVars {
    pub levels: [Var; 4],
    pub sizes: [(usize, usize); 4],
}

/// The four stage outputs as plain tensors.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<T: Elem> {
    pub levels: [Tensor<T>; 4],
}

impl<T: Elem> FeaturePyramid<T> {
    pub fn strides(&self, cfg: &ModelConfig) -> [usize; 4] {
        cfg.stage_strides()
    }
}

fn check_input(cfg: &ModelConfig, shape: &[usize]) -> Result<()> {
    let total_stride: usize = cfg.stages.iter().map(|s| s.patch_size).product();
    if shape.len() != 3 || shape[2] != cfg.input_channels {
        return Err(ModelError::Config(format!(
            "expected an [h, w, {}] image, got {shape:?}",
            cfg.input_channels
        )));
    }
    if shape[0] % total_stride != 0 || shape[1] % total_stride != 0 {
        return Err(ModelError::InputNotDivisible {
            height: shape[0],
            width: shape[1],
            divisor: total_stride,
        });
    }
    Ok(())
}

fn run_stages<T: Elem>(
    tape: &mut Tape<T>,
    image: Var,
    cfg: &ModelConfig,
    vars: &BackboneVars,
    classification: bool,
) -> Result<(PyramidVars, Option<Var>)> {
    let shape = tape.value(image).shape().to_vec();
    check_input(cfg, &shape)?;
    let mut input = image;
    let mut levels = Vec::with_capacity(4);
    let mut sizes = Vec::with_capacity(4);
    let mut class_token = None;
    for i in 0..4 {
        let stage_class = (i == 3 && classification).then_some(vars.class_token);
        let out = stage_forward(tape, input, i, cfg, &vars.stages[i], stage_class)?;
        input = out.grid;
        levels.push(out.grid);
        sizes.push(out.size);
        class_token = out.class_token;
    }
    Ok((
        PyramidVars {
            levels: [levels[0], levels[1], levels[2], levels[3]],
            sizes: [sizes[0], sizes[1], sizes[2], sizes[3]],
        },
        class_token,
    ))
}

/// Dense forward: feature pyramid only, no class token anywhere.
pub fn backbone_forward_on_tape<T: Elem>(
    tape: &mut Tape<T>,
    image: Var,
    cfg: &ModelConfig,
    vars: &BackboneVars,
) -> Result<PyramidVars> {
    Ok(run_stages(tape, image, cfg, vars, false)?.0)
}

/// Classification forward: class token through stage 4, then the linear
/// head. Returns `[1, num_classes]` logits.
pub fn classify_forward_on_tape<T: Elem>(
    tape: &mut Tape<T>,
    image: Var,
    cfg: &ModelConfig,
    vars: &BackboneVars,
) -> Result<Var> {
    let (_, class_token) = run_stages(tape, image, cfg, vars, true)?;
    let class_token = class_token.expect("classification run always yields a class token");
    linear(tape, class_token, &vars.classifier)
}

/// Convenience dense forward on plain tensors.
pub fn backbone_forward<T: Elem>(
    image: &Tensor<T>,
    cfg: &ModelConfig,
    weights: &BackboneWeights<T>,
) -> Result<FeaturePyramid<T>> {
    let mut tape = Tape::new();
    let image = tape.constant(image.clone());
    let vars = weights.register(&mut tape, false);
    let pyramid = backbone_forward_on_tape(&mut tape, image, cfg, &vars)?;
    Ok(FeaturePyramid {
        levels: pyramid.levels.map(|v| tape.value(v).clone()),
    })
}

/// Convenience classification forward; returns `[num_classes]` logits.
pub fn classify_forward<T: Elem>(
    image: &Tensor<T>,
    cfg: &ModelConfig,
    weights: &BackboneWeights<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let image = tape.constant(image.clone());
    let vars = weights.register(&mut tape, false);
    let logits = classify_forward_on_tape(&mut tape, image, cfg, &vars)?;
    Ok(tape.value(logits).reshape(&[cfg.num_classes])?)
}

// ── columnar baseline ───────────────────────────────────────────────────

/// Single-resolution transformer built from the same encoder layers: one
/// patch embedding, one position embedding, a constant-width column of
/// layers with no spatial reduction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub variant: String,
    pub input_channels: usize,
    pub num_classes: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    pub reference_resolution: usize,
}

impl VitConfig {
    /// The columnar comparison point: width 768, 8 layers, 8 heads, FFN
    /// expansion 3, at the given patch size.
    pub fn vit_small(patch_size: usize) -> Self {
        VitConfig {
            variant: format!("vit-small-{patch_size}"),
            input_channels: 3,
            num_classes: 1000,
            patch_size,
            channels: 768,
            depth: 8,
            heads: 8,
            ffn_expansion: 3,
            reference_resolution: REFERENCE_RESOLUTION,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.input_channels == 0 || self.num_classes == 0 {
            return Err(ModelError::Config(format!(
                "zero field in columnar config {}",
                self.variant
            )));
        }
        self.attention_config().validate()?;
        if self.reference_resolution % self.patch_size != 0 {
            return Err(ModelError::Config(format!(
                "reference resolution {} not divisible by patch size {}",
                self.reference_resolution, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn attention_config(&self) -> AttentionConfig {
        AttentionConfig {
            channels: self.channels,
            heads: self.heads,
            reduction: 1,
        }
    }

    pub fn reference_grid(&self) -> usize {
        self.reference_resolution / self.patch_size
    }
}

#[derive(Clone, Debug)]
pub struct VitWeights<T: Elem> {
    /// `[P²·in, C]`; columnar patches feed the encoder without a norm.
    pub patch_proj: LinearWeights<T>,
    pub pos_embed: Tensor<T>,
    pub layers: Vec<EncoderLayerWeights<T>>,
    /// Carried for parameter accounting; `vit_columnar_forward` returns
    /// bare tokens and never applies them.
    pub final_norm: NormWeights<T>,
    pub head: LinearWeights<T>,
}

impl<T: Elem> TensorSet<T> for VitWeights<T> {
    fn for_each_tensor(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.patch_proj.visit("patch_proj", f);
        f("pos_embed", &self.pos_embed);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("layers.{i}"), f);
        }
        self.final_norm.visit("final_norm", f);
        self.head.visit("head", f);
    }

    fn for_each_tensor_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.patch_proj.visit_mut("patch_proj", f);
        f("pos_embed", &mut self.pos_embed);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("layers.{i}"), f);
        }
        self.final_norm.visit_mut("final_norm", f);
        self.head.visit_mut("head", f);
    }
}

pub fn init_vit_weights<T: Elem>(cfg: &VitConfig, seed: u64) -> Result<VitWeights<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let acfg = cfg.attention_config();
    let patch_dim = cfg.patch_size * cfg.patch_size * cfg.input_channels;
    let grid = cfg.reference_grid();
    Ok(VitWeights {
        patch_proj: LinearWeights::init(patch_dim, cfg.channels, &mut rng),
        pos_embed: trunc_normal(&[grid * grid, cfg.channels], INIT_STD, &mut rng),
        layers: (0..cfg.depth)
            .map(|_| EncoderLayerWeights::init(&acfg, cfg.ffn_expansion, &mut rng))
            .collect(),
        final_norm: NormWeights::init(cfg.channels),
        head: LinearWeights::init(cfg.channels, cfg.num_classes, &mut rng),
    })
}

/// Columnar forward on an existing tape. Returns the `[n, C]` token
/// variable.
pub fn vit_forward_on_tape<T: Elem>(
    tape: &mut Tape<T>,
    image: Var,
    cfg: &VitConfig,
    weights: &VitWeights<T>,
    requires_grad: bool,
) -> Result<Var> {
    cfg.validate()?;
    let shape = tape.value(image).shape().to_vec();
    if shape.len() != 3 || shape[2] != cfg.input_channels {
        return Err(ModelError::Config(format!(
            "expected an [h, w, {}] image, got {shape:?}",
            cfg.input_channels
        )));
    }
    if shape[0] % cfg.patch_size != 0 || shape[1] % cfg.patch_size != 0 {
        return Err(ModelError::InputNotDivisible {
            height: shape[0],
            width: shape[1],
            divisor: cfg.patch_size,
        });
    }
    let proj = weights.patch_proj.register(tape, requires_grad);
    let gathered = gather_blocks(tape, image, cfg.patch_size)?;
    let tokens = linear(tape, gathered, &proj)?;
    let grid = (shape[0] / cfg.patch_size, shape[1] / cfg.patch_size);
    let ref_grid = cfg.reference_grid();
    let pe = tape.leaf(weights.pos_embed.clone(), requires_grad);
    let pe = spatial_pos_embed_on_tape(tape, pe, ref_grid, grid, false)?;
    let mut x = tape.add(tokens, pe)?;
    let acfg = cfg.attention_config();
    for layer in &weights.layers {
        let vars = layer.register(tape, requires_grad);
        x = encoder_layer_forward(tape, x, grid, &acfg, &vars)?;
    }
    Ok(x)
}

/// Columnar forward: patch embedding, interpolated position embedding,
/// `depth` encoder layers at constant width. Returns `[n, C]` tokens.
pub fn vit_columnar_forward<T: Elem>(
    image: &Tensor<T>,
    cfg: &VitConfig,
    weights: &VitWeights<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let image = tape.constant(image.clone());
    let tokens = vit_forward_on_tape(&mut tape, image, cfg, weights, false)?;
    Ok(tape.value(tokens).clone())
}
