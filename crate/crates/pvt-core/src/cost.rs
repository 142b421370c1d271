//! Analytic parameter, compute, and activation-memory accounting.
//!
//! The counters walk the exact op sequence the classification forward
//! executes, so multiply-accumulate totals agree with the tape's own
//! instrumentation to the last digit. Reported FLOPs are `matmul_macs +
//! other_flops`, counting one FLOP per multiply-accumulate and flat
//! per-element rates for the cheap ops:
//!
//! * softmax — 5 per element,
//! * layer norm — 5 per element,
//! * GELU — 8 per element,
//! * bilinear resampling — 8 per output element,
//! * bias, residual, scaling — 1 per element.
//!
//! Activation memory is modeled as the largest single block of tensors
//! that is live at once: a block's input plus every op output the block
//! materializes, including the three attention-matrix copies (raw scores,
//! scaled scores, probabilities). The estimate is `batch · bytes ·
//! max_block_elements` and is therefore exactly linear in batch size.

use std::ops::{Add, AddAssign};

use crate::attention::{ModelError, Result};
use crate::backbone::{ModelConfig, VitConfig};

pub const SOFTMAX_FLOPS_PER_ELEMENT: u64 = 5;
pub const NORM_FLOPS_PER_ELEMENT: u64 = 5;
pub const GELU_FLOPS_PER_ELEMENT: u64 = 8;
pub const BILINEAR_FLOPS_PER_ELEMENT: u64 = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ComponentCost {
    pub params: u64,
    pub matmul_macs: u64,
    pub other_flops: u64,
}

impl ComponentCost {
    pub fn total_flops(&self) -> u64 {
        self.matmul_macs + self.other_flops
    }
}

impl Add for ComponentCost {
    type Output = ComponentCost;
    fn add(self, rhs: ComponentCost) -> ComponentCost {
        ComponentCost {
            params: self.params + rhs.params,
            matmul_macs: self.matmul_macs + rhs.matmul_macs,
            other_flops: self.other_flops + rhs.other_flops,
        }
    }
}

impl AddAssign for ComponentCost {
    fn add_assign(&mut self, rhs: ComponentCost) {
        *self = *self + rhs;
    }
}

/// Per-stage cost split by structural role.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StageCost {
    pub patch_embed: ComponentCost,
    pub pos_embed: ComponentCost,
    pub attention_qkvo: ComponentCost,
    pub attention_core: ComponentCost,
    pub spatial_reduction: ComponentCost,
    pub ffn: ComponentCost,
    pub norms: ComponentCost,
    pub residual: ComponentCost,
}

impl StageCost {
    pub fn total(&self) -> ComponentCost {
        self.patch_embed
            + self.pos_embed
            + self.attention_qkvo
            + self.attention_core
            + self.spatial_reduction
            + self.ffn
            + self.norms
            + self.residual
    }
}

#[derive(Clone, Debug)]
pub struct CostReport {
    pub variant: String,
    pub height: usize,
    pub width: usize,
    pub stages: Vec<StageCost>,
    /// Class token and classifier for the pyramid; final norm, pooling,
    /// and classifier for the columnar model.
    pub head: ComponentCost,
    pub total: ComponentCost,
}

impl CostReport {
    pub fn gflops(&self) -> f64 {
        self.total.total_flops() as f64 / 1e9
    }
}

/// Either architecture the cost model understands.
#[derive(Clone, Debug)]
pub enum ArchConfig {
    Pvt(ModelConfig),
    Vit(VitConfig),
}

impl ArchConfig {
    pub fn variant(&self) -> &str {
        match self {
            ArchConfig::Pvt(cfg) => &cfg.variant,
            ArchConfig::Vit(cfg) => &cfg.variant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ArchConfig::Pvt(cfg) => cfg.validate(),
            ArchConfig::Vit(cfg) => cfg.validate(),
        }
    }

    pub fn reference_resolution(&self) -> usize {
        match self {
            ArchConfig::Pvt(cfg) => cfg.reference_resolution,
            ArchConfig::Vit(cfg) => cfg.reference_resolution,
        }
    }
}

/// `rows × in → out` affine layer: `(in + 1)·out` parameters,
/// `rows·in·out` MACs, one bias add per output element.
fn linear_cost(rows: u64, in_dim: u64, out_dim: u64) -> ComponentCost {
    ComponentCost {
        params: (in_dim + 1) * out_dim,
        matmul_macs: rows * in_dim * out_dim,
        other_flops: rows * out_dim,
    }
}

fn norm_cost(rows: u64, dim: u64) -> ComponentCost {
    ComponentCost {
        params: 2 * dim,
        matmul_macs: 0,
        other_flops: NORM_FLOPS_PER_ELEMENT * rows * dim,
    }
}

/// Flops-only cost (used where the parameters are counted elsewhere or do
/// not exist).
fn flops(other: u64) -> ComponentCost {
    ComponentCost {
        params: 0,
        matmul_macs: 0,
        other_flops: other,
    }
}

/// MACs of one attention core over `tokens` queries at width `channels`
/// with key/value reduction `reduction`: scores plus the probability-value
/// product, `2·n·(n/R²)·C`.
pub fn attention_core_macs(tokens: u64, channels: u64, reduction: u64) -> u64 {
    let kv = tokens / (reduction * reduction);
    2 * tokens * kv * channels
}

fn check_grid(h: usize, w: usize, divisor: usize) -> Result<()> {
    if h % divisor != 0 || w % divisor != 0 {
        return Err(ModelError::InputNotDivisible {
            height: h,
            width: w,
            divisor,
        });
    }
    Ok(())
}

/// One encoder layer, shared between the pyramid and columnar counters.
/// `seq` is the full sequence length (class token included where present),
/// `kv` the reduced key/value length.
fn layer_cost(
    stage: &mut StageCost,
    seq: u64,
    kv: u64,
    channels: u64,
    heads: u64,
    reduction: u64,
    ffn_expansion: u64,
) {
    let c = channels;
    stage.norms += norm_cost(seq, c);
    stage.attention_qkvo += linear_cost(seq, c, c);
    if reduction > 1 {
        stage.spatial_reduction += linear_cost(kv, reduction * reduction * c, c);
        stage.spatial_reduction += norm_cost(kv, c);
    }
    stage.attention_qkvo += linear_cost(kv, c, c);
    stage.attention_qkvo += linear_cost(kv, c, c);
    let score_elements = heads * seq * kv;
    stage.attention_core += ComponentCost {
        params: 0,
        matmul_macs: 2 * seq * kv * c,
        other_flops: (1 + SOFTMAX_FLOPS_PER_ELEMENT) * score_elements,
    };
    stage.attention_qkvo += linear_cost(seq, c, c);
    stage.residual += flops(seq * c);
    stage.norms += norm_cost(seq, c);
    stage.ffn += linear_cost(seq, c, ffn_expansion * c);
    stage.ffn += flops(GELU_FLOPS_PER_ELEMENT * seq * ffn_expansion * c);
    stage.ffn += linear_cost(seq, ffn_expansion * c, c);
    stage.residual += flops(seq * c);
}

fn pvt_cost(cfg: &ModelConfig, height: usize, width: usize) -> Result<CostReport> {
    cfg.validate()?;
    let total_stride: usize = cfg.stages.iter().map(|s| s.patch_size).product();
    check_grid(height, width, total_stride)?;

    let mut stages = Vec::with_capacity(4);
    let (mut grid_h, mut grid_w) = (height, width);
    let mut prev_c = cfg.input_channels as u64;
    for (i, s) in cfg.stages.iter().enumerate() {
        grid_h /= s.patch_size;
        grid_w /= s.patch_size;
        if s.reduction > 1 && (grid_h % s.reduction != 0 || grid_w % s.reduction != 0) {
            return Err(ModelError::ReductionDividesGrid {
                reduction: s.reduction,
                h: grid_h,
                w: grid_w,
            });
        }
        let c = s.channels as u64;
        let n = (grid_h * grid_w) as u64;
        let is_last = i == 3;
        let seq = n + u64::from(is_last);

        let mut stage = StageCost::default();
        stage.patch_embed += linear_cost(n, (s.patch_size * s.patch_size) as u64 * prev_c, c);
        stage.norms += norm_cost(n, c);

        let ref_grid = cfg.reference_grid(i);
        let pos_rows = (ref_grid * ref_grid + usize::from(is_last)) as u64;
        let interp = if (grid_h, grid_w) == (ref_grid, ref_grid) {
            0
        } else {
            BILINEAR_FLOPS_PER_ELEMENT * n * c
        };
        stage.pos_embed += ComponentCost {
            params: pos_rows * c,
            matmul_macs: 0,
            other_flops: interp + n * c,
        };

        let kv = if s.reduction > 1 {
            n / (s.reduction * s.reduction) as u64
        } else {
            seq
        };
        for _ in 0..s.depth {
            layer_cost(
                &mut stage,
                seq,
                kv,
                c,
                s.heads as u64,
                s.reduction as u64,
                s.ffn_expansion as u64,
            );
        }
        stage.norms += norm_cost(seq, c);
        stages.push(stage);
        prev_c = c;
    }

    let c4 = cfg.stages[3].channels as u64;
    let head = ComponentCost {
        params: c4,
        matmul_macs: 0,
        other_flops: 0,
    } + linear_cost(1, c4, cfg.num_classes as u64);

    let total = stages.iter().map(StageCost::total).fold(head, Add::add);
    Ok(CostReport {
        variant: cfg.variant.clone(),
        height,
        width,
        stages,
        head,
        total,
    })
}

fn vit_cost(cfg: &VitConfig, height: usize, width: usize) -> Result<CostReport> {
    cfg.validate()?;
    check_grid(height, width, cfg.patch_size)?;
    let c = cfg.channels as u64;
    let grid_h = height / cfg.patch_size;
    let grid_w = width / cfg.patch_size;
    let n = (grid_h * grid_w) as u64;
    let ref_grid = cfg.reference_grid();

    let mut stage = StageCost::default();
    stage.patch_embed += linear_cost(
        n,
        (cfg.patch_size * cfg.patch_size * cfg.input_channels) as u64,
        c,
    );
    let interp = if (grid_h, grid_w) == (ref_grid, ref_grid) {
        0
    } else {
        BILINEAR_FLOPS_PER_ELEMENT * n * c
    };
    stage.pos_embed += ComponentCost {
        params: (ref_grid * ref_grid) as u64 * c,
        matmul_macs: 0,
        other_flops: interp + n * c,
    };
    for _ in 0..cfg.depth {
        layer_cost(
            &mut stage,
            n,
            n,
            c,
            cfg.heads as u64,
            1,
            cfg.ffn_expansion as u64,
        );
    }

    // Classification path the columnar model would run on top of the bare
    // tokens: final norm, mean pooling, linear head.
    let head = norm_cost(n, c) + flops(n * c) + linear_cost(1, c, cfg.num_classes as u64);

    let total = stage.total() + head;
    Ok(CostReport {
        variant: cfg.variant.clone(),
        height,
        width,
        stages: vec![stage],
        head,
        total,
    })
}

/// Full cost breakdown of the classification pipeline at the given input
/// size.
pub fn cost_report(arch: &ArchConfig, height: usize, width: usize) -> Result<CostReport> {
    match arch {
        ArchConfig::Pvt(cfg) => pvt_cost(cfg, height, width),
        ArchConfig::Vit(cfg) => vit_cost(cfg, height, width),
    }
}

/// Parameter count; input size does not matter beyond the stored tables,
/// so this reports at the reference resolution.
pub fn count_params(arch: &ArchConfig) -> Result<u64> {
    let r = arch.reference_resolution();
    Ok(cost_report(arch, r, r)?.total.params)
}

/// Total forward FLOPs (MACs plus elementwise work) at the given input
/// size.
pub fn count_flops(arch: &ArchConfig, height: usize, width: usize) -> Result<u64> {
    Ok(cost_report(arch, height, width)?.total.total_flops())
}

// ── activation memory ───────────────────────────────────────────────────

/// Tensors live in one attention block: input, both norms of the path,
/// projections with their bias copies, split-head copies, the three
/// attention-matrix materializations, context, merge, output, residual.
fn attention_block_elements(
    seq: u64,
    kv: u64,
    channels: u64,
    heads: u64,
    gathered: Option<u64>,
) -> u64 {
    let sc = seq * channels;
    let mc = kv * channels;
    let scores = heads * seq * kv;
    let mut elements = sc; // block input
    elements += sc; // norm output
    elements += 2 * sc; // query projection + bias
    if let Some(gathered) = gathered {
        elements += gathered + 3 * mc; // gather copy, projection + bias, norm
    }
    elements += 4 * mc; // key and value projections with their biases
    elements += sc + 2 * mc; // split-head copies
    elements += 3 * scores; // raw scores, scaled scores, probabilities
    elements += sc; // per-head context
    elements += sc; // merged heads
    elements += 2 * sc; // output projection + bias
    elements += sc; // residual sum
    elements
}

fn ffn_block_elements(seq: u64, channels: u64, ffn_expansion: u64) -> u64 {
    let sc = seq * channels;
    let hidden = seq * ffn_expansion * channels;
    // input, norm, hidden projection + bias, GELU, output projection +
    // bias, residual
    5 * sc + 3 * hidden
}

fn patch_block_elements(
    in_elements: u64,
    n: u64,
    channels: u64,
    interpolated: bool,
    with_norm: bool,
    class_token: bool,
) -> u64 {
    let nc = n * channels;
    let mut elements = 2 * in_elements; // input grid and its gathered copy
    elements += 2 * nc; // projection + bias
    if with_norm {
        elements += nc;
    }
    if interpolated {
        elements += nc; // resampled position table
    }
    elements += nc; // position add
    if class_token {
        elements += nc + channels; // concatenated sequence
    }
    elements
}

fn pvt_peak_block_elements(cfg: &ModelConfig, height: usize, width: usize) -> Result<u64> {
    cfg.validate()?;
    let total_stride: usize = cfg.stages.iter().map(|s| s.patch_size).product();
    check_grid(height, width, total_stride)?;
    let mut peak = 0u64;
    let (mut grid_h, mut grid_w) = (height, width);
    let mut prev_c = cfg.input_channels as u64;
    for (i, s) in cfg.stages.iter().enumerate() {
        let in_elements = (grid_h * grid_w) as u64 * prev_c;
        grid_h /= s.patch_size;
        grid_w /= s.patch_size;
        let c = s.channels as u64;
        let n = (grid_h * grid_w) as u64;
        let is_last = i == 3;
        let seq = n + u64::from(is_last);
        let interpolated = (grid_h, grid_w) != (cfg.reference_grid(i), cfg.reference_grid(i));
        peak = peak.max(patch_block_elements(
            in_elements,
            n,
            c,
            interpolated,
            true,
            is_last,
        ));
        let (kv, gathered) = if s.reduction > 1 {
            (n / (s.reduction * s.reduction) as u64, Some(n * c))
        } else {
            (seq, None)
        };
        peak = peak.max(attention_block_elements(
            seq,
            kv,
            c,
            s.heads as u64,
            gathered,
        ));
        peak = peak.max(ffn_block_elements(seq, c, s.ffn_expansion as u64));
        peak = peak.max(2 * seq * c); // final norm
        prev_c = c;
    }
    Ok(peak)
}

fn vit_peak_block_elements(cfg: &VitConfig, height: usize, width: usize) -> Result<u64> {
    cfg.validate()?;
    check_grid(height, width, cfg.patch_size)?;
    let c = cfg.channels as u64;
    let grid_h = height / cfg.patch_size;
    let grid_w = width / cfg.patch_size;
    let n = (grid_h * grid_w) as u64;
    let in_elements = (height * width * cfg.input_channels) as u64;
    let interpolated = (grid_h, grid_w) != (cfg.reference_grid(), cfg.reference_grid());
    let mut peak = patch_block_elements(in_elements, n, c, interpolated, false, false);
    if cfg.depth > 0 {
        peak = peak.max(attention_block_elements(n, n, c, cfg.heads as u64, None));
        peak = peak.max(ffn_block_elements(n, c, cfg.ffn_expansion as u64));
    }
    peak = peak.max(2 * n * c); // final norm
    Ok(peak)
}

/// Peak activation footprint in bytes for one forward pass: the largest
/// live block times batch size and element width. Exactly linear in
/// `batch`.
pub fn estimate_activation_memory(
    arch: &ArchConfig,
    height: usize,
    width: usize,
    batch: u64,
    bytes_per_element: u64,
) -> Result<u64> {
    let elements = match arch {
        ArchConfig::Pvt(cfg) => pvt_peak_block_elements(cfg, height, width)?,
        ArchConfig::Vit(cfg) => vit_peak_block_elements(cfg, height, width)?,
    };
    Ok(elements * batch * bytes_per_element)
}

// ── derived configurations and sweeps ───────────────────────────────────

/// Scales every stage width by `factor`, rounding to the nearest integer
/// and then up to the nearest multiple of the stage's head count so the
/// attention split stays valid. Depths, reductions, and expansions are
/// untouched.
pub fn widen_config(cfg: &ModelConfig, factor: f64) -> ModelConfig {
    let mut out = cfg.clone();
    out.variant = format!("{}-w{factor:.2}", cfg.variant);
    for s in &mut out.stages {
        let scaled = (s.channels as f64 * factor).round().max(1.0) as usize;
        s.channels = scaled.div_ceil(s.heads) * s.heads;
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub variant: String,
    pub height: usize,
    pub width: usize,
    pub params: u64,
    pub gflops: f64,
    /// Batch-1, 4-byte-element activation estimate.
    pub activation_bytes: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkippedScale {
    pub variant: String,
    pub height: usize,
    pub width: usize,
    pub reason: String,
}

/// Evaluates every architecture at every scale, splitting the outcomes
/// into rows and skipped (indivisible) combinations.
pub fn flops_curve(
    archs: &[ArchConfig],
    scales: &[(usize, usize)],
) -> (Vec<CurveRow>, Vec<SkippedScale>) {
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for arch in archs {
        for &(height, width) in scales {
            match cost_report(arch, height, width) {
                Ok(report) => rows.push(CurveRow {
                    variant: report.variant.clone(),
                    height,
                    width,
                    params: report.total.params,
                    gflops: report.gflops(),
                    activation_bytes: estimate_activation_memory(arch, height, width, 1, 4)
                        .expect("cost_report already validated this scale"),
                }),
                Err(err) => skipped.push(SkippedScale {
                    variant: arch.variant().to_string(),
                    height,
                    width,
                    reason: err.to_string(),
                }),
            }
        }
    }
    (rows, skipped)
}
