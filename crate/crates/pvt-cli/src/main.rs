//! `pvt` — command-line toolkit for the pyramid vision transformer
//! library: preset inspection, analytic cost accounting, gradient
//! verification, toy training, and feature-pyramid extraction from
//! checkpoints.

use std::fmt;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pvt_core::attention::ModelError;
use pvt_core::backbone::{backbone_forward, ModelConfig, VitConfig};
use pvt_core::checkpoint::{load_checkpoint, peek_precision, save_checkpoint, CheckpointError};
use pvt_core::cost::{cost_report, estimate_activation_memory, flops_curve, ArchConfig, CurveRow};
use pvt_core::data::{make_toy_dataset, ToyMode, TOY_CLASSES};
use pvt_core::gradcheck::{
    attention_sweeps, model_sweeps, primitive_sweeps, NamedReport, MODEL_SWEEP_STRIDE,
};
use pvt_core::tape::TapeError;
use pvt_core::tensor::{Elem, Precision, Tensor};
use pvt_core::train::{train_toy, TrainConfig, TrainError};

const PRESET_NAMES: &[&str] = &[
    "pvt-tiny",
    "pvt-small",
    "pvt-medium",
    "pvt-large",
    "pvt-micro",
    "vit-small-16",
    "vit-small-32",
];

// ── failure → exit code mapping ─────────────────────────────────────────

/// Failure carrying the exit code it maps to: 1 usage, 2 validation or
/// shape error, 3 numerical failure, 4 I/O error.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn validation(message: impl fmt::Display) -> Self {
        Failure {
            code: 2,
            message: message.to_string(),
        }
    }

    fn numerical(message: impl fmt::Display) -> Self {
        Failure {
            code: 3,
            message: message.to_string(),
        }
    }

    fn io(message: impl fmt::Display) -> Self {
        Failure {
            code: 4,
            message: message.to_string(),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Failure::validation(e)
    }
}

impl From<TapeError> for Failure {
    fn from(e: TapeError) -> Self {
        Failure::validation(e)
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(_) => Failure::io(e),
            other => Failure::validation(other),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => Failure::numerical(e),
            other => Failure::validation(other),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::io(e)
    }
}

type CliResult = Result<(), Failure>;

// ── command line ────────────────────────────────────────────────────────

#[derive(Parser)]
#[command(
    name = "pvt",
    version,
    about = "Convolution-free pyramid vision transformer toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a preset's stage settings and cost summary
    Describe(DescribeArgs),
    /// Analytic parameters, FLOPs, and activation memory, as a table or CSV
    Cost(CostArgs),
    /// Verify autodiff gradients against central finite differences
    Gradcheck(GradcheckArgs),
    /// Train PVT-Micro on the built-in synthetic dataset
    TrainToy(TrainToyArgs),
    /// Run a checkpoint on a noise probe and report its feature pyramid
    Features(FeaturesArgs),
}

#[derive(Args)]
struct DescribeArgs {
    /// One of: pvt-tiny, pvt-small, pvt-medium, pvt-large, pvt-micro,
    /// vit-small-16, vit-small-32
    #[arg(long)]
    variant: String,
    /// Classifier width used for head parameter accounting
    #[arg(long, default_value_t = 1000)]
    classes: usize,
}

#[derive(Args)]
struct CostArgs {
    /// Variant name (see `describe`) or "all" for every preset
    #[arg(long)]
    variant: String,
    /// Input height in pixels
    #[arg(long, default_value_t = 224)]
    height: usize,
    /// Input width in pixels
    #[arg(long, default_value_t = 224)]
    width: usize,
    /// Also write the rows to this path as CSV, with exact unrounded values
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Sweep square inputs of these side lengths instead of --height/--width
    #[arg(long, value_delimiter = ',', value_name = "SIDE,SIDE,...")]
    curve: Option<Vec<usize>>,
}

#[derive(Args)]
#[command(after_help = "Runs every primitive-operation check, one \
spatial-reduction attention layer, and full PVT-Micro sweeps for the \
classification and segmentation losses. The full-model sweeps subsample \
each parameter tensor at a fixed stride (element 0 of every tensor is \
always probed); primitives and the attention layer are swept exhaustively.")]
struct GradcheckArgs {
    /// Seed for probe inputs and weight initialization
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Maximum allowed relative error between analytic and numeric gradients
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskMode {
    /// Stripe-vs-blob classification
    Cls,
    /// Bright-region segmentation at stride 4
    Seg,
}

impl From<TaskMode> for ToyMode {
    fn from(mode: TaskMode) -> Self {
        match mode {
            TaskMode::Cls => ToyMode::Classification,
            TaskMode::Seg => ToyMode::Segmentation,
        }
    }
}

#[derive(Args)]
struct TrainToyArgs {
    /// Optimizer steps
    #[arg(long, default_value_t = 300)]
    steps: usize,
    /// AdamW learning rate
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Seed for the dataset, the weights, and the batch order
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = TaskMode::Cls)]
    mode: TaskMode,
    /// Save the final weights here as a checkpoint
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Synthetic samples to generate
    #[arg(long, default_value_t = 32)]
    samples: usize,
}

#[derive(Args)]
struct FeaturesArgs {
    /// Checkpoint to load; element precision is taken from its header
    #[arg(long)]
    checkpoint: PathBuf,
    /// Probe image height in pixels
    #[arg(long, default_value_t = 32)]
    height: usize,
    /// Probe image width in pixels
    #[arg(long, default_value_t = 32)]
    width: usize,
    /// Also write the shapes and statistics to this path as JSON
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for the uniform-noise probe image
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    // Rust keeps SIGPIPE ignored, so `pvt cost ... | head` would panic on
    // the closed pipe with exit 101; restore the default so the process
    // dies quietly like any other line-oriented tool.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version land here too; they print to stdout
            // and exit 0, while genuine usage errors exit 1.
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Describe(args) => cmd_describe(args),
        Command::Cost(args) => cmd_cost(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::TrainToy(args) => cmd_train_toy(args),
        Command::Features(args) => cmd_features(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn parse_arch(name: &str, classes: usize) -> Result<ArchConfig, Failure> {
    if let Some(cfg) = ModelConfig::preset(name, classes) {
        return Ok(ArchConfig::Pvt(cfg));
    }
    match name {
        "vit-small-16" => Ok(ArchConfig::Vit(VitConfig::vit_small(16))),
        "vit-small-32" => Ok(ArchConfig::Vit(VitConfig::vit_small(32))),
        _ => Err(Failure::validation(format!(
            "unknown variant {name:?}; expected one of: {}",
            PRESET_NAMES.join(", ")
        ))),
    }
}

fn group_digits(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

// ── describe ────────────────────────────────────────────────────────────

fn cmd_describe(args: &DescribeArgs) -> CliResult {
    let arch = parse_arch(&args.variant, args.classes)?;
    arch.validate()?;
    match &arch {
        ArchConfig::Pvt(cfg) => {
            println!(
                "{} — four-stage pyramid, {} classes, reference resolution {}",
                cfg.variant, cfg.num_classes, cfg.reference_resolution
            );
            println!();
            println!("stage  patch  stride  channels  depth  reduction  heads  ffn-expansion");
            let strides = cfg.stage_strides();
            for (i, s) in cfg.stages.iter().enumerate() {
                println!(
                    "{:>5}  {:>5}  {:>6}  {:>8}  {:>5}  {:>9}  {:>5}  {:>13}",
                    i + 1,
                    s.patch_size,
                    strides[i],
                    s.channels,
                    s.depth,
                    s.reduction,
                    s.heads,
                    s.ffn_expansion
                );
            }
        }
        ArchConfig::Vit(cfg) => {
            println!(
                "{} — columnar transformer, {} classes, reference resolution {}",
                cfg.variant, cfg.num_classes, cfg.reference_resolution
            );
            println!();
            println!(
                "patch {}  stride {}  channels {}  depth {}  heads {}  ffn-expansion {}",
                cfg.patch_size,
                cfg.patch_size,
                cfg.channels,
                cfg.depth,
                cfg.heads,
                cfg.ffn_expansion
            );
        }
    }
    let side = arch.reference_resolution();
    let report = cost_report(&arch, side, side)?;
    let activation = estimate_activation_memory(&arch, side, side, 1, 4)?;
    println!();
    println!(
        "parameters: {} ({:.1}M)",
        group_digits(report.total.params),
        report.total.params as f64 / 1e6
    );
    println!("GFLOPs at {side}×{side}: {:.3}", report.gflops());
    println!(
        "activation estimate at {side}×{side}, batch 1, 4-byte elements: {:.3} GB",
        activation as f64 / 1e9
    );
    Ok(())
}

// ── cost ────────────────────────────────────────────────────────────────

fn all_presets() -> Vec<ArchConfig> {
    PRESET_NAMES
        .iter()
        .map(|name| parse_arch(name, 1000).expect("preset names resolve"))
        .collect()
}

fn cmd_cost(args: &CostArgs) -> CliResult {
    let archs = if args.variant == "all" {
        all_presets()
    } else {
        vec![parse_arch(&args.variant, 1000)?]
    };
    let scales: Vec<(usize, usize)> = match &args.curve {
        Some(sides) => sides.iter().map(|&s| (s, s)).collect(),
        None => vec![(args.height, args.width)],
    };
    let (rows, skipped) = flops_curve(&archs, &scales);
    for s in &skipped {
        eprintln!(
            "warning: skipping {} at {}×{}: {}",
            s.variant, s.height, s.width, s.reason
        );
    }
    if rows.is_empty() {
        return Err(Failure::validation(
            "no variant was evaluable at the requested sizes",
        ));
    }
    println!(
        "{:<14} {:>6} {:>6} {:>12} {:>10} {:>14}",
        "variant", "height", "width", "params", "gflops", "act-bytes"
    );
    for row in &rows {
        println!(
            "{:<14} {:>6} {:>6} {:>12} {:>10.3} {:>14}",
            row.variant, row.height, row.width, row.params, row.gflops, row.activation_bytes
        );
    }
    if let Some(path) = &args.csv {
        write_csv(path, &rows)?;
        println!();
        println!("csv written to {}", path.display());
    }
    Ok(())
}

/// Display output above rounds GFLOPs to three decimals; the CSV stores
/// every value exactly as computed.
fn write_csv(path: &PathBuf, rows: &[CurveRow]) -> CliResult {
    let mut out = String::from("variant,height,width,params,gflops,act_bytes\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.variant, r.height, r.width, r.params, r.gflops, r.activation_bytes
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

// ── gradcheck ───────────────────────────────────────────────────────────

fn cmd_gradcheck(args: &GradcheckArgs) -> CliResult {
    let mut reports: Vec<NamedReport> = primitive_sweeps(args.seed)?;
    reports.extend(attention_sweeps(args.seed)?);
    reports.extend(model_sweeps(args.seed, MODEL_SWEEP_STRIDE)?);

    println!(
        "{:<28} {:>8} {:>13}  verdict",
        "check", "probes", "max-rel-err"
    );
    let mut failures = 0;
    for NamedReport { name, report } in &reports {
        let ok = report.passes(args.tolerance);
        if !ok {
            failures += 1;
        }
        println!(
            "{:<28} {:>8} {:>13.3e}  {}",
            name,
            report.checked,
            report.max_rel_err,
            if ok { "pass" } else { "FAIL" }
        );
    }
    if failures > 0 {
        return Err(Failure::numerical(format!(
            "{failures} of {} gradient checks exceeded tolerance {:e}",
            reports.len(),
            args.tolerance
        )));
    }
    println!(
        "all {} checks within tolerance {:e}",
        reports.len(),
        args.tolerance
    );
    Ok(())
}

// ── train-toy ───────────────────────────────────────────────────────────

fn cmd_train_toy(args: &TrainToyArgs) -> CliResult {
    let mode = ToyMode::from(args.mode);
    let model = ModelConfig::pvt_micro(TOY_CLASSES);
    let dataset = make_toy_dataset::<f32>(args.seed, args.samples.max(2), mode);
    let cfg = TrainConfig {
        steps: args.steps,
        lr: args.lr,
        batch_size: 8,
        seed: args.seed,
        mode,
    };
    let outcome = train_toy(&model, &cfg, &dataset)?;

    let every = (args.steps / 10).max(1);
    for entry in &outcome.log {
        if entry.step % every == 0 || entry.step + 1 == outcome.log.len() {
            println!(
                "step {:>5}  loss {:.4}  accuracy {:.3}",
                entry.step, entry.loss, entry.accuracy
            );
        }
    }
    if let Some(last) = outcome.log.last() {
        println!(
            "final batch: loss {:.4}, accuracy {:.3}",
            last.loss, last.accuracy
        );
    }
    if let Some(path) = &args.checkpoint {
        save_checkpoint(path, &model, outcome.seg_head.as_ref(), &outcome.weights)?;
        println!("checkpoint written to {}", path.display());
    }
    Ok(())
}

// ── features ────────────────────────────────────────────────────────────

fn cmd_features(args: &FeaturesArgs) -> CliResult {
    match peek_precision(&args.checkpoint)? {
        Precision::F32 => features_run::<f32>(args),
        Precision::F64 => features_run::<f64>(args),
    }
}

fn tensor_stats<T: Elem>(t: &Tensor<T>) -> (f64, f64, f64, f64) {
    let n = t.numel() as f64;
    let mut sum = 0.0;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in t.data() {
        let v = v.to_f64();
        sum += v;
        min = min.min(v);
        max = max.max(v);
    }
    let mean = sum / n;
    let var = t
        .data()
        .iter()
        .map(|&v| (v.to_f64() - mean).powi(2))
        .sum::<f64>()
        / n;
    (mean, var.sqrt(), min, max)
}

fn features_run<T: Elem>(args: &FeaturesArgs) -> CliResult {
    let (model, _, weights) = load_checkpoint::<T>(&args.checkpoint)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let shape = vec![args.height, args.width, model.input_channels];
    let data: Vec<T> = (0..shape.iter().product())
        .map(|_| T::from_f64(rng.random::<f64>()))
        .collect();
    let image = Tensor::new(shape, data).map_err(Failure::validation)?;
    let pyramid = backbone_forward(&image, &model, &weights.backbone)?;
    let strides = pyramid.strides(&model);

    println!(
        "{} on a {}×{} noise probe (seed {}, {})",
        model.variant,
        args.height,
        args.width,
        args.seed,
        T::PRECISION
    );
    println!(
        "{:<5} {:>6}  {:<14} {:>10} {:>10} {:>10} {:>10}",
        "level", "stride", "shape", "mean", "std", "min", "max"
    );
    let mut levels = Vec::new();
    for (i, level) in pyramid.levels.iter().enumerate() {
        let (mean, std, min, max) = tensor_stats(level);
        println!(
            "{:<5} {:>6}  {:<14} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            i + 1,
            strides[i],
            format!("{:?}", level.shape()),
            mean,
            std,
            min,
            max
        );
        levels.push(serde_json::json!({
            "level": i + 1,
            "stride": strides[i],
            "shape": level.shape(),
            "mean": mean,
            "std": std,
            "min": min,
            "max": max,
        }));
    }
    if let Some(path) = &args.out {
        let doc = serde_json::json!({
            "variant": model.variant,
            "height": args.height,
            "width": args.width,
            "seed": args.seed,
            "precision": T::PRECISION.name(),
            "levels": levels,
        });
        fs::write(path, serde_json::to_string_pretty(&doc).expect("stats serialize"))?;
        println!("summary written to {}", path.display());
    }
    Ok(())
}
