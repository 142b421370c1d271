//! End-to-end tests of the `pvt` binary: output contents, file artifacts,
//! and the exit-code contract (0 success, 1 usage, 2 validation,
//! 3 numerical, 4 I/O).

use std::path::Path;
use std::process::{Command, Output};

use pvt_core::checkpoint::load_checkpoint;
use pvt_core::cost::{cost_report, ArchConfig};
use pvt_core::backbone::ModelConfig;

fn pvt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pvt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn describe_prints_the_stage_table() {
    let out = pvt(&["describe", "--variant", "pvt-small"]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    for needle in ["64", "128", "320", "512", "24,486,888", "GFLOPs"] {
        assert!(text.contains(needle), "missing {needle:?} in:\n{text}");
    }
}

#[test]
fn describe_covers_the_columnar_baseline() {
    let out = pvt(&["describe", "--variant", "vit-small-16"]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("columnar"), "got:\n{text}");
    assert!(text.contains("48,771,304"), "got:\n{text}");
}

#[test]
fn cost_csv_stores_library_values_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("cost.csv");
    let out = pvt(&[
        "cost",
        "--variant",
        "pvt-tiny",
        "--csv",
        csv_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));

    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("variant,height,width,params,gflops,act_bytes")
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let report = cost_report(
        &ArchConfig::Pvt(ModelConfig::pvt_tiny(1000)),
        224,
        224,
    )
    .unwrap();
    assert_eq!(row[0], "pvt-tiny");
    assert_eq!(row[3].parse::<u64>().unwrap(), report.total.params);
    assert_eq!(row[4].parse::<f64>().unwrap(), report.gflops());
}

#[test]
fn curve_warns_about_and_skips_indivisible_scales() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("curve.csv");
    let out = pvt(&[
        "cost",
        "--variant",
        "pvt-small",
        "--curve",
        "224,225",
        "--csv",
        csv_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("skipping pvt-small at 225×225"));
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert_eq!(csv.lines().count(), 2, "header plus the one valid scale");
}

#[test]
fn gradcheck_passes_on_the_unmodified_code() {
    let out = pvt(&["gradcheck", "--seed", "0", "--tolerance", "1e-4"]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("pvt-micro-classification"), "got:\n{text}");
    assert!(!text.contains("FAIL"), "got:\n{text}");
}

fn train_checkpoint(dir: &Path, extra: &[&str]) -> std::path::PathBuf {
    let path = dir.join("weights.pvtc");
    let mut args = vec![
        "train-toy",
        "--steps",
        "3",
        "--seed",
        "1",
        "--checkpoint",
        path.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    let out = pvt(&args);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    path
}

#[test]
fn train_toy_writes_a_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let path = train_checkpoint(dir.path(), &[]);
    let (model, seg, _weights) = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(model.variant, "pvt-micro");
    assert!(seg.is_none());

    let seg_path = dir.path().join("seg.pvtc");
    let out = pvt(&[
        "train-toy",
        "--steps",
        "3",
        "--mode",
        "seg",
        "--checkpoint",
        seg_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let (_, seg, _) = load_checkpoint::<f32>(&seg_path).unwrap();
    assert!(seg.is_some(), "segmentation training stores its head");
}

#[test]
fn features_reports_the_pyramid_and_writes_json() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_checkpoint(dir.path(), &[]);
    let json_path = dir.path().join("pyramid.json");
    let out = pvt(&[
        "features",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--height",
        "32",
        "--width",
        "64",
        "--out",
        json_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));

    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
    let levels = doc["levels"].as_array().unwrap();
    assert_eq!(levels.len(), 4);
    assert_eq!(levels[0]["shape"], serde_json::json!([8, 16, 8]));
    assert_eq!(levels[3]["shape"], serde_json::json!([1, 2, 64]));
    assert_eq!(levels[3]["stride"], 32);
    assert!(levels[0]["std"].as_f64().unwrap() > 0.0);
}

#[test]
fn exit_codes_distinguish_the_failure_classes() {
    let usage = pvt(&["no-such-subcommand"]);
    assert_eq!(usage.status.code(), Some(1), "usage errors exit 1");

    let validation = pvt(&["cost", "--variant", "pvt-small", "--height", "225"]);
    assert_eq!(
        validation.status.code(),
        Some(2),
        "indivisible size is a validation error: {}",
        stderr(&validation)
    );

    let unknown = pvt(&["describe", "--variant", "pvt-giant"]);
    assert_eq!(unknown.status.code(), Some(2), "unknown variant exits 2");

    let numerical = pvt(&["train-toy", "--steps", "20", "--lr", "1e8"]);
    assert_eq!(
        numerical.status.code(),
        Some(3),
        "divergence is a numerical error: {}",
        stderr(&numerical)
    );
    assert!(stderr(&numerical).contains("non-finite"));

    let io = pvt(&["features", "--checkpoint", "/definitely/not/there.pvtc"]);
    assert_eq!(io.status.code(), Some(4), "missing file is an I/O error");

    let help = pvt(&["--help"]);
    assert_eq!(help.status.code(), Some(0), "help exits 0");
}
