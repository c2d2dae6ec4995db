//! End-to-end checks of the `helena` binary: exit codes, artifact layout,
//! and byte-level reproducibility of each subcommand.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use helena::model::{build, load_weights, ModelConfig};
use helena::stream_rng;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_helena"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary should run")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// A grid and model small enough that generate + train + eval complete in
/// seconds. 22 samples is two per SNR step.
const SMALL_CONFIG: &str = "\
# integration-test configuration
n_s = 24
n_d = 14
kernel1 = 4,2
kernel2 = 3,3
c1 = 2
c = 2
p = 6
d = 8
h = 2
r = 2
dropout_rate = 0.0
samples = 22
batch_size = 4
max_epochs = 3
lr_patience_epochs = 2
early_stop_patience = 10
";

fn small_model_config(use_se: bool) -> ModelConfig {
    ModelConfig {
        n_s: 24,
        n_d: 14,
        kernel1: (4, 2),
        kernel2: (3, 3),
        c1: 2,
        c: 2,
        p: 6,
        d: 8,
        h: 2,
        r: 2,
        dropout_rate: 0.0,
        use_se,
    }
}

struct Workspace {
    _dir: tempfile::TempDir,
    config: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("run.cfg");
        std::fs::write(&config, SMALL_CONFIG).unwrap();
        Self { _dir: dir, config }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.config.parent().unwrap().join(name)
    }

    fn arg(&self, path: &Path) -> String {
        path.display().to_string()
    }

    fn generate(&self, out: &str) -> PathBuf {
        let dataset = self.path(out);
        let out = run(&[
            "generate",
            "--config",
            &self.arg(&self.config),
            "--out",
            &self.arg(&dataset),
        ]);
        assert_ok(&out);
        dataset
    }

    fn train(&self, dataset: &Path, out: &str, extra: &[&str]) -> PathBuf {
        let weights = self.path(out);
        let mut args = vec![
            "train".to_string(),
            "--config".into(),
            self.arg(&self.config),
            "--dataset".into(),
            self.arg(dataset),
            "--out".into(),
            self.arg(&weights),
        ];
        args.extend(extra.iter().map(|s| s.to_string()));
        let out = run(&args.iter().map(String::as_str).collect::<Vec<_>>());
        assert_ok(&out);
        weights
    }
}

#[test]
fn no_subcommand_is_a_usage_error() {
    let out = run(&[]);
    assert_code(&out, 2);
    assert!(!out.stderr.is_empty());
}

#[test]
fn help_exits_cleanly() {
    let out = run(&["--help"]);
    assert_code(&out, 0);
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["generate", "train", "eval", "bench"] {
        assert!(text.contains(sub), "help should list {sub}");
    }
}

#[test]
fn generate_rejects_zero_samples_naming_the_field() {
    let ws = Workspace::new();
    let out = run(&[
        "generate",
        "--config",
        &ws.arg(&ws.config),
        "--samples",
        "0",
        "--out",
        &ws.arg(&ws.path("ds.bin")),
    ]);
    assert_code(&out, 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("samples"),
        "stderr should name the field: {err}"
    );
    assert!(!ws.path("ds.bin").exists(), "no partial dataset");
}

#[test]
fn generate_requires_an_output_path() {
    let ws = Workspace::new();
    let out = run(&["generate", "--config", &ws.arg(&ws.config)]);
    assert_code(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("out"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let ws = Workspace::new();
    let bad = ws.path("bad.cfg");
    std::fs::write(&bad, "volume=11\n").unwrap();
    let out = run(&[
        "generate",
        "--config",
        &ws.arg(&bad),
        "--out",
        &ws.arg(&ws.path("ds.bin")),
    ]);
    assert_code(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("volume"));
}

#[test]
fn missing_config_file_is_an_io_error() {
    let ws = Workspace::new();
    let out = run(&[
        "generate",
        "--config",
        &ws.arg(&ws.path("absent.cfg")),
        "--out",
        &ws.arg(&ws.path("ds.bin")),
    ]);
    assert_code(&out, 3);
}

#[test]
fn missing_dataset_file_is_an_io_error() {
    let ws = Workspace::new();
    let out = run(&[
        "train",
        "--config",
        &ws.arg(&ws.config),
        "--dataset",
        &ws.arg(&ws.path("absent.bin")),
        "--out",
        &ws.arg(&ws.path("w.bin")),
    ]);
    assert_code(&out, 3);
}

#[test]
fn generate_reruns_are_byte_identical() {
    let ws = Workspace::new();
    let a = ws.generate("a.bin");
    let b = ws.generate("b.bin");
    let bytes_a = std::fs::read(&a).unwrap();
    let bytes_b = std::fs::read(&b).unwrap();
    assert!(!bytes_a.is_empty());
    assert_eq!(bytes_a, bytes_b, "same seed, same bytes");

    // Regenerating to the same path reproduces the manifest too.
    let a2 = ws.generate("a.bin");
    let manifest = std::fs::read(ws.path("a.bin.manifest")).unwrap();
    assert_eq!(std::fs::read(&a2).unwrap(), bytes_a);
    let text = String::from_utf8(manifest).unwrap();
    assert!(text.starts_with("command=generate\n"));
    assert!(text.contains("\nseed=0\n"));
    assert!(text.contains("\nsamples=22\n"));
}

#[test]
fn seed_changes_the_generated_dataset() {
    let ws = Workspace::new();
    let a = ws.generate("a.bin");
    let out = run(&[
        "generate",
        "--config",
        &ws.arg(&ws.config),
        "--seed",
        "1",
        "--out",
        &ws.arg(&ws.path("c.bin")),
    ]);
    assert_ok(&out);
    assert_ne!(
        std::fs::read(&a).unwrap(),
        std::fs::read(ws.path("c.bin")).unwrap()
    );
}

#[test]
fn train_writes_checkpoint_meta_history_and_manifest() {
    let ws = Workspace::new();
    let dataset = ws.generate("ds.bin");
    let weights = ws.train(&dataset, "w.bin", &[]);

    let expected = build::<f32, _>(&small_model_config(true), &mut stream_rng(0, 201))
        .unwrap()
        .count_params();
    let loaded = load_weights::<f32>(&weights, &small_model_config(true)).unwrap();
    assert_eq!(loaded.count_params(), expected);

    let meta = std::fs::read_to_string(ws.path("w.bin.meta")).unwrap();
    assert!(meta.starts_with("epoch="), "meta: {meta}");
    assert!(meta.contains("\nval_loss="));
    assert!(meta.contains("\nlr="));

    let history = std::fs::read_to_string(ws.path("w.history.csv")).unwrap();
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,val_loss,lr");
    assert_eq!(lines.len(), 1 + 3, "one row per epoch under max_epochs=3");
    assert!(history.ends_with('\n'));
    assert!(!history.contains('\r'), "LF line endings only");

    let manifest = std::fs::read_to_string(ws.path("w.bin.manifest")).unwrap();
    assert!(manifest.starts_with("command=train\n"));
}

#[test]
fn train_reruns_reproduce_weights_and_history() {
    let ws = Workspace::new();
    let dataset = ws.generate("ds.bin");
    let a = ws.train(&dataset, "a.bin", &[]);
    let b = ws.train(&dataset, "b.bin", &[]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(
        std::fs::read(ws.path("a.history.csv")).unwrap(),
        std::fs::read(ws.path("b.history.csv")).unwrap()
    );
    assert_eq!(
        std::fs::read(ws.path("a.bin.meta")).unwrap(),
        std::fs::read(ws.path("b.bin.meta")).unwrap()
    );
}

#[test]
fn max_epochs_flag_overrides_the_config_file() {
    let ws = Workspace::new();
    let dataset = ws.generate("ds.bin");
    ws.train(&dataset, "w.bin", &["--max-epochs", "1"]);
    let history = std::fs::read_to_string(ws.path("w.history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 1);
}

#[test]
fn no_se_flag_trains_the_smaller_variant() {
    let ws = Workspace::new();
    let dataset = ws.generate("ds.bin");
    let full = ws.train(&dataset, "full.bin", &[]);
    let lean = ws.train(&dataset, "lean.bin", &["--no-se"]);

    // The gate-less checkpoint only loads under the gate-less layout, and
    // drops exactly the gate parameters.
    let with_se = load_weights::<f32>(&full, &small_model_config(true)).unwrap();
    let without = load_weights::<f32>(&lean, &small_model_config(false)).unwrap();
    assert!(load_weights::<f32>(&lean, &small_model_config(true)).is_err());
    assert!(without.count_params() < with_se.count_params());
}

#[test]
fn eval_writes_csv_and_json_for_both_methods() {
    let ws = Workspace::new();
    let dataset = ws.generate("ds.bin");
    let weights = ws.train(&dataset, "w.bin", &[]);
    let report = ws.path("report.csv");
    let out = run(&[
        "eval",
        "--config",
        &ws.arg(&ws.config),
        "--dataset",
        &ws.arg(&dataset),
        "--checkpoint",
        &ws.arg(&weights),
        "--out",
        &ws.arg(&report),
    ]);
    assert_ok(&out);

    let csv = std::fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "method,snr_db,nmse_linear,nmse_db,samples");
    assert!(lines.iter().any(|l| l.starts_with("helena,")));
    assert!(lines.iter().any(|l| l.starts_with("ls_li,")));
    assert!(!csv.contains('\r'));

    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ws.path("report.json")).unwrap()).unwrap();
    assert_eq!(json["methods"].as_array().unwrap().len(), 2);
    let expected = build::<f32, _>(&small_model_config(true), &mut stream_rng(0, 201))
        .unwrap()
        .count_params();
    assert_eq!(json["param_count"].as_u64().unwrap() as usize, expected);
    assert!(json["flop_count"].as_u64().unwrap() > 0);
    assert!(json["latency"].is_null());

    assert!(std::fs::read_to_string(ws.path("report.csv.manifest"))
        .unwrap()
        .starts_with("command=eval\n"));
}

#[test]
fn eval_reruns_are_byte_identical() {
    let ws = Workspace::new();
    let dataset = ws.generate("ds.bin");
    let weights = ws.train(&dataset, "w.bin", &[]);
    let mut reports = Vec::new();
    for name in ["r1.csv", "r2.csv"] {
        let report = ws.path(name);
        let out = run(&[
            "eval",
            "--config",
            &ws.arg(&ws.config),
            "--dataset",
            &ws.arg(&dataset),
            "--checkpoint",
            &ws.arg(&weights),
            "--out",
            &ws.arg(&report),
        ]);
        assert_ok(&out);
        reports.push((
            std::fs::read(&report).unwrap(),
            std::fs::read(report.with_extension("json")).unwrap(),
        ));
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn eval_method_ls_needs_no_checkpoint() {
    let ws = Workspace::new();
    let dataset = ws.generate("ds.bin");
    let report = ws.path("ls.csv");
    let out = run(&[
        "eval",
        "--config",
        &ws.arg(&ws.config),
        "--dataset",
        &ws.arg(&dataset),
        "--method",
        "ls",
        "--out",
        &ws.arg(&report),
    ]);
    assert_ok(&out);
    let csv = std::fs::read_to_string(&report).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.starts_with("ls_li,")));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ws.path("ls.json")).unwrap()).unwrap();
    assert!(json["param_count"].is_null());
}

#[test]
fn eval_rejects_a_bad_method_name() {
    let ws = Workspace::new();
    let out = run(&[
        "eval",
        "--config",
        &ws.arg(&ws.config),
        "--method",
        "magic",
        "--out",
        &ws.arg(&ws.path("r.csv")),
    ]);
    assert_code(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("method"));
}

#[test]
fn corrupted_checkpoint_exits_5_and_writes_nothing() {
    let ws = Workspace::new();
    let dataset = ws.generate("ds.bin");
    let bad = ws.path("bad.bin");
    std::fs::write(&bad, b"HELW1 this is not a checkpoint").unwrap();
    let report = ws.path("report.csv");
    let out = run(&[
        "eval",
        "--config",
        &ws.arg(&ws.config),
        "--dataset",
        &ws.arg(&dataset),
        "--checkpoint",
        &ws.arg(&bad),
        "--out",
        &ws.arg(&report),
    ]);
    assert_code(&out, 5);
    assert!(!report.exists(), "no partial CSV on failure");
    assert!(!report.with_extension("json").exists());
    assert!(!ws.path("report.csv.manifest").exists());
}

#[test]
fn mismatched_grid_between_dataset_and_model_exits_5() {
    let ws = Workspace::new();
    let dataset = ws.generate("ds.bin");
    let other = ws.path("wide.cfg");
    std::fs::write(&other, SMALL_CONFIG.replace("n_s = 24", "n_s = 36")).unwrap();
    let out = run(&[
        "train",
        "--config",
        &ws.arg(&other),
        "--dataset",
        &ws.arg(&dataset),
        "--out",
        &ws.arg(&ws.path("w.bin")),
    ]);
    assert_code(&out, 5);
    assert!(!ws.path("w.bin").exists());
}

#[test]
fn bench_single_run_collapses_the_stats() {
    let ws = Workspace::new();
    let report = ws.path("bench.json");
    let out = run(&[
        "bench",
        "--config",
        &ws.arg(&ws.config),
        "--fresh",
        "--runs",
        "1",
        "--out",
        &ws.arg(&report),
    ]);
    assert_ok(&out);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let latency = &json["latency"];
    assert_eq!(latency["runs"].as_u64(), Some(1));
    assert_eq!(latency["mean_ms"], latency["min_ms"]);
    assert_eq!(latency["mean_ms"], latency["max_ms"]);

    // The printed parameter count matches the report and the actual build.
    let stdout = String::from_utf8_lossy(&out.stdout);
    let expected = build::<f32, _>(&small_model_config(true), &mut stream_rng(0, 201))
        .unwrap()
        .count_params();
    assert!(
        stdout.contains(&format!("param_count: {expected}")),
        "stdout: {stdout}"
    );
    assert_eq!(json["param_count"].as_u64().unwrap() as usize, expected);
}

#[test]
fn bench_without_weights_source_exits_2() {
    let ws = Workspace::new();
    let out = run(&[
        "bench",
        "--config",
        &ws.arg(&ws.config),
        "--out",
        &ws.arg(&ws.path("bench.json")),
    ]);
    assert_code(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}

#[test]
fn bench_accepts_a_trained_checkpoint() {
    let ws = Workspace::new();
    let dataset = ws.generate("ds.bin");
    let weights = ws.train(&dataset, "w.bin", &[]);
    let report = ws.path("bench.json");
    let out = run(&[
        "bench",
        "--config",
        &ws.arg(&ws.config),
        "--checkpoint",
        &ws.arg(&weights),
        "--runs",
        "3",
        "--out",
        &ws.arg(&report),
    ]);
    assert_ok(&out);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["latency"]["runs"].as_u64(), Some(3));
}

#[test]
fn commands_leave_no_temp_files() {
    let ws = Workspace::new();
    let dataset = ws.generate("ds.bin");
    ws.train(&dataset, "w.bin", &[]);
    let leftovers: Vec<_> = std::fs::read_dir(ws.config.parent().unwrap())
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".tmp"))
        .collect();
    assert!(
        leftovers.is_empty(),
        "temp files left behind: {leftovers:?}"
    );
}
