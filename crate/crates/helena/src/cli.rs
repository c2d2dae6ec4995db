//! Command-line front end: `generate`, `train`, `eval`, and `bench`
//! subcommands over one validated run configuration.
//!
//! Every command resolves its configuration up front, writes output files
//! through a temp-and-rename step so failures leave no partial artifacts,
//! and drops a `<out>.manifest` file with the resolved configuration next
//! to whatever it wrote.
//!
//! Exit codes: 0 success, 2 configuration, 3 I/O, 4 training divergence,
//! 5 artifact mismatch (corrupt or incompatible files).

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::chansim::{
    dataset_header, generate_sample, read_dataset, sample_spec_for, write_sample, ChanError,
    Dataset, SNR_STEPS_DB,
};
use crate::config::{ConfigError, EvalMethod, Overrides, RunConfig};
use crate::eval::{
    benchmark_inference, evaluate, ls_li_estimator, model_estimator, EvalError, EvalReport,
    MethodCurve,
};
use crate::model::{build, count_flops, load_weights, weight_bytes, ModelError, ModelWeights};
use crate::stream_rng;
use crate::train::{
    checkpoint_meta_path, fit, history_csv, render_checkpoint_meta, split_dataset, CheckpointMeta,
    TrainError,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;
pub const EXIT_ARTIFACT: i32 = 5;

/// Weight initialization draws its own stream under the run seed.
const STREAM_WEIGHTS: u64 = 201;

/// Samples simulated per parallel batch while streaming a dataset to disk.
const GENERATE_CHUNK: usize = 128;

/// An error carrying the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl CliError {
    fn config(message: String) -> Self {
        Self {
            code: EXIT_CONFIG,
            message,
        }
    }

    fn artifact(message: String) -> Self {
        Self {
            code: EXIT_ARTIFACT,
            message,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::config(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self {
            code: EXIT_IO,
            message: e.to_string(),
        }
    }
}

impl From<ChanError> for CliError {
    fn from(e: ChanError) -> Self {
        let code = match &e {
            ChanError::Config { .. } => EXIT_CONFIG,
            ChanError::Io(_) => EXIT_IO,
            ChanError::Format(_) | ChanError::Numeric(_) | ChanError::Tensor(_) => EXIT_ARTIFACT,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let code = match &e {
            ModelError::Config { .. } => EXIT_CONFIG,
            ModelError::Io(_) => EXIT_IO,
            ModelError::Format(_) | ModelError::Tensor(_) => EXIT_ARTIFACT,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config { .. } => Self::config(e.to_string()),
            TrainError::Diverged { .. } => Self {
                code: EXIT_DIVERGED,
                message: e.to_string(),
            },
            TrainError::Io(ref io) => Self {
                code: EXIT_IO,
                message: io.to_string(),
            },
            TrainError::Model(inner) => inner.into(),
            TrainError::MissingGrad { .. }
            | TrainError::UnknownGrad { .. }
            | TrainError::Meta(_)
            | TrainError::Tensor(_) => Self::artifact(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Config { .. } => Self::config(e.to_string()),
            EvalError::Model(inner) => inner.into(),
            EvalError::Chan(inner) => inner.into(),
            EvalError::Numeric(_) | EvalError::Tensor(_) => Self::artifact(e.to_string()),
            EvalError::Json(ref j) => Self {
                code: EXIT_IO,
                message: j.to_string(),
            },
        }
    }
}

#[derive(Parser)]
#[command(
    name = "helena",
    about = "Dual-attention channel estimation over simulated 5G-NR OFDM grids",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Flat key=value configuration file; flags override its values.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed for every random choice of the run.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for parallel sections (default 1, fully sequential).
    #[arg(long)]
    threads: Option<usize>,
    /// Primary output path; sibling files derive from it.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a channel estimation dataset and write it to disk.
    Generate {
        #[command(flatten)]
        common: CommonArgs,
        /// Sample count; a multiple of 11 spread evenly over 0..=20 dB.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Train on a generated dataset and write the best checkpoint.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Dataset file produced by `generate`.
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
        /// Epoch cap for this run.
        #[arg(long)]
        max_epochs: Option<usize>,
        /// Train the attention-only variant without the SE gate.
        #[arg(long)]
        no_se: bool,
    },
    /// Evaluate a checkpoint and the interpolation baseline per SNR.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Dataset file; its test split is evaluated.
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
        /// Trained weights to evaluate.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Which estimators to run: model, ls, or both.
        #[arg(long)]
        method: Option<String>,
        /// Evaluate a model without the SE gate.
        #[arg(long)]
        no_se: bool,
    },
    /// Measure single-sample inference latency and model complexity.
    Bench {
        #[command(flatten)]
        common: CommonArgs,
        /// Trained weights to benchmark.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Benchmark freshly initialized weights instead of a checkpoint.
        #[arg(long)]
        fresh: bool,
        /// Timed forward passes after warm-up.
        #[arg(long)]
        runs: Option<usize>,
        /// Benchmark the variant without the SE gate.
        #[arg(long)]
        no_se: bool,
    },
}

/// Parses arguments and runs the selected command, returning the process
/// exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { common, samples } => {
            let cfg = resolve(
                &common,
                Overrides {
                    samples,
                    ..Overrides::default()
                },
            )?;
            cmd_generate(&cfg)
        }
        Command::Train {
            common,
            dataset,
            max_epochs,
            no_se,
        } => {
            let cfg = resolve(
                &common,
                Overrides {
                    dataset,
                    max_epochs,
                    no_se,
                    ..Overrides::default()
                },
            )?;
            cmd_train(&cfg)
        }
        Command::Eval {
            common,
            dataset,
            checkpoint,
            method,
            no_se,
        } => {
            let method = method
                .map(|m| {
                    m.parse::<EvalMethod>()
                        .map_err(|message| ConfigError::Value {
                            key: "method".into(),
                            message,
                        })
                })
                .transpose()?;
            let cfg = resolve(
                &common,
                Overrides {
                    dataset,
                    checkpoint,
                    method,
                    no_se,
                    ..Overrides::default()
                },
            )?;
            cmd_eval(&cfg)
        }
        Command::Bench {
            common,
            checkpoint,
            fresh,
            runs,
            no_se,
        } => {
            let cfg = resolve(
                &common,
                Overrides {
                    checkpoint,
                    runs,
                    no_se,
                    ..Overrides::default()
                },
            )?;
            cmd_bench(&cfg, fresh)
        }
    }
}

/// Reads the config file (when given), merges overrides, and applies the
/// common flags plus global thread setup.
fn resolve(common: &CommonArgs, mut overrides: Overrides) -> Result<RunConfig, CliError> {
    let file_map = match &common.config {
        Some(path) => crate::config::parse_key_values(&std::fs::read_to_string(path)?)?,
        None => Default::default(),
    };
    overrides.seed = common.seed;
    overrides.threads = common.threads;
    if overrides.out.is_none() {
        overrides.out = common.out.clone();
    }
    let cfg = RunConfig::resolve(&file_map, &overrides)?;
    if cfg.threads == 0 {
        return Err(CliError::config(
            "configuration: threads: must be at least 1".into(),
        ));
    }
    // The global pool can only be installed once per process; a repeat
    // call in the same process keeps the first configuration.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global();
    Ok(cfg)
}

// ── atomic output files ─────────────────────────────────────────────────

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_os_string();
    name.push(".tmp");
    PathBuf::from(name)
}

/// Writes through a sibling temp file and renames into place, so readers
/// never observe a half-written artifact and failures leave nothing at the
/// target path.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = temp_path(path);
    let result = (|| -> Result<(), std::io::Error> {
        let mut file = std::fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result.map_err(CliError::from)
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_os_string();
    name.push(".manifest");
    PathBuf::from(name)
}

fn write_manifest(cfg: &RunConfig, command: &str, out: &Path) -> Result<(), CliError> {
    write_atomic(&manifest_path(out), cfg.manifest(command).as_bytes())
}

// ── shared command plumbing ─────────────────────────────────────────────

fn load_dataset_for(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let path = cfg.require_dataset()?;
    let ds = read_dataset(path)?;
    if ds.n_s != cfg.model.n_s || ds.n_d != cfg.model.n_d {
        return Err(CliError::artifact(format!(
            "dataset grid {}x{} does not match the configured model grid {}x{}",
            ds.n_s, ds.n_d, cfg.model.n_s, cfg.model.n_d
        )));
    }
    Ok(ds)
}

fn load_checkpoint_for(cfg: &RunConfig) -> Result<ModelWeights<f32>, CliError> {
    let path = cfg.require_checkpoint()?;
    Ok(load_weights(path, &cfg.model)?)
}

// ── commands ────────────────────────────────────────────────────────────

fn cmd_generate(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.samples == 0 || !cfg.samples.is_multiple_of(SNR_STEPS_DB.len()) {
        return Err(ChanError::Config {
            field: "samples",
            requirement: "must be a positive multiple of 11 (one per SNR step)",
        }
        .into());
    }
    cfg.pilots.validate(cfg.model.n_s, cfg.model.n_d)?;
    let out = cfg.require_out()?.clone();

    let tmp = temp_path(&out);
    let result = stream_dataset(cfg, &tmp);
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
        return result;
    }
    std::fs::rename(&tmp, &out).map_err(CliError::from)?;
    write_manifest(cfg, "generate", &out)?;

    let bytes = std::fs::metadata(&out)?.len();
    println!(
        "wrote {}: {} samples, {} bytes",
        out.display(),
        cfg.samples,
        bytes
    );
    Ok(())
}

/// Simulates samples in index chunks (parallel within a chunk, assembled
/// in order) and streams them to `path`.
fn stream_dataset(cfg: &RunConfig, path: &Path) -> Result<(), CliError> {
    use rayon::prelude::*;
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(&dataset_header(cfg.samples, cfg.model.n_s, cfg.model.n_d))?;
    for start in (0..cfg.samples).step_by(GENERATE_CHUNK) {
        let end = (start + GENERATE_CHUNK).min(cfg.samples);
        let chunk: Vec<_> = (start..end)
            .into_par_iter()
            .map(|i| {
                let spec = sample_spec_for(cfg.seed, i);
                spec.validate()?;
                generate_sample(&spec, &cfg.pilots, cfg.model.n_s, cfg.model.n_d)
            })
            .collect::<Result<_, _>>()?;
        for sample in &chunk {
            write_sample(&mut w, sample)?;
        }
    }
    w.flush()?;
    w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.train.validate()?;
    let out = cfg.require_out()?.clone();
    let ds = load_dataset_for(cfg)?;
    let split = split_dataset(&ds, &cfg.train, cfg.seed)?;
    let init = build::<f32, _>(&cfg.model, &mut stream_rng(cfg.seed, STREAM_WEIGHTS))?;
    let outcome = fit(init, &ds, &split, &cfg.train)?;

    let best_lr = outcome
        .history
        .iter()
        .find(|r| r.epoch == outcome.best_epoch)
        .map(|r| r.lr)
        .unwrap_or(cfg.train.lr0);
    let meta = CheckpointMeta {
        epoch: outcome.best_epoch,
        val_loss: outcome.best_val_loss,
        lr: best_lr,
    };
    write_atomic(&out, &weight_bytes(&outcome.weights))?;
    write_atomic(
        &checkpoint_meta_path(&out),
        render_checkpoint_meta(&meta).as_bytes(),
    )?;
    let history_path = out.with_extension("history.csv");
    write_atomic(&history_path, history_csv(&outcome.history).as_bytes())?;
    write_manifest(cfg, "train", &out)?;

    println!(
        "trained {} epochs; best validation loss {:e} at epoch {}",
        outcome.history.len(),
        outcome.best_val_loss,
        outcome.best_epoch
    );
    println!("wrote {} and {}", out.display(), history_path.display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.train.validate()?;
    cfg.pilots.validate(cfg.model.n_s, cfg.model.n_d)?;
    let out = cfg.require_out()?.clone();
    let ds = load_dataset_for(cfg)?;
    let split = split_dataset(&ds, &cfg.train, cfg.seed)?;

    let mut methods = Vec::new();
    let mut param_count = None;
    if matches!(cfg.method, EvalMethod::Model | EvalMethod::Both) {
        let weights = load_checkpoint_for(cfg)?;
        param_count = Some(weights.count_params());
        let curve = evaluate(model_estimator(&weights), &ds, &split.test)?;
        methods.push(MethodCurve {
            method: "helena".into(),
            curve,
        });
    }
    if matches!(cfg.method, EvalMethod::Ls | EvalMethod::Both) {
        let curve = evaluate(ls_li_estimator(&cfg.pilots), &ds, &split.test)?;
        methods.push(MethodCurve {
            method: "ls_li".into(),
            curve,
        });
    }
    let report = EvalReport {
        methods,
        param_count,
        flop_count: param_count.map(|_| count_flops(&cfg.model)),
        latency: None,
    };

    write_atomic(&out, report.to_csv().as_bytes())?;
    let json_path = out.with_extension("json");
    write_atomic(&json_path, report.to_json()?.as_bytes())?;
    write_manifest(cfg, "eval", &out)?;

    for m in &report.methods {
        println!(
            "{}: aggregate NMSE {:.3} dB over {} test samples",
            m.method,
            m.curve.aggregate_db,
            split.test.len()
        );
    }
    println!("wrote {} and {}", out.display(), json_path.display());
    Ok(())
}

fn cmd_bench(cfg: &RunConfig, fresh: bool) -> Result<(), CliError> {
    if cfg.runs == 0 {
        return Err(CliError::config(
            "configuration: runs: must be at least 1".into(),
        ));
    }
    let out = cfg.require_out()?.clone();
    let weights = if fresh {
        build::<f32, _>(&cfg.model, &mut stream_rng(cfg.seed, STREAM_WEIGHTS))?
    } else if cfg.checkpoint.is_some() {
        load_checkpoint_for(cfg)?
    } else {
        return Err(CliError::config(
            "checkpoint is required (--checkpoint, a checkpoint= config line, or --fresh)".into(),
        ));
    };

    let stats = benchmark_inference(&weights, cfg.runs)?;
    let report = EvalReport {
        methods: Vec::new(),
        param_count: Some(weights.count_params()),
        flop_count: Some(count_flops(&cfg.model)),
        latency: Some(stats),
    };
    write_atomic(&out, report.to_json()?.as_bytes())?;
    write_manifest(cfg, "bench", &out)?;

    println!("param_count: {}", weights.count_params());
    println!("flop_count: {}", count_flops(&cfg.model));
    println!(
        "latency_ms: mean {:.4} std {:.4} min {:.4} max {:.4} over {} runs",
        stats.mean_ms, stats.std_ms, stats.min_ms, stats.max_ms, stats.runs
    );
    println!("wrote {}", out.display());
    Ok(())
}
