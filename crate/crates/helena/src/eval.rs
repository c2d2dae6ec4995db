//! Evaluation harness: normalized mean squared error over channel grids,
//! per-SNR error curves for any estimator, and a single-sample inference
//! latency benchmark, with CSV and JSON report serialization.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chansim::{ChanError, ChannelGrid, Dataset, DatasetSample, PilotPattern};
use crate::model::{ModelError, ModelWeights};
use crate::stream_rng;
use crate::tensor::{Scalar, Tensor, TensorError};

/// Floor substituted for the `-inf` dB of a perfect estimate.
pub const NMSE_DB_FLOOR: f64 = -100.0;

/// Forward passes executed before the timed benchmark runs.
pub const WARMUP_RUNS: usize = 10;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("configuration: {field}: {requirement}")]
    Config {
        field: &'static str,
        requirement: &'static str,
    },
    #[error("numeric: {0}")]
    Numeric(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Chan(#[from] ChanError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Squared error against squared reference energy, summed over one pair of
/// plane tensors at 64-bit.
fn error_energy<S: Scalar>(
    estimate: &Tensor<S>,
    truth: &Tensor<S>,
) -> Result<(f64, f64), EvalError> {
    if estimate.shape() != truth.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "nmse",
            left: estimate.shape().to_vec(),
            right: truth.shape().to_vec(),
        }
        .into());
    }
    let mut err = 0.0;
    let mut energy = 0.0;
    for (a, b) in estimate.data().iter().zip(truth.data()) {
        let (a, b) = (a.into_f64(), b.into_f64());
        err += (a - b) * (a - b);
        energy += b * b;
    }
    Ok((err, energy))
}

/// Normalized mean squared error of a batch: the mean squared error energy
/// over the mean reference energy, `Σ‖Ĥ−H‖² / Σ‖H‖²` with both sums
/// running over every element of every pair.
pub fn nmse<S: Scalar>(estimates: &[Tensor<S>], truths: &[Tensor<S>]) -> Result<f64, EvalError> {
    if estimates.is_empty() || estimates.len() != truths.len() {
        return Err(EvalError::Config {
            field: "batch",
            requirement: "estimate and truth batches must be nonempty and equally long",
        });
    }
    let mut err = 0.0;
    let mut energy = 0.0;
    for (e, t) in estimates.iter().zip(truths) {
        let (a, b) = error_energy(e, t)?;
        err += a;
        energy += b;
    }
    ratio(err, energy)
}

fn ratio(err: f64, energy: f64) -> Result<f64, EvalError> {
    if energy == 0.0 {
        return Err(EvalError::Numeric("reference channel has zero energy"));
    }
    Ok(err / energy)
}

/// Linear NMSE in decibels, clamped at [`NMSE_DB_FLOOR`].
pub fn nmse_db(linear: f64) -> f64 {
    (10.0 * linear.log10()).max(NMSE_DB_FLOOR)
}

/// One SNR group of an evaluation curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnrRow {
    pub snr_db: f64,
    pub nmse_linear: f64,
    pub nmse_db: f64,
    pub sample_count: usize,
}

/// Per-SNR rows (ascending SNR) plus the batch NMSE over every evaluated
/// sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCurve {
    pub rows: Vec<SnrRow>,
    pub aggregate_linear: f64,
    pub aggregate_db: f64,
}

/// Runs an estimator over the given dataset indices and groups its error
/// by SNR.
///
/// Samples are processed in parallel but reduced in index order, so the
/// result is identical at every thread count.
pub fn evaluate<F>(estimator: F, ds: &Dataset, indices: &[usize]) -> Result<EvalCurve, EvalError>
where
    F: Fn(&DatasetSample) -> Result<Tensor<f32>, EvalError> + Sync,
{
    if indices.is_empty() {
        return Err(EvalError::Config {
            field: "split",
            requirement: "must contain at least one sample",
        });
    }
    if indices.iter().any(|&i| i >= ds.samples.len()) {
        return Err(EvalError::Config {
            field: "split",
            requirement: "every index must point into the dataset",
        });
    }

    let pairs: Vec<(f64, f64)> = indices
        .par_iter()
        .map(|&i| {
            let sample = &ds.samples[i];
            let estimate = estimator(sample)?;
            error_energy(&estimate, &sample.label)
        })
        .collect::<Result<_, _>>()?;

    let mut snrs: Vec<f64> = Vec::new();
    for &i in indices {
        let snr = ds.samples[i].meta.snr_db;
        if !snrs.contains(&snr) {
            snrs.push(snr);
        }
    }
    snrs.sort_by(|a, b| a.partial_cmp(b).expect("SNR values are comparable"));

    let mut rows = Vec::with_capacity(snrs.len());
    for snr in snrs {
        let (mut err, mut energy, mut count) = (0.0, 0.0, 0usize);
        for (&i, &(e, p)) in indices.iter().zip(&pairs) {
            if ds.samples[i].meta.snr_db == snr {
                err += e;
                energy += p;
                count += 1;
            }
        }
        let linear = ratio(err, energy)?;
        rows.push(SnrRow {
            snr_db: snr,
            nmse_linear: linear,
            nmse_db: nmse_db(linear),
            sample_count: count,
        });
    }
    let err: f64 = pairs.iter().map(|p| p.0).sum();
    let energy: f64 = pairs.iter().map(|p| p.1).sum();
    let aggregate = ratio(err, energy)?;
    Ok(EvalCurve {
        rows,
        aggregate_linear: aggregate,
        aggregate_db: nmse_db(aggregate),
    })
}

/// Estimator that runs the model in inference mode on the sample input.
pub fn model_estimator(
    weights: &ModelWeights<f32>,
) -> impl Fn(&DatasetSample) -> Result<Tensor<f32>, EvalError> + Sync + '_ {
    move |sample| {
        let mut rng = stream_rng(0, 0);
        Ok(weights.forward(&sample.input, false, &mut rng)?)
    }
}

/// Estimator that linearly interpolates the pilot least-squares input over
/// the full grid.
pub fn ls_li_estimator(
    pattern: &PilotPattern,
) -> impl Fn(&DatasetSample) -> Result<Tensor<f32>, EvalError> + Sync + '_ {
    move |sample| {
        let grid = ChannelGrid::from_planes(&sample.input)?;
        Ok(crate::chansim::linear_interpolate(&grid, pattern)?.to_planes())
    }
}

/// Estimator that returns the zero-filled pilot least-squares grid as is.
pub fn raw_ls_estimator() -> impl Fn(&DatasetSample) -> Result<Tensor<f32>, EvalError> + Sync {
    |sample| Ok(sample.input.clone())
}

/// Wall-clock statistics of the timed runs, in milliseconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub runs: usize,
}

/// Times `runs` single-sample forward passes after [`WARMUP_RUNS`]
/// untimed ones, on one thread, against a fixed pseudo-random input.
pub fn benchmark_inference(
    weights: &ModelWeights<f32>,
    runs: usize,
) -> Result<LatencyStats, EvalError> {
    if runs == 0 {
        return Err(EvalError::Config {
            field: "runs",
            requirement: "must be at least 1",
        });
    }
    let cfg = weights.config();
    let mut input_rng = stream_rng(0, 7);
    let input = Tensor::from_fn(vec![cfg.n_s, cfg.n_d, 2], |_| {
        input_rng.gen_range(-1.0..1.0)
    });
    let mut rng = stream_rng(0, 0);

    for _ in 0..WARMUP_RUNS {
        std::hint::black_box(weights.forward(&input, false, &mut rng)?);
    }
    let mut times_ms = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        std::hint::black_box(weights.forward(&input, false, &mut rng)?);
        times_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }

    let mean = times_ms.iter().sum::<f64>() / runs as f64;
    let var = times_ms
        .iter()
        .map(|t| (t - mean) * (t - mean))
        .sum::<f64>()
        / runs as f64;
    let min = times_ms.iter().copied().fold(f64::INFINITY, f64::min);
    let max = times_ms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(LatencyStats {
        mean_ms: mean,
        std_ms: var.sqrt(),
        min_ms: min,
        max_ms: max,
        runs,
    })
}

/// One labeled evaluation curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodCurve {
    pub method: String,
    #[serde(flatten)]
    pub curve: EvalCurve,
}

/// Full report: the evaluated curves plus the model's complexity and
/// latency numbers where they apply.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub methods: Vec<MethodCurve>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub param_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flop_count: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencyStats>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String, EvalError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    /// CSV with one row per (method, SNR): `method,snr_db,nmse_linear,
    /// nmse_db,samples`, '.' decimal separator, LF line endings.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,snr_db,nmse_linear,nmse_db,samples\n");
        for m in &self.methods {
            for r in &m.curve.rows {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    m.method, r.snr_db, r.nmse_linear, r.nmse_db, r.sample_count
                ));
            }
        }
        out
    }
}
