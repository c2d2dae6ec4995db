//! Training loop: Adam on mean squared error over seeded mini-batches,
//! a plateau learning-rate schedule, early stopping, and checkpoint
//! selection by validation loss.
//!
//! The whole loop is a pure function of (initial weights, dataset, split,
//! config): batch order, dropout masks, and every floating-point reduction
//! are sequenced identically on every run, so histories and returned
//! weights are bit-identical across reruns. Per-sample passes inside a
//! batch run in parallel, but their results are reduced in index order,
//! so the thread count never changes the outcome.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chansim::Dataset;
use crate::model::{load_weights, save_weights, ModelError, ModelWeights};
use crate::stream_rng;
use crate::tape::{Tape, TensorId};
use crate::tensor::{Scalar, Tensor, TensorError};

/// Adam first-moment decay.
pub const ADAM_BETA1: f64 = 0.9;
/// Adam second-moment decay.
pub const ADAM_BETA2: f64 = 0.999;
/// Adam denominator offset.
pub const ADAM_EPSILON: f64 = 1e-8;

/// ChaCha streams under the training seed. Kept clear of the low stream
/// ids the channel simulator uses under its own seeds, and distinct from
/// one another so the split, the batch order, and the dropout masks are
/// uncorrelated.
const STREAM_SPLIT: u64 = 100;
const STREAM_SHUFFLE: u64 = 101;
const STREAM_DROPOUT: u64 = 102;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration: {field}: {requirement}")]
    Config {
        field: &'static str,
        requirement: &'static str,
    },
    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Diverged {
        epoch: usize,
        history: Vec<EpochStats>,
    },
    #[error("no gradient for parameter {name}")]
    MissingGrad { name: String },
    #[error("gradient for unknown parameter {name}")]
    UnknownGrad { name: String },
    #[error("checkpoint metadata: {0}")]
    Meta(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Optimizer and schedule settings.
///
/// The learning rate starts at `lr0` and is multiplied by `lr_factor`
/// whenever `lr_patience_epochs` epochs pass without a new best validation
/// loss, never dropping below `lr_min`; training stops after
/// `early_stop_patience` epochs without improvement or at `max_epochs`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_factor: f64,
    pub lr_patience_epochs: usize,
    pub lr_min: f64,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr0: 0.01,
            lr_factor: 0.8,
            lr_patience_epochs: 40,
            lr_min: 1e-5,
            early_stop_patience: 50,
            max_epochs: 500,
            seed: 0,
            train_ratio: 0.70,
            val_ratio: 0.15,
            test_ratio: 0.15,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config {
                field: "batch_size",
                requirement: "must be positive",
            });
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(TrainError::Config {
                field: "lr0",
                requirement: "must be positive and finite",
            });
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(TrainError::Config {
                field: "lr_factor",
                requirement: "must lie in (0, 1)",
            });
        }
        if self.lr_patience_epochs == 0 {
            return Err(TrainError::Config {
                field: "lr_patience_epochs",
                requirement: "must be positive",
            });
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr0) {
            return Err(TrainError::Config {
                field: "lr_min",
                requirement: "must be positive and at most lr0",
            });
        }
        if self.early_stop_patience == 0 {
            return Err(TrainError::Config {
                field: "early_stop_patience",
                requirement: "must be positive",
            });
        }
        let ratios = [self.train_ratio, self.val_ratio, self.test_ratio];
        if ratios.iter().any(|r| *r <= 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(TrainError::Config {
                field: "split ratios",
                requirement: "must all be positive and sum to 1",
            });
        }
        Ok(())
    }
}

/// Disjoint, exhaustive index lists into one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shares `total` across the three ratios, largest fractional remainder
/// first (ties resolved in train, val, test order).
fn quota(total: usize, ratios: [f64; 3]) -> [usize; 3] {
    let ideal = ratios.map(|r| r * total as f64);
    let mut counts = ideal.map(|x| x.floor() as usize);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (ideal[a].fract(), ideal[b].fract());
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut leftover = total - counts.iter().sum::<usize>();
    for s in order {
        if leftover == 0 {
            break;
        }
        counts[s] += 1;
        leftover -= 1;
    }
    counts
}

/// Splits a dataset into train/validation/test index lists: samples are
/// grouped by SNR, shuffled with a generator seeded by `seed`, and dealt
/// out so each SNR group lands in each split proportionally while the
/// overall sizes match the ratios exactly (largest-remainder rounding).
pub fn split_dataset(ds: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<Split, TrainError> {
    cfg.validate()?;
    if ds.samples.is_empty() {
        return Err(TrainError::Config {
            field: "dataset",
            requirement: "must contain at least one sample",
        });
    }
    let ratios = [cfg.train_ratio, cfg.val_ratio, cfg.test_ratio];
    let targets = quota(ds.samples.len(), ratios);

    // Group by SNR value, ordered ascending so iteration is deterministic.
    let mut buckets: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, s) in ds.samples.iter().enumerate() {
        buckets.entry(s.meta.snr_db.to_bits()).or_default().push(i);
    }

    let mut rng = stream_rng(seed, STREAM_SPLIT);
    let mut splits: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut pool = Vec::new();
    for bucket in buckets.values() {
        let mut indices = bucket.clone();
        indices.shuffle(&mut rng);
        // Whole shares stay inside the bucket; at most two fractional
        // leftovers per bucket spill into a shared pool.
        let mut cursor = 0;
        for (s, &ratio) in ratios.iter().enumerate() {
            let take = (ratio * indices.len() as f64).floor() as usize;
            splits[s].extend(&indices[cursor..cursor + take]);
            cursor += take;
        }
        pool.extend(&indices[cursor..]);
    }
    // The pool tops splits up to their exact global targets.
    let mut pool_iter = pool.into_iter();
    for (s, target) in targets.iter().enumerate() {
        while splits[s].len() < *target {
            splits[s].push(pool_iter.next().expect("pool covers all deficits"));
        }
    }
    let [train, val, test] = splits;
    Ok(Split { train, val, test })
}

/// Records the mean squared error between two equally shaped nodes on the
/// tape: `mean((pred − label)²)` over all elements.
pub fn mse_loss<S: Scalar>(
    tape: &mut Tape<S>,
    pred: TensorId,
    label: TensorId,
) -> Result<TensorId, TensorError> {
    let diff = tape.sub(pred, label)?;
    let squared = tape.mul(diff, diff)?;
    tape.mean(squared, None)
}

/// Mean squared error of plain tensors, accumulated at 64-bit.
pub fn mse_value<S: Scalar>(pred: &Tensor<S>, label: &Tensor<S>) -> Result<f64, TensorError> {
    if pred.shape() != label.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "mse",
            left: pred.shape().to_vec(),
            right: label.shape().to_vec(),
        });
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(label.data())
        .map(|(p, l)| {
            let d = p.into_f64() - l.into_f64();
            d * d
        })
        .sum();
    Ok(sum / pred.numel() as f64)
}

/// Adam moment estimates, one pair per parameter, created lazily on the
/// first step so their shapes always mirror the parameters.
#[derive(Clone, Debug, Default)]
pub struct AdamState<S: Scalar> {
    first: BTreeMap<String, Tensor<S>>,
    second: BTreeMap<String, Tensor<S>>,
    step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new() -> Self {
        Self {
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First and second moment of one parameter, if it has been stepped.
    pub fn moments(&self, name: &str) -> Option<(&Tensor<S>, &Tensor<S>)> {
        Some((self.first.get(name)?, self.second.get(name)?))
    }
}

/// One bias-corrected Adam update over a parameter map. Every parameter
/// must have a gradient and vice versa; moment math runs at 64-bit and is
/// stored back at the parameter precision.
pub fn adam_update<S: Scalar>(
    params: &mut BTreeMap<String, Tensor<S>>,
    grads: &BTreeMap<String, Tensor<S>>,
    state: &mut AdamState<S>,
    lr: f64,
) -> Result<(), TrainError> {
    for name in grads.keys() {
        if !params.contains_key(name) {
            return Err(TrainError::UnknownGrad { name: name.clone() });
        }
    }
    state.step += 1;
    let correction1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let correction2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    for (name, param) in params.iter_mut() {
        let grad = grads
            .get(name)
            .ok_or_else(|| TrainError::MissingGrad { name: name.clone() })?;
        if grad.shape() != param.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adam",
                left: grad.shape().to_vec(),
                right: param.shape().to_vec(),
            }
            .into());
        }
        let first = state
            .first
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
        let second = state
            .second
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
        let (w, m, v) = (param.data_mut(), first.data_mut(), second.data_mut());
        for i in 0..w.len() {
            let g = grad.data()[i].into_f64();
            let m_new = ADAM_BETA1 * m[i].into_f64() + (1.0 - ADAM_BETA1) * g;
            let v_new = ADAM_BETA2 * v[i].into_f64() + (1.0 - ADAM_BETA2) * g * g;
            let update = lr * (m_new / correction1) / ((v_new / correction2).sqrt() + ADAM_EPSILON);
            m[i] = S::from_f64(m_new);
            v[i] = S::from_f64(v_new);
            w[i] = S::from_f64(w[i].into_f64() - update);
        }
    }
    Ok(())
}

/// [`adam_update`] applied to a model's weight entries.
pub fn adam_step<S: Scalar>(
    w: &mut ModelWeights<S>,
    grads: &BTreeMap<String, Tensor<S>>,
    state: &mut AdamState<S>,
    lr: f64,
) -> Result<(), TrainError> {
    adam_update(w.entries_mut(), grads, state, lr)
}

/// One row of the training history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// Result of a training run: the weights from the epoch with the lowest
/// validation loss (the initial weights if no epoch ran) and the per-epoch
/// history.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: ModelWeights<f32>,
    pub history: Vec<EpochStats>,
    /// Epoch of the returned weights, 1-based; 0 when no epoch ran.
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// One training pass for one sample: the squared-error term it adds to
/// the epoch total and its parameter gradients by name.
fn sample_gradients(
    weights: &ModelWeights<f32>,
    sample: &crate::chansim::DatasetSample,
    dropout_seed: u64,
) -> Result<(f64, BTreeMap<String, Tensor<f32>>), TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let mut tape = Tape::new();
    let pass = weights.forward_on_tape(&mut tape, &sample.input, true, &mut rng, true)?;
    let label = tape.input(&sample.label);
    let loss = mse_loss(&mut tape, pass.output, label)?;
    let sq = tape.tensor(loss).data()[0] as f64;
    let grads = tape.backward(loss)?;
    let mut by_name = BTreeMap::new();
    for (name, &id) in &pass.params {
        let g = grads
            .wrt(id)
            .ok_or_else(|| TrainError::MissingGrad { name: name.clone() })?;
        by_name.insert(name.clone(), g.clone());
    }
    Ok((sq, by_name))
}

/// Trains `init` on the train split and returns the best-validation
/// checkpoint.
///
/// Each epoch shuffles the train indices, walks them in batches of
/// `batch_size` (final partial batch included), averages per-sample
/// gradients within a batch, and takes one Adam step per batch. Validation
/// runs in inference mode after every epoch. A strictly lower validation
/// loss is an improvement; ties keep the earlier epoch.
pub fn fit(
    init: ModelWeights<f32>,
    ds: &Dataset,
    split: &Split,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(TrainError::Config {
            field: "split",
            requirement: "training split must be nonempty",
        });
    }
    if split.val.is_empty() {
        return Err(TrainError::Config {
            field: "split",
            requirement: "validation split must be nonempty",
        });
    }
    if let Some(&bad) = split
        .train
        .iter()
        .chain(&split.val)
        .find(|&&i| i >= ds.samples.len())
    {
        let _ = bad;
        return Err(TrainError::Config {
            field: "split",
            requirement: "every index must point into the dataset",
        });
    }

    let mut weights = init;
    let mut state = AdamState::new();
    let mut shuffle_rng = stream_rng(cfg.seed, STREAM_SHUFFLE);
    let mut dropout_rng = stream_rng(cfg.seed, STREAM_DROPOUT);
    let mut history: Vec<EpochStats> = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_weights = weights.clone();
    let mut lr = cfg.lr0;
    let mut epochs_since_best_for_lr = 0;
    let mut epochs_since_best = 0;

    for epoch in 1..=cfg.max_epochs {
        let mut order = split.train.clone();
        order.shuffle(&mut shuffle_rng);

        let mut train_sq_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            // One dropout seed per sample, drawn in batch order, so the
            // masks are fixed before the passes fan out across threads.
            let seeds: Vec<u64> = batch.iter().map(|_| dropout_rng.gen()).collect();
            let passes: Vec<(f64, BTreeMap<String, Tensor<f32>>)> = batch
                .par_iter()
                .zip(seeds)
                .map(|(&idx, seed)| sample_gradients(&weights, &ds.samples[idx], seed))
                .collect::<Result<_, _>>()?;

            // Reduce in index order: summation order is independent of
            // the thread count.
            let mut grad_acc: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
            for (sq, grads) in passes {
                train_sq_sum += sq;
                for (name, g) in grads {
                    match grad_acc.get_mut(&name) {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += *b;
                            }
                        }
                        None => {
                            grad_acc.insert(name, g);
                        }
                    }
                }
            }
            let inv = 1.0 / batch.len() as f32;
            for g in grad_acc.values_mut() {
                for v in g.data_mut() {
                    *v *= inv;
                }
            }
            adam_step(&mut weights, &grad_acc, &mut state, lr)?;
        }
        let train_loss = train_sq_sum / split.train.len() as f64;
        let val_loss = validation_loss(&weights, ds, &split.val)?;

        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(TrainError::Diverged { epoch, history });
        }
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            lr,
        });

        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_weights = weights.clone();
            epochs_since_best_for_lr = 0;
            epochs_since_best = 0;
        } else {
            epochs_since_best_for_lr += 1;
            epochs_since_best += 1;
        }
        if epochs_since_best >= cfg.early_stop_patience {
            break;
        }
        if epochs_since_best_for_lr >= cfg.lr_patience_epochs {
            lr = (lr * cfg.lr_factor).max(cfg.lr_min);
            epochs_since_best_for_lr = 0;
        }
    }

    Ok(TrainOutcome {
        weights: best_weights,
        history,
        best_epoch,
        best_val_loss: best_val,
    })
}

/// Mean per-sample MSE over `indices` in inference mode.
pub fn validation_loss(
    weights: &ModelWeights<f32>,
    ds: &Dataset,
    indices: &[usize],
) -> Result<f64, TrainError> {
    // Samples evaluate in parallel; the per-sample values are summed in
    // index order afterwards.
    let values: Vec<f64> = indices
        .par_iter()
        .map(|&idx| -> Result<f64, TrainError> {
            let sample = &ds.samples[idx];
            // Inference mode never draws from the generator; a throwaway
            // keeps that explicit.
            let mut rng = stream_rng(0, 0);
            let pred = weights.forward(&sample.input, false, &mut rng)?;
            Ok(mse_value(&pred, &sample.label)?)
        })
        .collect::<Result<_, _>>()?;
    Ok(values.iter().sum::<f64>() / indices.len() as f64)
}

// ── checkpoints ─────────────────────────────────────────────────────────

/// Metadata stored next to a checkpoint's weight file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub val_loss: f64,
    pub lr: f64,
}

/// Sidecar path of a checkpoint: the weight path with `.meta` appended.
pub fn checkpoint_meta_path(weights_path: &Path) -> PathBuf {
    let mut name = weights_path.as_os_str().to_os_string();
    name.push(".meta");
    PathBuf::from(name)
}

/// The sidecar text for a checkpoint.
pub fn render_checkpoint_meta(meta: &CheckpointMeta) -> String {
    format!(
        "epoch={}\nval_loss={}\nlr={}\n",
        meta.epoch, meta.val_loss, meta.lr
    )
}

/// Writes a checkpoint: the weight file plus a `key=value` sidecar with
/// the epoch, validation loss, and learning rate it was taken at.
pub fn write_checkpoint(
    path: &Path,
    weights: &ModelWeights<f32>,
    meta: &CheckpointMeta,
) -> Result<(), TrainError> {
    save_weights(weights, path)?;
    std::fs::write(checkpoint_meta_path(path), render_checkpoint_meta(meta))?;
    Ok(())
}

/// The training history as CSV: header plus one row per epoch, '.'
/// decimals, LF line endings.
pub fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,lr\n");
    for row in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.epoch, row.train_loss, row.val_loss, row.lr
        ));
    }
    out
}

/// Reads a checkpoint written by [`write_checkpoint`].
pub fn read_checkpoint(
    path: &Path,
    expected: &crate::model::ModelConfig,
) -> Result<(ModelWeights<f32>, CheckpointMeta), TrainError> {
    let weights = load_weights(path, expected)?;
    let meta = read_checkpoint_meta(path)?;
    Ok((weights, meta))
}

/// Parses a checkpoint sidecar, rejecting unknown or missing keys.
pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta, TrainError> {
    let side = checkpoint_meta_path(path);
    let text = std::fs::read_to_string(&side)?;
    let (mut epoch, mut val_loss, mut lr) = (None, None, None);
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| TrainError::Meta(format!("line {}: expected key=value", line_no + 1)))?;
        let parse_err = |what: &str| TrainError::Meta(format!("line {}: bad {what}", line_no + 1));
        match key.trim() {
            "epoch" => epoch = Some(value.trim().parse().map_err(|_| parse_err("epoch"))?),
            "val_loss" => val_loss = Some(value.trim().parse().map_err(|_| parse_err("val_loss"))?),
            "lr" => lr = Some(value.trim().parse().map_err(|_| parse_err("lr"))?),
            other => return Err(TrainError::Meta(format!("unknown key {other}"))),
        }
    }
    Ok(CheckpointMeta {
        epoch: epoch.ok_or_else(|| TrainError::Meta("missing key epoch".into()))?,
        val_loss: val_loss.ok_or_else(|| TrainError::Meta("missing key val_loss".into()))?,
        lr: lr.ok_or_else(|| TrainError::Meta("missing key lr".into()))?,
    })
}
