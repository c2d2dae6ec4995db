//! The full estimator network: shallow CNN front end, frequency-axis
//! patching, token embedding, multi-head self-attention, optional
//! squeeze-and-excitation gate, reconstruction, and a global residual that
//! adds the low-resolution input back onto the output.
//!
//! With `use_se = false` the squeeze-and-excitation stage is skipped and the
//! rest of the pipeline is unchanged; that ablation is referred to as the
//! MHSA-only variant throughout.
//!
//! Weight layout is a pure function of [`ModelConfig`]: the same config
//! always yields the same set of names and shapes, which is what the weight
//! file loader validates against.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layers::{self, DenseParams, MhsaParams, SeParams};
use crate::tape::{Tape, TensorId};
use crate::tensor::{Scalar, Tensor, TensorError};

/// Architecture hyperparameters.
///
/// The defaults describe the full-size network on a 612×14 resource grid:
/// 12×2 and 6×7 convolution kernels with 8 filters each, patch height 12
/// (51 tokens of length 1344), embedding width 64, 4 attention heads, and a
/// squeeze-and-excitation reduction of 4.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Subcarriers (grid height).
    pub n_s: usize,
    /// OFDM symbols (grid width).
    pub n_d: usize,
    /// First convolution kernel extents (frequency, time).
    pub kernel1: (usize, usize),
    /// Second convolution kernel extents (frequency, time).
    pub kernel2: (usize, usize),
    /// First convolution filter count.
    pub c1: usize,
    /// Second convolution filter count (token channel depth).
    pub c: usize,
    /// Patch height along the frequency axis.
    pub p: usize,
    /// Token embedding width.
    pub d: usize,
    /// Attention head count.
    pub h: usize,
    /// Squeeze-and-excitation reduction ratio.
    pub r: usize,
    /// Dropout rate applied after the second convolution while training.
    pub dropout_rate: f64,
    /// Include the squeeze-and-excitation stage.
    pub use_se: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_s: 612,
            n_d: 14,
            kernel1: (12, 2),
            kernel2: (6, 7),
            c1: 8,
            c: 8,
            p: 12,
            d: 64,
            h: 4,
            r: 4,
            dropout_rate: 0.1,
            use_se: true,
        }
    }
}

impl ModelConfig {
    /// Token count along the frequency axis.
    pub fn tokens(&self) -> usize {
        self.n_s / self.p
    }

    /// Flattened input token length `p·N_D·C`.
    pub fn token_len(&self) -> usize {
        self.p * self.n_d * self.c
    }

    /// Flattened output token length `p·N_D·2`.
    pub fn out_token_len(&self) -> usize {
        self.p * self.n_d * 2
    }

    /// Per-head attention width.
    pub fn d_k(&self) -> usize {
        self.d / self.h
    }

    /// Checks every structural invariant, naming the offending field.
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive: [(&'static str, usize); 10] = [
            ("n_s", self.n_s),
            ("n_d", self.n_d),
            ("kernel1", self.kernel1.0 * self.kernel1.1),
            ("kernel2", self.kernel2.0 * self.kernel2.1),
            ("c1", self.c1),
            ("c", self.c),
            ("p", self.p),
            ("d", self.d),
            ("h", self.h),
            ("r", self.r),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(ModelError::Config {
                    field,
                    requirement: "must be positive",
                });
            }
        }
        if !self.n_s.is_multiple_of(self.p) {
            return Err(ModelError::Config {
                field: "p",
                requirement: "n_s must be divisible by the patch height",
            });
        }
        if !self.d.is_multiple_of(self.h) {
            return Err(ModelError::Config {
                field: "h",
                requirement: "d must be divisible by the head count",
            });
        }
        if !self.d.is_multiple_of(self.r) {
            return Err(ModelError::Config {
                field: "r",
                requirement: "d must be divisible by the reduction ratio",
            });
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::Config {
                field: "dropout_rate",
                requirement: "must lie in [0, 1)",
            });
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration: {field}: {requirement}")]
    Config {
        field: &'static str,
        requirement: &'static str,
    },
    #[error("weight file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

enum Init {
    /// Uniform in ±√(6/(fan_in+fan_out)) with conv fans spanning the
    /// receptive field.
    GlorotConv,
    /// Uniform in ±√(6/(fan_in+fan_out)) with matrix fans.
    GlorotDense,
    Zero,
    One,
}

/// Canonical parameter table: names, shapes, and initialization rules, in
/// the order initialization consumes random draws.
fn shape_table(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (f1, t1) = cfg.kernel1;
    let (f2, t2) = cfg.kernel2;
    let mut table = vec![
        (
            "conv1.kernel".into(),
            vec![f1, t1, 2, cfg.c1],
            Init::GlorotConv,
        ),
        ("conv1.bias".into(), vec![cfg.c1], Init::Zero),
        (
            "conv2.kernel".into(),
            vec![f2, t2, cfg.c1, cfg.c],
            Init::GlorotConv,
        ),
        ("conv2.bias".into(), vec![cfg.c], Init::Zero),
        (
            "embed.weight".into(),
            vec![cfg.token_len(), cfg.d],
            Init::GlorotDense,
        ),
        ("embed.bias".into(), vec![cfg.d], Init::Zero),
    ];
    for j in 0..cfg.h {
        table.push((
            format!("mhsa.head{j}.wq"),
            vec![cfg.d, cfg.d_k()],
            Init::GlorotDense,
        ));
        table.push((
            format!("mhsa.head{j}.wk"),
            vec![cfg.d, cfg.d_k()],
            Init::GlorotDense,
        ));
        table.push((
            format!("mhsa.head{j}.wv"),
            vec![cfg.d, cfg.d_k()],
            Init::GlorotDense,
        ));
    }
    table.push(("mhsa.wo".into(), vec![cfg.d, cfg.d], Init::GlorotDense));
    table.push(("mhsa.bo".into(), vec![cfg.d], Init::Zero));
    table.push(("mhsa.gamma".into(), vec![cfg.d], Init::One));
    table.push(("mhsa.beta".into(), vec![cfg.d], Init::Zero));
    if cfg.use_se {
        table.push((
            "se.w1".into(),
            vec![cfg.d, cfg.d / cfg.r],
            Init::GlorotDense,
        ));
        table.push(("se.b1".into(), vec![cfg.d / cfg.r], Init::Zero));
        table.push((
            "se.w2".into(),
            vec![cfg.d / cfg.r, cfg.d],
            Init::GlorotDense,
        ));
        table.push(("se.b2".into(), vec![cfg.d], Init::Zero));
    }
    table.push((
        "recon.weight".into(),
        vec![cfg.d, cfg.out_token_len()],
        Init::GlorotDense,
    ));
    table.push(("recon.bias".into(), vec![cfg.out_token_len()], Init::Zero));
    table
}

/// Named parameter tensors plus the config that determines their layout.
#[derive(Clone, Debug)]
pub struct ModelWeights<S: Scalar> {
    config: ModelConfig,
    entries: BTreeMap<String, Tensor<S>>,
}

/// Handles returned by [`ModelWeights::forward_on_tape`]: the recorded
/// input and output, every parameter's tape id by name, and the shape each
/// pipeline stage produced.
pub struct TapedForward {
    pub input: TensorId,
    pub output: TensorId,
    pub params: BTreeMap<String, TensorId>,
    pub stages: Vec<(&'static str, Vec<usize>)>,
}

/// Initializes a fresh set of weights. Weight matrices and kernels draw
/// from a uniform distribution with fan-balanced bounds, biases start at
/// zero, and the layernorm gain starts at one. Draws are consumed in the
/// fixed table order, so a seed fully determines the result.
pub fn build<S: Scalar, R: Rng>(
    config: &ModelConfig,
    rng: &mut R,
) -> Result<ModelWeights<S>, ModelError> {
    config.validate()?;
    let mut entries = BTreeMap::new();
    for (name, shape, init) in shape_table(config) {
        let tensor = match init {
            Init::Zero => Tensor::zeros(shape),
            Init::One => Tensor::filled(shape, S::one()),
            Init::GlorotConv => {
                let field = shape[0] * shape[1];
                let bound = (6.0 / ((field * shape[2] + field * shape[3]) as f64)).sqrt();
                uniform_tensor(shape, bound, rng)
            }
            Init::GlorotDense => {
                let bound = (6.0 / ((shape[0] + shape[1]) as f64)).sqrt();
                uniform_tensor(shape, bound, rng)
            }
        };
        entries.insert(name, tensor);
    }
    Ok(ModelWeights {
        config: *config,
        entries,
    })
}

fn uniform_tensor<S: Scalar, R: Rng>(shape: Vec<usize>, bound: f64, rng: &mut R) -> Tensor<S> {
    Tensor::from_fn(shape, |_| {
        S::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * bound)
    })
}

/// Splits a `[N_S×N_D×C]` grid into `N_S/p` tokens of length `p·N_D·C`.
///
/// Patch `i` holds frequency rows `[i·p, (i+1)·p)`, flattened in
/// (frequency row, symbol, channel) order. Because that matches the grid's
/// own row-major layout, the data is reinterpreted without movement.
pub fn patchify<S: Scalar>(grid: &Tensor<S>, p: usize) -> Result<Tensor<S>, ModelError> {
    if grid.rank() != 3 {
        return Err(TensorError::ShapeMismatch {
            op: "patchify",
            left: grid.shape().to_vec(),
            right: vec![],
        }
        .into());
    }
    if p == 0 || !grid.shape()[0].is_multiple_of(p) {
        return Err(ModelError::Config {
            field: "p",
            requirement: "grid height must be divisible by the patch height",
        });
    }
    let tokens = grid.shape()[0] / p;
    let len = p * grid.shape()[1] * grid.shape()[2];
    Ok(grid.clone().reshaped(vec![tokens, len])?)
}

/// Exact inverse of [`patchify`] for two-channel grids: `[N×(p·N_D·2)]`
/// back to `[N_S×N_D×2]`.
pub fn unpatchify<S: Scalar>(
    tokens: &Tensor<S>,
    n_s: usize,
    n_d: usize,
) -> Result<Tensor<S>, ModelError> {
    let shape = tokens.shape();
    let consistent = shape.len() == 2
        && shape[0] > 0
        && n_s.is_multiple_of(shape[0])
        && shape[1] == (n_s / shape[0]) * n_d * 2;
    if !consistent {
        return Err(TensorError::ShapeMismatch {
            op: "unpatchify",
            left: shape.to_vec(),
            right: vec![n_s, n_d, 2],
        }
        .into());
    }
    Ok(tokens.clone().reshaped(vec![n_s, n_d, 2])?)
}

impl<S: Scalar> ModelWeights<S> {
    /// Weights with no entries, for incremental assembly in tests.
    pub fn empty(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        Ok(Self {
            config,
            entries: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn entries(&self) -> &BTreeMap<String, Tensor<S>> {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut BTreeMap<String, Tensor<S>> {
        &mut self.entries
    }

    /// Total element count across all parameter tensors.
    pub fn count_params(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Records one full forward pass on `tape`.
    ///
    /// Pipeline: conv → relu → conv → relu → dropout (training only) →
    /// patchify → embed → attention → optional SE gate → reconstruct →
    /// unpatchify → add the input back (global residual).
    pub fn forward_on_tape<R: Rng>(
        &self,
        tape: &mut Tape<S>,
        h_lr: &Tensor<S>,
        training: bool,
        rng: &mut R,
        params_require_grad: bool,
    ) -> Result<TapedForward, ModelError> {
        let cfg = &self.config;
        if h_lr.shape() != [cfg.n_s, cfg.n_d, 2] {
            return Err(TensorError::ShapeMismatch {
                op: "forward",
                left: h_lr.shape().to_vec(),
                right: vec![cfg.n_s, cfg.n_d, 2],
            }
            .into());
        }

        let mut params = BTreeMap::new();
        for (name, tensor) in &self.entries {
            let id = tape.input(&tensor.clone().with_requires_grad(params_require_grad));
            params.insert(name.clone(), id);
        }
        let get = |name: &str| -> Result<TensorId, ModelError> {
            params
                .get(name)
                .copied()
                .ok_or_else(|| ModelError::Format(format!("missing parameter: {name}")))
        };

        let input = tape.input(h_lr);
        let mut stages: Vec<(&'static str, Vec<usize>)> = Vec::new();
        let mut stage = |tape: &Tape<S>, label: &'static str, id: TensorId| {
            stages.push((label, tape.shape(id).to_vec()));
        };

        let c1 = tape.conv2d_same(input, get("conv1.kernel")?, get("conv1.bias")?)?;
        let a1 = tape.relu(c1);
        stage(tape, "conv1", a1);
        let c2 = tape.conv2d_same(a1, get("conv2.kernel")?, get("conv2.bias")?)?;
        let a2 = tape.relu(c2);
        stage(tape, "conv2", a2);
        let dropped = layers::dropout(tape, a2, cfg.dropout_rate, training, rng)?;
        let tokens = tape.reshape(dropped, vec![cfg.tokens(), cfg.token_len()])?;
        stage(tape, "patchify", tokens);
        let embedded = layers::dense(
            tape,
            tokens,
            &DenseParams {
                weight: get("embed.weight")?,
                bias: get("embed.bias")?,
            },
        )?;
        stage(tape, "embed", embedded);

        let mut wq = Vec::with_capacity(cfg.h);
        let mut wk = Vec::with_capacity(cfg.h);
        let mut wv = Vec::with_capacity(cfg.h);
        for j in 0..cfg.h {
            wq.push(get(&format!("mhsa.head{j}.wq"))?);
            wk.push(get(&format!("mhsa.head{j}.wk"))?);
            wv.push(get(&format!("mhsa.head{j}.wv"))?);
        }
        let attended = layers::mhsa(
            tape,
            embedded,
            &MhsaParams {
                wq,
                wk,
                wv,
                wo: get("mhsa.wo")?,
                bo: get("mhsa.bo")?,
                gamma: get("mhsa.gamma")?,
                beta: get("mhsa.beta")?,
            },
        )?;
        stage(tape, "mhsa", attended);

        let gated = if cfg.use_se {
            let g = layers::se_block(
                tape,
                attended,
                &SeParams {
                    w1: get("se.w1")?,
                    b1: get("se.b1")?,
                    w2: get("se.w2")?,
                    b2: get("se.b2")?,
                },
            )?;
            stage(tape, "se", g);
            g
        } else {
            attended
        };

        let recon = layers::dense(
            tape,
            gated,
            &DenseParams {
                weight: get("recon.weight")?,
                bias: get("recon.bias")?,
            },
        )?;
        stage(tape, "recon", recon);
        let grid = tape.reshape(recon, vec![cfg.n_s, cfg.n_d, 2])?;
        let output = tape.add(input, grid)?;
        stage(tape, "output", output);

        Ok(TapedForward {
            input,
            output,
            params,
            stages,
        })
    }

    /// One inference or training forward pass on a throwaway tape.
    pub fn forward<R: Rng>(
        &self,
        h_lr: &Tensor<S>,
        training: bool,
        rng: &mut R,
    ) -> Result<Tensor<S>, ModelError> {
        let mut tape = Tape::new();
        let pass = self.forward_on_tape(&mut tape, h_lr, training, rng, false)?;
        Ok(tape.tensor(pass.output))
    }
}

/// Analytic operation count for one forward pass, two per multiply-accumulate.
///
/// Per stage:
/// - convolution: `2·H·W·kh·kw·Cin·Cout` plus `H·W·Cout` bias adds and the
///   same again for ReLU
/// - dense: `2·rows·in·out` plus `rows·out` bias adds
/// - attention: the dense projections above, `2·N²·d_k·2·h` for the
///   Q·Kᵀ and attention·V products, `N²` scale and `N²` softmax per head,
///   `N·d` residual adds, `5·N·d` for layer normalization
/// - squeeze-and-excitation: `N·d` squeeze, the two dense maps with one
///   activation element each, `N·d` gate multiplies
/// - global residual: `N_S·N_D·2` adds
///
/// Dropout costs nothing at inference and is not counted.
pub fn count_flops(cfg: &ModelConfig) -> u64 {
    let (ns, nd) = (cfg.n_s as u64, cfg.n_d as u64);
    let n = cfg.tokens() as u64;
    let (d, h, dk) = (cfg.d as u64, cfg.h as u64, cfg.d_k() as u64);
    let len_in = cfg.token_len() as u64;
    let len_out = cfg.out_token_len() as u64;

    let conv = |kh: u64, kw: u64, cin: u64, cout: u64| {
        conv_mac_flops(ns, nd, kh, kw, cin, cout) + 2 * ns * nd * cout
    };
    let conv1 = conv(cfg.kernel1.0 as u64, cfg.kernel1.1 as u64, 2, cfg.c1 as u64);
    let conv2 = conv(
        cfg.kernel2.0 as u64,
        cfg.kernel2.1 as u64,
        cfg.c1 as u64,
        cfg.c as u64,
    );

    let embed = dense_flops(n, len_in, d);

    let qkv = 3 * h * dense_mac_flops(n, d, dk);
    let products = 2 * n * n * dk * 2 * h;
    let scale_and_softmax = 2 * h * n * n;
    let out_proj = dense_flops(n, h * dk, d);
    let residual = n * d;
    let lnorm = 5 * n * d;
    let mhsa = qkv + products + scale_and_softmax + out_proj + residual + lnorm;

    let se = if cfg.use_se {
        let bn = (cfg.d / cfg.r) as u64;
        n * d + dense_flops(1, d, bn) + bn + dense_flops(1, bn, d) + d + n * d
    } else {
        0
    };

    let recon = dense_flops(n, d, len_out);
    let global_residual = ns * nd * 2;

    conv1 + conv2 + embed + mhsa + se + recon + global_residual
}

/// Multiply-accumulate cost of a convolution: `2·H·W·kh·kw·Cin·Cout`.
pub fn conv_mac_flops(h: u64, w: u64, kh: u64, kw: u64, cin: u64, cout: u64) -> u64 {
    2 * h * w * kh * kw * cin * cout
}

/// Multiply-accumulate cost of a dense map: `2·rows·in·out`.
pub fn dense_mac_flops(rows: u64, input: u64, output: u64) -> u64 {
    2 * rows * input * output
}

/// Dense map cost including bias adds.
pub fn dense_flops(rows: u64, input: u64, output: u64) -> u64 {
    dense_mac_flops(rows, input, output) + rows * output
}

// ── weight file format ──────────────────────────────────────────────────
//
// "HELW1" magic (5 bytes), little-endian u32 entry count, then per entry:
// u16 name length, UTF-8 name, u8 rank, rank×u32 extents, raw 32-bit
// IEEE-754 little-endian values. Entries are sorted by name. No padding.

const WEIGHT_MAGIC: &[u8; 5] = b"HELW1";

/// Serializes weights to `path` in the `HELW1` format, f32 values.
pub fn save_weights<S: Scalar>(w: &ModelWeights<S>, path: &Path) -> Result<(), ModelError> {
    std::fs::write(path, weight_bytes(w))?;
    Ok(())
}

/// Encodes weights in the weight file format.
pub fn weight_bytes<S: Scalar>(w: &ModelWeights<S>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHT_MAGIC);
    out.extend_from_slice(&(w.entries.len() as u32).to_le_bytes());
    for (name, tensor) in &w.entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(tensor.rank() as u8);
        for &e in tensor.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&(v.into_f64() as f32).to_le_bytes());
        }
    }
    out
}

/// Reads a weight file and validates every name and shape against the
/// table implied by `config`. Nothing is returned on any mismatch.
pub fn load_weights<S: Scalar>(
    path: &Path,
    config: &ModelConfig,
) -> Result<ModelWeights<S>, ModelError> {
    config.validate()?;
    let bytes = std::fs::read(path)?;
    let mut cursor = bytes.as_slice();

    let magic = take(&mut cursor, WEIGHT_MAGIC.len())?;
    if magic != WEIGHT_MAGIC {
        return Err(ModelError::Format(format!(
            "bad magic bytes {magic:02x?}, expected {WEIGHT_MAGIC:02x?}"
        )));
    }
    let count = read_u32(&mut cursor)? as usize;
    let mut entries: BTreeMap<String, Tensor<S>> = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u16(&mut cursor)? as usize;
        let name = String::from_utf8(take(&mut cursor, name_len)?.to_vec())
            .map_err(|_| ModelError::Format("entry name is not UTF-8".into()))?;
        let rank = take(&mut cursor, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut cursor)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let raw = take(&mut cursor, numel * 4)?;
        for chunk in raw.chunks_exact(4) {
            let bits = u32::from_le_bytes(chunk.try_into().expect("chunk of 4"));
            data.push(S::from_f64(f32::from_bits(bits) as f64));
        }
        let tensor =
            Tensor::new(shape, data).map_err(|e| ModelError::Format(format!("{name}: {e}")))?;
        if entries.insert(name.clone(), tensor).is_some() {
            return Err(ModelError::Format(format!("duplicate entry: {name}")));
        }
    }
    if !cursor.is_empty() {
        return Err(ModelError::Format(format!(
            "{} trailing bytes after the last entry",
            cursor.len()
        )));
    }

    // Validate against the canonical table, reporting the first offender in
    // table order.
    let table = shape_table(config);
    for (name, shape, _) in &table {
        match entries.get(name) {
            None => return Err(ModelError::Format(format!("missing entry: {name}"))),
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(ModelError::Format(format!(
                    "{name}: file has shape {:?}, config requires {:?}",
                    t.shape(),
                    shape
                )));
            }
            Some(_) => {}
        }
    }
    if entries.len() != table.len() {
        let known: Vec<&String> = table.iter().map(|(n, _, _)| n).collect();
        let extra = entries
            .keys()
            .find(|k| !known.contains(k))
            .expect("count mismatch implies an unknown name");
        return Err(ModelError::Format(format!("unexpected entry: {extra}")));
    }

    Ok(ModelWeights {
        config: *config,
        entries,
    })
}

fn take<'b>(cursor: &mut &'b [u8], n: usize) -> Result<&'b [u8], ModelError> {
    if cursor.len() < n {
        return Err(ModelError::Format(format!(
            "unexpected end of file: wanted {n} more bytes, {} remain",
            cursor.len()
        )));
    }
    let (head, tail) = cursor.split_at(n);
    *cursor = tail;
    Ok(head)
}

fn read_u32(cursor: &mut &[u8]) -> Result<u32, ModelError> {
    Ok(u32::from_le_bytes(
        take(cursor, 4)?.try_into().expect("4 bytes"),
    ))
}

fn read_u16(cursor: &mut &[u8]) -> Result<u16, ModelError> {
    Ok(u16::from_le_bytes(
        take(cursor, 2)?.try_into().expect("2 bytes"),
    ))
}

/// One-line-per-entry description of the weight table, for run manifests.
pub fn describe_weights<S: Scalar>(w: &ModelWeights<S>) -> String {
    let mut out = String::new();
    for (name, t) in w.entries() {
        let _ = writeln!(out, "{name} {:?} ({} values)", t.shape(), t.numel());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_grad, max_rel_error, DEFAULT_STEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_grid(n_s: usize, n_d: usize, seed: u64) -> Tensor<f32> {
        let mut r = rng(seed);
        Tensor::from_fn(vec![n_s, n_d, 2], |_| r.gen::<f32>() * 2.0 - 1.0)
    }

    /// The end-to-end gradient check runs on this shrunken geometry so the
    /// finite-difference sweep stays fast.
    fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_s: 24,
            n_d: 4,
            c1: 2,
            c: 2,
            p: 6,
            d: 8,
            h: 2,
            r: 2,
            dropout_rate: 0.0,
            ..ModelConfig::default()
        }
    }

    // ── config ──────────────────────────────────────────────────────────

    #[test]
    fn default_config_is_valid() {
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn config_errors_name_the_field() {
        let cases: [(ModelConfig, &str); 4] = [
            (
                ModelConfig {
                    p: 5,
                    ..Default::default()
                },
                "p",
            ),
            (
                ModelConfig {
                    h: 5,
                    ..Default::default()
                },
                "h",
            ),
            (
                ModelConfig {
                    r: 5,
                    ..Default::default()
                },
                "r",
            ),
            (
                ModelConfig {
                    dropout_rate: 1.0,
                    ..Default::default()
                },
                "dropout_rate",
            ),
        ];
        for (cfg, field) in cases {
            match cfg.validate() {
                Err(ModelError::Config { field: f, .. }) => assert_eq!(f, field),
                other => panic!("expected config error for {field}, got {other:?}"),
            }
        }
    }

    // ── build and counting ──────────────────────────────────────────────

    #[test]
    fn default_build_has_the_pinned_parameter_count() {
        let w: ModelWeights<f32> = build(&ModelConfig::default(), &mut rng(1)).unwrap();
        let count = w.count_params();
        assert_eq!(count, 129_712);
        assert!((100_000..=140_000).contains(&count));
    }

    #[test]
    fn dropping_se_removes_exactly_its_parameters() {
        let with_se: ModelWeights<f32> = build(&ModelConfig::default(), &mut rng(1)).unwrap();
        let cfg = ModelConfig {
            use_se: false,
            ..Default::default()
        };
        let without: ModelWeights<f32> = build(&cfg, &mut rng(1)).unwrap();
        let d = 64;
        let bn = d / 4;
        assert_eq!(
            with_se.count_params() - without.count_params(),
            2 * d * bn + bn + d
        );
        assert_eq!(with_se.count_params() - without.count_params(), 2128);
    }

    #[test]
    fn build_is_seed_deterministic() {
        let a: ModelWeights<f32> = build(&ModelConfig::default(), &mut rng(9)).unwrap();
        let b: ModelWeights<f32> = build(&ModelConfig::default(), &mut rng(9)).unwrap();
        for (name, t) in a.entries() {
            assert_eq!(t.data(), b.entries()[name].data(), "{name} differs");
        }
        let c: ModelWeights<f32> = build(&ModelConfig::default(), &mut rng(10)).unwrap();
        assert_ne!(
            a.entries()["embed.weight"].data(),
            c.entries()["embed.weight"].data(),
            "different seeds must differ"
        );
    }

    #[test]
    fn count_params_is_zero_for_empty_weights() {
        let w = ModelWeights::<f32>::empty(ModelConfig::default()).unwrap();
        assert_eq!(w.count_params(), 0);
    }

    #[test]
    fn count_params_hand_case_single_dense() {
        let mut w = ModelWeights::<f32>::empty(ModelConfig::default()).unwrap();
        w.entries_mut()
            .insert("recon.weight".into(), Tensor::zeros(vec![64, 336]));
        w.entries_mut()
            .insert("recon.bias".into(), Tensor::zeros(vec![336]));
        assert_eq!(w.count_params(), 21_840);
    }

    // ── patchify / unpatchify ───────────────────────────────────────────

    #[test]
    fn patchify_default_geometry() {
        let grid = Tensor::<f32>::zeros(vec![612, 14, 8]);
        let tokens = patchify(&grid, 12).unwrap();
        assert_eq!(tokens.shape(), &[51, 1344]);
    }

    #[test]
    fn patchify_whole_grid_is_one_token() {
        let grid = Tensor::<f32>::zeros(vec![612, 14, 8]);
        let tokens = patchify(&grid, 612).unwrap();
        assert_eq!(tokens.shape(), &[1, 612 * 14 * 8]);
    }

    #[test]
    fn patchify_rejects_indivisible_height() {
        let grid = Tensor::<f32>::zeros(vec![612, 14, 8]);
        assert!(matches!(
            patchify(&grid, 13),
            Err(ModelError::Config { field: "p", .. })
        ));
    }

    #[test]
    fn patchify_unpatchify_round_trips() {
        let mut r = rng(21);
        let grid = Tensor::<f64>::from_fn(vec![612, 14, 2], |_| r.gen::<f64>());
        let tokens = patchify(&grid, 12).unwrap();
        assert_eq!(tokens.shape(), &[51, 336]);
        let back = unpatchify(&tokens, 612, 14).unwrap();
        assert_eq!(back.shape(), grid.shape());
        assert_eq!(back.data(), grid.data());
    }

    #[test]
    fn unpatchify_hand_geometry_and_zero_case() {
        let tokens = Tensor::<f32>::zeros(vec![51, 336]);
        let grid = unpatchify(&tokens, 612, 14).unwrap();
        assert_eq!(grid.shape(), &[612, 14, 2]);
        assert!(grid.data().iter().all(|&v| v == 0.0));

        let wrong = Tensor::<f32>::zeros(vec![51, 300]);
        assert!(unpatchify(&wrong, 612, 14).is_err());
    }

    // ── forward ─────────────────────────────────────────────────────────

    #[test]
    fn zero_weights_pass_the_input_through_exactly() {
        let mut w: ModelWeights<f32> = build(&ModelConfig::default(), &mut rng(2)).unwrap();
        for t in w.entries_mut().values_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let h_lr = rand_grid(612, 14, 3);
        let out = w.forward(&h_lr, false, &mut rng(0)).unwrap();
        assert_eq!(out.data(), h_lr.data(), "global residual passthrough");
    }

    #[test]
    fn forward_output_shape_and_inference_determinism() {
        let w: ModelWeights<f32> = build(&ModelConfig::default(), &mut rng(4)).unwrap();
        let h_lr = rand_grid(612, 14, 5);
        let out1 = w.forward(&h_lr, false, &mut rng(100)).unwrap();
        let out2 = w.forward(&h_lr, false, &mut rng(200)).unwrap();
        assert_eq!(out1.shape(), &[612, 14, 2]);
        assert_eq!(out1.data(), out2.data(), "inference ignores the rng");
    }

    #[test]
    fn forward_rejects_wrong_grid_shape() {
        let w: ModelWeights<f32> = build(&ModelConfig::default(), &mut rng(4)).unwrap();
        let bad = Tensor::<f32>::zeros(vec![612, 14, 3]);
        assert!(w.forward(&bad, false, &mut rng(0)).is_err());
    }

    #[test]
    fn stage_shapes_follow_the_documented_chain() {
        let w: ModelWeights<f32> = build(&ModelConfig::default(), &mut rng(6)).unwrap();
        let h_lr = rand_grid(612, 14, 7);
        let mut tape = Tape::new();
        let pass = w
            .forward_on_tape(&mut tape, &h_lr, false, &mut rng(0), false)
            .unwrap();
        let expected: Vec<(&str, Vec<usize>)> = vec![
            ("conv1", vec![612, 14, 8]),
            ("conv2", vec![612, 14, 8]),
            ("patchify", vec![51, 1344]),
            ("embed", vec![51, 64]),
            ("mhsa", vec![51, 64]),
            ("se", vec![51, 64]),
            ("recon", vec![51, 336]),
            ("output", vec![612, 14, 2]),
        ];
        let got: Vec<(&str, Vec<usize>)> =
            pass.stages.iter().map(|(l, s)| (*l, s.clone())).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn training_dropout_draws_from_the_rng() {
        let cfg = ModelConfig {
            dropout_rate: 0.5,
            ..tiny_config()
        };
        let w: ModelWeights<f32> = build(&cfg, &mut rng(8)).unwrap();
        let h_lr = rand_grid(cfg.n_s, cfg.n_d, 9);
        let a = w.forward(&h_lr, true, &mut rng(1)).unwrap();
        let b = w.forward(&h_lr, true, &mut rng(1)).unwrap();
        let c = w.forward(&h_lr, true, &mut rng(2)).unwrap();
        assert_eq!(a.data(), b.data(), "same rng stream, same mask");
        assert_ne!(a.data(), c.data(), "different rng stream, different mask");
    }

    #[test]
    fn se_forced_to_identity_matches_the_ablation() {
        let cfg = ModelConfig::default();
        let with_se: ModelWeights<f32> = build(&cfg, &mut rng(11)).unwrap();

        // Same weights, SE entries dropped, config flag off.
        let ablation_cfg = ModelConfig {
            use_se: false,
            ..cfg
        };
        let mut ablation = ModelWeights::<f32>::empty(ablation_cfg).unwrap();
        for (name, t) in with_se.entries() {
            if !name.starts_with("se.") {
                ablation.entries_mut().insert(name.clone(), t.clone());
            }
        }

        // Saturate the gate so e ≈ 1.
        let mut saturated = with_se.clone();
        saturated
            .entries_mut()
            .insert("se.w2".into(), Tensor::zeros(vec![16, 64]));
        saturated
            .entries_mut()
            .insert("se.b2".into(), Tensor::filled(vec![64], 20.0));

        let h_lr = rand_grid(612, 14, 12);
        let gated = saturated.forward(&h_lr, false, &mut rng(0)).unwrap();
        let plain = ablation.forward(&h_lr, false, &mut rng(0)).unwrap();
        for (a, b) in gated.data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let cfg = tiny_config();
        let w: ModelWeights<f64> = build(&cfg, &mut rng(31)).unwrap();
        let mut r = rng(32);
        let h_lr = Tensor::<f64>::from_fn(vec![cfg.n_s, cfg.n_d, 2], |_| r.gen::<f64>() - 0.5);
        let label = Tensor::<f64>::from_fn(vec![cfg.n_s, cfg.n_d, 2], |_| r.gen::<f64>() - 0.5);

        let mse = |tape: &mut Tape<f64>, out: TensorId, label_id: TensorId| {
            let diff = tape.sub(out, label_id).unwrap();
            let sq = tape.mul(diff, diff).unwrap();
            tape.mean(sq, None).unwrap()
        };

        let mut tape = Tape::new();
        let pass = w
            .forward_on_tape(&mut tape, &h_lr, false, &mut rng(0), true)
            .unwrap();
        let label_id = tape.input(&label);
        let loss = mse(&mut tape, pass.output, label_id);
        let grads = tape.backward(loss).unwrap();

        for (name, _) in shape_table(&cfg) {
            let analytic = grads.wrt(pass.params[&name]);
            let analytic = match analytic {
                Some(g) => g,
                None => panic!("no gradient for {name}"),
            };
            let numeric = finite_diff_grad(
                |probe| {
                    let mut w2 = w.clone();
                    w2.entries_mut().insert(name.clone(), probe.clone());
                    let mut t = Tape::new();
                    let p = w2
                        .forward_on_tape(&mut t, &h_lr, false, &mut rng(0), false)
                        .unwrap();
                    let lid = t.input(&label);
                    let l = mse(&mut t, p.output, lid);
                    t.value(l)[0]
                },
                &w.entries()[&name],
                DEFAULT_STEP,
            )
            .unwrap();
            let err = max_rel_error(analytic, &numeric);
            assert!(err < 1e-4, "{name}: max rel err {err:e}");
        }
    }

    fn shape_table(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        super::shape_table(cfg)
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect()
    }

    // ── flop counting ───────────────────────────────────────────────────

    #[test]
    fn conv_mac_flops_hand_case() {
        // 2×2 single-channel input through a 1×1 single-filter kernel:
        // four multiply-accumulates, eight operations.
        assert_eq!(conv_mac_flops(2, 2, 1, 1, 1, 1), 8);
    }

    #[test]
    fn dense_flops_hand_case() {
        assert_eq!(dense_mac_flops(51, 64, 336), 2_193_408);
        assert_eq!(dense_flops(51, 64, 336), 2_193_408 + 51 * 336);
    }

    #[test]
    fn default_flop_count_is_pinned_and_plausible() {
        let total = count_flops(&ModelConfig::default());
        assert_eq!(total, 66_312_008);
        // Published totals for this architecture land near 0.077e9; counting
        // conventions differ across profilers, so accept a factor of two.
        assert!(total > 77_000_000 / 2 && total < 77_000_000 * 2);
    }

    // ── serialization ───────────────────────────────────────────────────

    #[test]
    fn weights_round_trip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.weights");
        let w: ModelWeights<f32> = build(&ModelConfig::default(), &mut rng(41)).unwrap();
        save_weights(&w, &path).unwrap();
        let loaded: ModelWeights<f32> = load_weights(&path, &ModelConfig::default()).unwrap();
        assert_eq!(loaded.count_params(), w.count_params());
        for (name, t) in w.entries() {
            let l = &loaded.entries()[name];
            assert_eq!(l.shape(), t.shape());
            assert_eq!(l.data(), t.data(), "{name} not bit-identical");
        }
    }

    #[test]
    fn load_with_wrong_patch_height_names_the_embedding() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.weights");
        let w: ModelWeights<f32> = build(&ModelConfig::default(), &mut rng(42)).unwrap();
        save_weights(&w, &path).unwrap();
        let wrong = ModelConfig {
            p: 6,
            ..Default::default()
        };
        match load_weights::<f32>(&path, &wrong) {
            Err(ModelError::Format(msg)) => {
                assert!(msg.contains("embed.weight"), "message: {msg}")
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.weights");
        let w: ModelWeights<f32> = build(&ModelConfig::default(), &mut rng(43)).unwrap();
        let mut bytes = weight_bytes(&w);
        bytes[0] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_weights::<f32>(&path, &ModelConfig::default()),
            Err(ModelError::Format(_))
        ));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.weights");
        let w: ModelWeights<f32> = build(&ModelConfig::default(), &mut rng(44)).unwrap();
        let bytes = weight_bytes(&w);
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        match load_weights::<f32>(&path, &ModelConfig::default()) {
            Err(ModelError::Format(msg)) => {
                assert!(msg.contains("end of file"), "message: {msg}")
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
