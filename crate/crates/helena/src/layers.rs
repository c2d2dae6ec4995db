//! Neural network building blocks recorded on a [`Tape`].
//!
//! Each layer is a free function that appends operations to a tape and
//! returns the output handle. Parameters are ordinary tape leaves grouped in
//! small handle structs, so one set of weight tensors can be replayed onto a
//! fresh tape every forward pass.
//!
//! Provided layers: affine [`dense`], [`layernorm`], inverted [`dropout`],
//! multi-head self-attention [`mhsa`] (post-norm residual, no positional
//! encoding), and the squeeze-and-excitation gate [`se_block`].

use rand::Rng;

use crate::tape::{Tape, TensorId};
use crate::tensor::{Scalar, TensorError};

/// Affine map along the last axis: weight `[in×out]`, bias `[out]`.
#[derive(Clone, Copy, Debug)]
pub struct DenseParams {
    pub weight: TensorId,
    pub bias: TensorId,
}

/// Multi-head self-attention parameters.
///
/// One query/key/value projection `[d×d_k]` per head, a shared output
/// projection `[h·d_k×d]` with bias `[d]`, and the gain/offset `[d]` of the
/// closing layer normalization. `h·d_k` must equal `d`.
#[derive(Clone, Debug)]
pub struct MhsaParams {
    pub wq: Vec<TensorId>,
    pub wk: Vec<TensorId>,
    pub wv: Vec<TensorId>,
    pub wo: TensorId,
    pub bo: TensorId,
    pub gamma: TensorId,
    pub beta: TensorId,
}

/// Squeeze-and-excitation parameters: `w1 [d×d/r]`, `w2 [d/r×d]` with their
/// biases. The bottleneck extent `d/r` must divide evenly into `d`.
#[derive(Clone, Copy, Debug)]
pub struct SeParams {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

/// `y = x·W + b` along the last axis of `x`, preserving leading extents.
pub fn dense<S: Scalar>(
    tape: &mut Tape<S>,
    x: TensorId,
    p: &DenseParams,
) -> Result<TensorId, TensorError> {
    let x_shape = tape.shape(x).to_vec();
    let w_shape = tape.shape(p.weight).to_vec();
    let b_shape = tape.shape(p.bias).to_vec();
    let in_dim = *x_shape.last().expect("tensors have rank >= 1");
    let params_ok = w_shape.len() == 2 && b_shape.len() == 1 && b_shape[0] == w_shape[1];
    if !params_ok || w_shape[0] != in_dim {
        return Err(TensorError::ShapeMismatch {
            op: "dense",
            left: x_shape,
            right: w_shape,
        });
    }
    let out_dim = w_shape[1];
    let rows: usize = x_shape[..x_shape.len() - 1]
        .iter()
        .product::<usize>()
        .max(1);

    let flat = if x_shape.len() == 2 {
        x
    } else {
        tape.reshape(x, vec![rows, in_dim])?
    };
    let product = tape.matmul(flat, p.weight)?;
    let biased = tape.add(product, p.bias)?;
    if x_shape.len() == 2 {
        return Ok(biased);
    }
    let mut out_shape: Vec<usize> = x_shape[..x_shape.len() - 1].to_vec();
    out_shape.push(out_dim);
    tape.reshape(biased, out_shape)
}

/// Per-row normalization over the last axis with learnable gain and offset.
pub fn layernorm<S: Scalar>(
    tape: &mut Tape<S>,
    x: TensorId,
    gamma: TensorId,
    beta: TensorId,
) -> Result<TensorId, TensorError> {
    tape.layernorm(x, gamma, beta)
}

/// Inverted dropout: while training, each element is zeroed independently
/// with probability `rate` and survivors are scaled by `1/(1-rate)`. With
/// `training = false` or `rate = 0` the input handle is returned unchanged,
/// so inference is the exact identity.
pub fn dropout<S: Scalar, R: Rng>(
    tape: &mut Tape<S>,
    x: TensorId,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<TensorId, TensorError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::InvalidParameter {
            name: "dropout rate",
            value: rate,
            requirement: "0 <= rate < 1",
        });
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep_scale = S::from_f64(1.0 / (1.0 - rate));
    let mask: Vec<S> = (0..tape.value(x).len())
        .map(|_| {
            if rng.gen::<f64>() < rate {
                S::zero()
            } else {
                keep_scale
            }
        })
        .collect();
    tape.const_mul(x, mask)
}

/// Multi-head self-attention with post-norm residual:
/// `LayerNorm(Z + Concat(head_1..head_h)·W^O + b^O)` where
/// `head_j = softmax(Q_j·K_jᵀ/√d_k)·V_j`.
///
/// Token order carries no positional information, so the operation is
/// permutation-equivariant over rows of `z`.
pub fn mhsa<S: Scalar>(
    tape: &mut Tape<S>,
    z: TensorId,
    p: &MhsaParams,
) -> Result<TensorId, TensorError> {
    let z_shape = tape.shape(z).to_vec();
    if z_shape.len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "mhsa (tokens must be [N×d])",
            left: z_shape,
            right: vec![],
        });
    }
    let d = z_shape[1];
    let h = p.wq.len();
    if h == 0 || p.wk.len() != h || p.wv.len() != h {
        return Err(TensorError::ShapeMismatch {
            op: "mhsa (head counts differ across Q/K/V)",
            left: vec![p.wq.len(), p.wk.len(), p.wv.len()],
            right: vec![h, h, h],
        });
    }
    let d_k = tape.shape(p.wq[0])[1];
    if d_k * h != d {
        return Err(TensorError::InvalidParameter {
            name: "mhsa head width",
            value: (d_k * h) as f64,
            requirement: "d_k multiplied by head count must equal d",
        });
    }
    for &w in p.wq.iter().chain(&p.wk).chain(&p.wv) {
        if tape.shape(w) != [d, d_k] {
            return Err(TensorError::ShapeMismatch {
                op: "mhsa (projection)",
                left: tape.shape(w).to_vec(),
                right: vec![d, d_k],
            });
        }
    }

    let inv_sqrt_dk = S::from_f64(1.0 / (d_k as f64).sqrt());
    let mut heads = Vec::with_capacity(h);
    for j in 0..h {
        let q = tape.matmul(z, p.wq[j])?;
        let k = tape.matmul(z, p.wk[j])?;
        let v = tape.matmul(z, p.wv[j])?;
        let kt = tape.transpose2d(k)?;
        let scores = tape.matmul(q, kt)?;
        let scaled = tape.scale(scores, inv_sqrt_dk);
        let attn = tape.softmax_lastaxis(scaled);
        heads.push(tape.matmul(attn, v)?);
    }
    let concat = tape.concat_last(&heads)?;
    let projected = tape.matmul(concat, p.wo)?;
    let biased = tape.add(projected, p.bo)?;
    let residual = tape.add(z, biased)?;
    tape.layernorm(residual, p.gamma, p.beta)
}

/// Squeeze-and-excitation over tokens: the token mean is squeezed through a
/// bottleneck (`relu` then `sigmoid`) into one excitation vector `e`, and
/// every token is scaled elementwise by that shared `e`.
pub fn se_block<S: Scalar>(
    tape: &mut Tape<S>,
    z_att: TensorId,
    p: &SeParams,
) -> Result<TensorId, TensorError> {
    let z_shape = tape.shape(z_att).to_vec();
    if z_shape.len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "se_block (tokens must be [N×d])",
            left: z_shape,
            right: vec![],
        });
    }
    let d = z_shape[1];
    let w1_shape = tape.shape(p.w1).to_vec();
    let w2_shape = tape.shape(p.w2).to_vec();
    let bottleneck = w1_shape[1];
    let shapes_ok = w1_shape == [d, bottleneck] && w2_shape == [bottleneck, d];
    if !shapes_ok || !d.is_multiple_of(bottleneck) {
        return Err(TensorError::InvalidParameter {
            name: "se_block reduction",
            value: bottleneck as f64,
            requirement: "bottleneck extent must divide d and match both weights",
        });
    }

    let s = tape.mean(z_att, Some(0))?;
    let s_row = tape.reshape(s, vec![1, d])?;
    let squeezed = tape.matmul(s_row, p.w1)?;
    let squeezed_b = tape.add(squeezed, p.b1)?;
    let hidden = tape.relu(squeezed_b);
    let expanded = tape.matmul(hidden, p.w2)?;
    let expanded_b = tape.add(expanded, p.b2)?;
    let gate = tape.sigmoid(expanded_b);
    let e = tape.reshape(gate, vec![d])?;
    tape.mul(z_att, e)
}
