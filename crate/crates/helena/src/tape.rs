//! Reverse-mode automatic differentiation on a recorded tape.
//!
//! A [`Tape`] owns every tensor of one forward pass in an arena, addressed by
//! [`TensorId`] handles. Each operation records its inputs and enough context
//! to replay its backward rule; [`Tape::backward`] walks the records once in
//! reverse order and accumulates gradients for every node that (transitively)
//! requires them.
//!
//! The tape is first-order and single-use: record a forward pass, call
//! `backward`, read the gradients, drop the tape. Training constructs a fresh
//! tape per sample.
//!
//! ## Operations
//!
//! Matrix product, "same"-padded 2-D cross-correlation, elementwise add /
//! subtract / multiply (with last-axis vector broadcast), ReLU, sigmoid,
//! numerically stable softmax over the last axis, mean/sum reductions,
//! layer normalization, reshape, 2-D transpose, last-axis concatenation,
//! scaling by a constant, and multiplication by a recorded constant mask
//! (the primitive behind dropout).

use crate::tensor::{Scalar, Tensor, TensorError};

/// Handle to a tensor recorded on a [`Tape`]. Valid only for the tape that
/// produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(usize);

/// Variance floor of layer normalization, shared by forward and backward.
pub const LAYERNORM_EPS: f64 = 1e-5;

enum Op<S: Scalar> {
    Leaf,
    Matmul {
        a: TensorId,
        b: TensorId,
    },
    Conv2dSame {
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    AddVec {
        a: TensorId,
        v: TensorId,
    },
    Sub {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    MulVec {
        a: TensorId,
        v: TensorId,
    },
    Scale {
        a: TensorId,
        c: S,
    },
    ConstMul {
        a: TensorId,
        mask: Vec<S>,
    },
    Relu {
        a: TensorId,
    },
    Sigmoid {
        a: TensorId,
    },
    SoftmaxLast {
        a: TensorId,
    },
    Reduce {
        a: TensorId,
        axis: Option<usize>,
        mean: bool,
    },
    Reshape {
        a: TensorId,
    },
    Transpose2d {
        a: TensorId,
    },
    ConcatLast {
        parts: Vec<TensorId>,
    },
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
    },
}

struct Node<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<S: Scalar> {
    entries: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss with respect to the given node, if that node
    /// participates in gradient flow.
    pub fn wrt(&self, id: TensorId) -> Option<&Tensor<S>> {
        self.entries.get(id.0).and_then(|e| e.as_ref())
    }
}

/// Arena of one forward pass plus the operation records for its backward.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    /// Copies a tensor onto the tape as a leaf. Gradient participation
    /// follows the tensor's `requires_grad` flag.
    pub fn input(&mut self, t: &Tensor<S>) -> TensorId {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: TensorId) -> &[S] {
        &self.nodes[id.0].data
    }

    /// Extracts a node's value as a standalone tensor.
    pub fn tensor(&self, id: TensorId) -> Tensor<S> {
        Tensor::new(
            self.nodes[id.0].shape.clone(),
            self.nodes[id.0].data.clone(),
        )
        .expect("node invariants guarantee a valid tensor")
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<S>, op: Op<S>, needs_grad: bool) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── forward operations ──────────────────────────────────────────────

    /// `c[i,j] = Σ_t a[i,t]·b[t,j]` for 2-D operands `[m×k]·[k×n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_kernel(self.value(a), self.value(b), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], data, Op::Matmul { a, b }, needs))
    }

    /// 2-D cross-correlation with "same" output extents.
    ///
    /// Input `[H×W×Cin]`, kernel `[kh×kw×Cin×Cout]`, bias `[Cout]`, output
    /// `[H×W×Cout]`. Padding per axis is `(k-1)/2` leading and the remainder
    /// trailing, so even kernels pad one more cell at the high edge.
    pub fn conv2d_same(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
    ) -> Result<TensorId, TensorError> {
        let (si, sk, sb) = (self.shape(input), self.shape(kernel), self.shape(bias));
        let channels_ok =
            si.len() == 3 && sk.len() == 4 && si[2] == sk[2] && sb.len() == 1 && sb[0] == sk[3];
        if !channels_ok {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d_same",
                left: si.to_vec(),
                right: sk.to_vec(),
            });
        }
        let dims = ConvDims::new(si, sk);
        let data = conv2d_forward(
            self.value(input),
            self.value(kernel),
            self.value(bias),
            &dims,
        );
        let needs = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(
            vec![dims.h, dims.w, dims.cout],
            data,
            Op::Conv2dSame {
                input,
                kernel,
                bias,
            },
            needs,
        ))
    }

    /// Elementwise sum. When `b` is a vector matching `a`'s last extent it is
    /// broadcast along that axis.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        match self.broadcast_kind("add", a, b)? {
            BroadcastKind::Equal => {
                let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
                let needs = self.needs(a) || self.needs(b);
                Ok(self.push(self.shape(a).to_vec(), data, Op::Add { a, b }, needs))
            }
            BroadcastKind::LastAxisVec => {
                let d = self.shape(b)[0];
                let data = broadcast_rows(self.value(a), self.value(b), d, |x, y| x + y);
                let needs = self.needs(a) || self.needs(b);
                Ok(self.push(self.shape(a).to_vec(), data, Op::AddVec { a, v: b }, needs))
            }
        }
    }

    /// Elementwise difference; shapes must match exactly.
    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "sub",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Sub { a, b }, needs))
    }

    /// Elementwise product, with the same vector broadcast rule as [`Tape::add`].
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        match self.broadcast_kind("mul", a, b)? {
            BroadcastKind::Equal => {
                let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
                let needs = self.needs(a) || self.needs(b);
                Ok(self.push(self.shape(a).to_vec(), data, Op::Mul { a, b }, needs))
            }
            BroadcastKind::LastAxisVec => {
                let d = self.shape(b)[0];
                let data = broadcast_rows(self.value(a), self.value(b), d, |x, y| x * y);
                let needs = self.needs(a) || self.needs(b);
                Ok(self.push(self.shape(a).to_vec(), data, Op::MulVec { a, v: b }, needs))
            }
        }
    }

    /// Multiplication by a compile-time-known constant.
    pub fn scale(&mut self, a: TensorId, c: S) -> TensorId {
        let data = self.value(a).iter().map(|&x| x * c).collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), data, Op::Scale { a, c }, needs)
    }

    /// Elementwise multiplication by a recorded constant mask (no gradient
    /// flows into the mask). The primitive behind inverted dropout.
    pub fn const_mul(&mut self, a: TensorId, mask: Vec<S>) -> Result<TensorId, TensorError> {
        if mask.len() != self.value(a).len() {
            return Err(TensorError::LengthMismatch {
                shape: self.shape(a).to_vec(),
                expected: self.value(a).len(),
                actual: mask.len(),
            });
        }
        let data = zip_map(self.value(a), &mask, |x, m| x * m);
        let needs = self.needs(a);
        Ok(self.push(
            self.shape(a).to_vec(),
            data,
            Op::ConstMul { a, mask },
            needs,
        ))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let z = S::zero();
        let data = self.value(a).iter().map(|&x| x.max(z)).collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), data, Op::Relu { a }, needs)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let one = S::one();
        let data = self
            .value(a)
            .iter()
            .map(|&x| one / (one + (-x).exp()))
            .collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), data, Op::Sigmoid { a }, needs)
    }

    /// Softmax over the last axis, stabilized by per-row max subtraction.
    pub fn softmax_lastaxis(&mut self, a: TensorId) -> TensorId {
        let d = *self.shape(a).last().expect("softmax needs rank >= 1");
        let mut data = self.value(a).to_vec();
        for row in data.chunks_mut(d) {
            softmax_row_in_place(row);
        }
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), data, Op::SoftmaxLast { a }, needs)
    }

    /// Mean over `axis`, or over all elements when `axis` is `None`
    /// (result shape `[1]`).
    pub fn mean(&mut self, a: TensorId, axis: Option<usize>) -> Result<TensorId, TensorError> {
        self.reduce(a, axis, true)
    }

    /// Sum over `axis`, or over all elements when `axis` is `None`.
    pub fn sum(&mut self, a: TensorId, axis: Option<usize>) -> Result<TensorId, TensorError> {
        self.reduce(a, axis, false)
    }

    fn reduce(
        &mut self,
        a: TensorId,
        axis: Option<usize>,
        mean: bool,
    ) -> Result<TensorId, TensorError> {
        let shape = self.shape(a).to_vec();
        let (out_shape, outer, mid, inner) = reduce_geometry(&shape, axis)?;
        let x = self.value(a);
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let src = &x[(o * mid + m) * inner..][..inner];
                let dst = &mut out[o * inner..][..inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        if mean {
            let inv = S::one() / S::from_f64(mid as f64);
            for v in &mut out {
                *v = *v * inv;
            }
        }
        let needs = self.needs(a);
        Ok(self.push(out_shape, out, Op::Reduce { a, axis, mean }, needs))
    }

    /// Reinterprets a node under a new shape with equal element count.
    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape(a).to_vec(),
                right: shape,
            });
        }
        let data = self.value(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(shape, data, Op::Reshape { a }, needs))
    }

    pub fn transpose2d(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose2d",
                left: s.to_vec(),
                right: s.to_vec(),
            });
        }
        let (m, n) = (s[0], s[1]);
        let x = self.value(a);
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(vec![n, m], out, Op::Transpose2d { a }, needs))
    }

    /// Concatenates 2-D nodes `[N×d_i]` along the last axis into `[N×Σd_i]`.
    pub fn concat_last(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        let first = *parts.first().ok_or(TensorError::ShapeMismatch {
            op: "concat_last (empty)",
            left: vec![],
            right: vec![],
        })?;
        let rows = self.shape(first)[0];
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_last",
                    left: self.shape(first).to_vec(),
                    right: s.to_vec(),
                });
            }
            total += s[1];
        }
        let mut out = vec![S::zero(); rows * total];
        let mut col = 0;
        for &p in parts {
            let d = self.shape(p)[1];
            let src = self.value(p);
            for r in 0..rows {
                out[r * total + col..r * total + col + d].copy_from_slice(&src[r * d..(r + 1) * d]);
            }
            col += d;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            vec![rows, total],
            out,
            Op::ConcatLast {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    /// Per-row normalization over the last axis:
    /// `(x - mean) / sqrt(var + eps) * gamma + beta` with biased variance and
    /// `eps` = [`LAYERNORM_EPS`].
    pub fn layernorm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
    ) -> Result<TensorId, TensorError> {
        let d = *self.shape(x).last().expect("layernorm needs rank >= 1");
        let gamma_ok = self.shape(gamma) == [d] && self.shape(beta) == [d];
        if !gamma_ok {
            return Err(TensorError::ShapeMismatch {
                op: "layernorm",
                left: self.shape(x).to_vec(),
                right: self.shape(gamma).to_vec(),
            });
        }
        let eps = S::from_f64(LAYERNORM_EPS);
        let inv_d = S::one() / S::from_f64(d as f64);
        let (g, b) = (self.value(gamma).to_vec(), self.value(beta).to_vec());
        let mut data = self.value(x).to_vec();
        for row in data.chunks_mut(d) {
            let mut mean = S::zero();
            for &v in row.iter() {
                mean = mean + v;
            }
            mean = mean * inv_d;
            let mut var = S::zero();
            for &v in row.iter() {
                let c = v - mean;
                var = var + c * c;
            }
            var = var * inv_d;
            let inv_std = S::one() / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv_std * g[j] + b[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            self.shape(x).to_vec(),
            data,
            Op::LayerNorm { x, gamma, beta },
            needs,
        ))
    }

    fn broadcast_kind(
        &self,
        op: &'static str,
        a: TensorId,
        b: TensorId,
    ) -> Result<BroadcastKind, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(BroadcastKind::Equal)
        } else if sb.len() == 1 && sa.last() == Some(&sb[0]) {
            Ok(BroadcastKind::LastAxisVec)
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            })
        }
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Walks the records once in reverse
    /// order; every node reachable from a `requires_grad` leaf receives a
    /// gradient.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients<S>, TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "backward (loss must be scalar)",
                left: self.shape(loss).to_vec(),
                right: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);

        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].take().expect("checked above");
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let entries = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.nodes[i].needs_grad).map(|data| {
                    Tensor::new(self.nodes[i].shape.clone(), data)
                        .expect("gradient shape mirrors node shape")
                })
            })
            .collect();
        Ok(Gradients { entries })
    }

    /// Adds this node's contribution to each input's gradient buffer.
    fn propagate(&self, idx: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    let ga = self.grad_buf(grads, *a);
                    let bv = self.value(*b);
                    // ga[i,t] += Σ_j g[i,j]·b[t,j]
                    for i in 0..m {
                        let g_row = &g[i * n..][..n];
                        let ga_row = &mut ga[i * k..][..k];
                        for (t, ga_e) in ga_row.iter_mut().enumerate() {
                            let b_row = &bv[t * n..][..n];
                            let mut acc = S::zero();
                            for (&ge, &be) in g_row.iter().zip(b_row) {
                                acc = acc + ge * be;
                            }
                            *ga_e = *ga_e + acc;
                        }
                    }
                }
                if self.needs(*b) {
                    let gb = self.grad_buf(grads, *b);
                    let av = self.value(*a);
                    // gb[t,j] += Σ_i a[i,t]·g[i,j]
                    for i in 0..m {
                        let g_row = &g[i * n..][..n];
                        for t in 0..k {
                            let a_it = av[i * k + t];
                            let gb_row = &mut gb[t * n..][..n];
                            for (gb_e, &ge) in gb_row.iter_mut().zip(g_row) {
                                *gb_e = *gb_e + a_it * ge;
                            }
                        }
                    }
                }
            }
            Op::Conv2dSame {
                input,
                kernel,
                bias,
            } => {
                let dims = ConvDims::new(self.shape(*input), self.shape(*kernel));
                if self.needs(*bias) {
                    let gb = self.grad_buf(grads, *bias);
                    for px in g.chunks(dims.cout) {
                        for (gb_e, &ge) in gb.iter_mut().zip(px) {
                            *gb_e = *gb_e + ge;
                        }
                    }
                }
                if self.needs(*kernel) {
                    let inp = self.value(*input);
                    let gk = self.grad_buf(grads, *kernel);
                    conv2d_backward_kernel(inp, g, gk, &dims);
                }
                if self.needs(*input) {
                    let ker = self.value(*kernel);
                    let gi = self.grad_buf(grads, *input);
                    conv2d_backward_input(ker, g, gi, &dims);
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    accumulate(self.grad_buf(grads, *a), g);
                }
                if self.needs(*b) {
                    accumulate(self.grad_buf(grads, *b), g);
                }
            }
            Op::AddVec { a, v } => {
                if self.needs(*a) {
                    accumulate(self.grad_buf(grads, *a), g);
                }
                if self.needs(*v) {
                    let d = self.shape(*v)[0];
                    let gv = self.grad_buf(grads, *v);
                    for row in g.chunks(d) {
                        for (gv_e, &ge) in gv.iter_mut().zip(row) {
                            *gv_e = *gv_e + ge;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.needs(*a) {
                    accumulate(self.grad_buf(grads, *a), g);
                }
                if self.needs(*b) {
                    let gb = self.grad_buf(grads, *b);
                    for (gb_e, &ge) in gb.iter_mut().zip(g) {
                        *gb_e = *gb_e - ge;
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let bv = self.value(*b).to_vec();
                    let ga = self.grad_buf(grads, *a);
                    for ((ga_e, &ge), be) in ga.iter_mut().zip(g).zip(bv) {
                        *ga_e = *ga_e + ge * be;
                    }
                }
                if self.needs(*b) {
                    let av = self.value(*a).to_vec();
                    let gb = self.grad_buf(grads, *b);
                    for ((gb_e, &ge), ae) in gb.iter_mut().zip(g).zip(av) {
                        *gb_e = *gb_e + ge * ae;
                    }
                }
            }
            Op::MulVec { a, v } => {
                let d = self.shape(*v)[0];
                if self.needs(*a) {
                    let vv = self.value(*v).to_vec();
                    let ga = self.grad_buf(grads, *a);
                    for (ga_row, g_row) in ga.chunks_mut(d).zip(g.chunks(d)) {
                        for ((ga_e, &ge), &ve) in ga_row.iter_mut().zip(g_row).zip(&vv) {
                            *ga_e = *ga_e + ge * ve;
                        }
                    }
                }
                if self.needs(*v) {
                    let av = self.value(*a);
                    let rows = av.len() / d;
                    let mut acc = vec![S::zero(); d];
                    for r in 0..rows {
                        let a_row = &av[r * d..][..d];
                        let g_row = &g[r * d..][..d];
                        for ((acc_e, &ge), &ae) in acc.iter_mut().zip(g_row).zip(a_row) {
                            *acc_e = *acc_e + ge * ae;
                        }
                    }
                    accumulate(self.grad_buf(grads, *v), &acc);
                }
            }
            Op::Scale { a, c } => {
                if self.needs(*a) {
                    let ga = self.grad_buf(grads, *a);
                    for (ga_e, &ge) in ga.iter_mut().zip(g) {
                        *ga_e = *ga_e + ge * *c;
                    }
                }
            }
            Op::ConstMul { a, mask } => {
                if self.needs(*a) {
                    let ga = self.grad_buf(grads, *a);
                    for ((ga_e, &ge), &me) in ga.iter_mut().zip(g).zip(mask) {
                        *ga_e = *ga_e + ge * me;
                    }
                }
            }
            Op::Relu { a } => {
                if self.needs(*a) {
                    let xv = self.value(*a).to_vec();
                    let ga = self.grad_buf(grads, *a);
                    let z = S::zero();
                    for ((ga_e, &ge), xe) in ga.iter_mut().zip(g).zip(xv) {
                        if xe > z {
                            *ga_e = *ga_e + ge;
                        }
                    }
                }
            }
            Op::Sigmoid { a } => {
                if self.needs(*a) {
                    let yv = node.data.clone();
                    let ga = self.grad_buf(grads, *a);
                    let one = S::one();
                    for ((ga_e, &ge), ye) in ga.iter_mut().zip(g).zip(yv) {
                        *ga_e = *ga_e + ge * ye * (one - ye);
                    }
                }
            }
            Op::SoftmaxLast { a } => {
                if self.needs(*a) {
                    let d = *node.shape.last().expect("rank >= 1");
                    let yv = node.data.clone();
                    let ga = self.grad_buf(grads, *a);
                    for ((ga_row, g_row), y_row) in
                        ga.chunks_mut(d).zip(g.chunks(d)).zip(yv.chunks(d))
                    {
                        let mut dot = S::zero();
                        for (&ge, &ye) in g_row.iter().zip(y_row) {
                            dot = dot + ge * ye;
                        }
                        for ((ga_e, &ge), &ye) in ga_row.iter_mut().zip(g_row).zip(y_row) {
                            *ga_e = *ga_e + ye * (ge - dot);
                        }
                    }
                }
            }
            Op::Reduce { a, axis, mean } => {
                if self.needs(*a) {
                    let shape = self.shape(*a).to_vec();
                    let (_, outer, mid, inner) =
                        reduce_geometry(&shape, *axis).expect("validated at record time");
                    let scale = if *mean {
                        S::one() / S::from_f64(mid as f64)
                    } else {
                        S::one()
                    };
                    let ga = self.grad_buf(grads, *a);
                    for o in 0..outer {
                        let g_seg = &g[o * inner..][..inner];
                        for m in 0..mid {
                            let dst = &mut ga[(o * mid + m) * inner..][..inner];
                            for (d_e, &ge) in dst.iter_mut().zip(g_seg) {
                                *d_e = *d_e + ge * scale;
                            }
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                if self.needs(*a) {
                    accumulate(self.grad_buf(grads, *a), g);
                }
            }
            Op::Transpose2d { a } => {
                if self.needs(*a) {
                    let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let ga = self.grad_buf(grads, *a);
                    // node shape is [n, m]; g[j,i] feeds ga[i,j]
                    for j in 0..n {
                        for i in 0..m {
                            ga[i * n + j] = ga[i * n + j] + g[j * m + i];
                        }
                    }
                }
            }
            Op::ConcatLast { parts } => {
                let rows = node.shape[0];
                let total = node.shape[1];
                let mut col = 0;
                for &p in parts {
                    let d = self.shape(p)[1];
                    if self.needs(p) {
                        let gp = self.grad_buf(grads, p);
                        for r in 0..rows {
                            let src = &g[r * total + col..][..d];
                            let dst = &mut gp[r * d..][..d];
                            for (d_e, &s_e) in dst.iter_mut().zip(src) {
                                *d_e = *d_e + s_e;
                            }
                        }
                    }
                    col += d;
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let d = *node.shape.last().expect("rank >= 1");
                let xv = self.value(*x);
                let gam = self.value(*gamma).to_vec();
                let eps = S::from_f64(LAYERNORM_EPS);
                let inv_d = S::one() / S::from_f64(d as f64);
                let rows = xv.len() / d;

                if self.needs(*beta) {
                    let gb = self.grad_buf(grads, *beta);
                    for g_row in g.chunks(d) {
                        for (gb_e, &ge) in gb.iter_mut().zip(g_row) {
                            *gb_e = *gb_e + ge;
                        }
                    }
                }

                // Both remaining inputs need the per-row normalized values.
                let mut xhat = vec![S::zero(); xv.len()];
                let mut inv_stds = vec![S::zero(); rows];
                for (r, (x_row, xh_row)) in xv.chunks(d).zip(xhat.chunks_mut(d)).enumerate() {
                    let mut mean = S::zero();
                    for &v in x_row {
                        mean = mean + v;
                    }
                    mean = mean * inv_d;
                    let mut var = S::zero();
                    for &v in x_row {
                        let c = v - mean;
                        var = var + c * c;
                    }
                    var = var * inv_d;
                    let inv_std = S::one() / (var + eps).sqrt();
                    inv_stds[r] = inv_std;
                    for (xh, &v) in xh_row.iter_mut().zip(x_row) {
                        *xh = (v - mean) * inv_std;
                    }
                }

                if self.needs(*gamma) {
                    let gg = self.grad_buf(grads, *gamma);
                    for (g_row, xh_row) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((gg_e, &ge), &xh) in gg.iter_mut().zip(g_row).zip(xh_row) {
                            *gg_e = *gg_e + ge * xh;
                        }
                    }
                }
                if self.needs(*x) {
                    let gx = self.grad_buf(grads, *x);
                    for (r, (g_row, xh_row)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        // dxhat = g∘γ; dx = inv_std·(dxhat − mean(dxhat) − xhat·mean(dxhat∘xhat))
                        let mut sum_dxhat = S::zero();
                        let mut sum_dxhat_xhat = S::zero();
                        for ((&ge, &ga_e), &xh) in g_row.iter().zip(&gam).zip(xh_row) {
                            let dxh = ge * ga_e;
                            sum_dxhat = sum_dxhat + dxh;
                            sum_dxhat_xhat = sum_dxhat_xhat + dxh * xh;
                        }
                        let mean_dxhat = sum_dxhat * inv_d;
                        let mean_dxhat_xhat = sum_dxhat_xhat * inv_d;
                        let gx_row = &mut gx[r * d..][..d];
                        for (((gx_e, &ge), &ga_e), &xh) in
                            gx_row.iter_mut().zip(g_row).zip(&gam).zip(xh_row)
                        {
                            let dxh = ge * ga_e;
                            *gx_e = *gx_e + inv_stds[r] * (dxh - mean_dxhat - xh * mean_dxhat_xhat);
                        }
                    }
                }
            }
        }
    }

    /// Gradient buffer for a node, created zero-filled on first touch.
    #[allow(clippy::mut_from_ref)]
    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<S>>], id: TensorId) -> &'g mut Vec<S> {
        grads[id.0].get_or_insert_with(|| vec![S::zero(); self.nodes[id.0].data.len()])
    }
}

enum BroadcastKind {
    Equal,
    LastAxisVec,
}

// ── kernels ─────────────────────────────────────────────────────────────

fn zip_map<S: Scalar>(a: &[S], b: &[S], f: impl Fn(S, S) -> S) -> Vec<S> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn broadcast_rows<S: Scalar>(a: &[S], v: &[S], d: usize, f: impl Fn(S, S) -> S) -> Vec<S> {
    let mut out = Vec::with_capacity(a.len());
    for row in a.chunks(d) {
        for (&x, &y) in row.iter().zip(v) {
            out.push(f(x, y));
        }
    }
    out
}

fn accumulate<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn matmul_kernel<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..][..k];
        let c_row = &mut c[i * n..][..n];
        for (t, &a_it) in a_row.iter().enumerate() {
            let b_row = &b[t * n..][..n];
            for (c_e, &b_e) in c_row.iter_mut().zip(b_row) {
                *c_e = *c_e + a_it * b_e;
            }
        }
    }
    c
}

fn softmax_row_in_place<S: Scalar>(row: &mut [S]) {
    let mut max = row[0];
    for &v in row.iter() {
        max = max.max(v);
    }
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = S::one() / sum;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

/// Shared geometry of a "same"-padded convolution.
struct ConvDims {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    pad_h: usize,
    pad_w: usize,
}

impl ConvDims {
    fn new(input_shape: &[usize], kernel_shape: &[usize]) -> Self {
        Self {
            h: input_shape[0],
            w: input_shape[1],
            cin: input_shape[2],
            kh: kernel_shape[0],
            kw: kernel_shape[1],
            cout: kernel_shape[3],
            pad_h: (kernel_shape[0] - 1) / 2,
            pad_w: (kernel_shape[1] - 1) / 2,
        }
    }

    /// Output rows `y` for which `y + off − pad` stays inside `extent`.
    fn valid(extent: usize, off: usize, pad: usize) -> (usize, usize, isize) {
        let shift = off as isize - pad as isize;
        let lo = (-shift).max(0) as usize;
        let hi = (extent as isize - shift).min(extent as isize).max(0) as usize;
        (lo, hi, shift)
    }
}

fn conv2d_forward<S: Scalar>(input: &[S], kernel: &[S], bias: &[S], d: &ConvDims) -> Vec<S> {
    let mut out = vec![S::zero(); d.h * d.w * d.cout];
    for px in out.chunks_mut(d.cout) {
        px.copy_from_slice(bias);
    }
    for dy in 0..d.kh {
        let (y0, y1, sy) = ConvDims::valid(d.h, dy, d.pad_h);
        for dx in 0..d.kw {
            let (x0, x1, sx) = ConvDims::valid(d.w, dx, d.pad_w);
            let ker_at = &kernel[(dy * d.kw + dx) * d.cin * d.cout..][..d.cin * d.cout];
            for y in y0..y1 {
                let iy = (y as isize + sy) as usize;
                for x in x0..x1 {
                    let ix = (x as isize + sx) as usize;
                    let in_px = &input[(iy * d.w + ix) * d.cin..][..d.cin];
                    let out_px = &mut out[(y * d.w + x) * d.cout..][..d.cout];
                    for (ci, &v) in in_px.iter().enumerate() {
                        let k_row = &ker_at[ci * d.cout..][..d.cout];
                        for (o, &k) in out_px.iter_mut().zip(k_row) {
                            *o = *o + v * k;
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward_kernel<S: Scalar>(input: &[S], g: &[S], gk: &mut [S], d: &ConvDims) {
    for dy in 0..d.kh {
        let (y0, y1, sy) = ConvDims::valid(d.h, dy, d.pad_h);
        for dx in 0..d.kw {
            let (x0, x1, sx) = ConvDims::valid(d.w, dx, d.pad_w);
            let gk_at = &mut gk[(dy * d.kw + dx) * d.cin * d.cout..][..d.cin * d.cout];
            for y in y0..y1 {
                let iy = (y as isize + sy) as usize;
                for x in x0..x1 {
                    let ix = (x as isize + sx) as usize;
                    let in_px = &input[(iy * d.w + ix) * d.cin..][..d.cin];
                    let g_px = &g[(y * d.w + x) * d.cout..][..d.cout];
                    for (ci, &v) in in_px.iter().enumerate() {
                        let gk_row = &mut gk_at[ci * d.cout..][..d.cout];
                        for (gk_e, &ge) in gk_row.iter_mut().zip(g_px) {
                            *gk_e = *gk_e + v * ge;
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_input<S: Scalar>(kernel: &[S], g: &[S], gi: &mut [S], d: &ConvDims) {
    for dy in 0..d.kh {
        let (y0, y1, sy) = ConvDims::valid(d.h, dy, d.pad_h);
        for dx in 0..d.kw {
            let (x0, x1, sx) = ConvDims::valid(d.w, dx, d.pad_w);
            let ker_at = &kernel[(dy * d.kw + dx) * d.cin * d.cout..][..d.cin * d.cout];
            for y in y0..y1 {
                let iy = (y as isize + sy) as usize;
                for x in x0..x1 {
                    let ix = (x as isize + sx) as usize;
                    let gi_px = &mut gi[(iy * d.w + ix) * d.cin..][..d.cin];
                    let g_px = &g[(y * d.w + x) * d.cout..][..d.cout];
                    for (ci, gi_e) in gi_px.iter_mut().enumerate() {
                        let k_row = &ker_at[ci * d.cout..][..d.cout];
                        let mut acc = S::zero();
                        for (&k, &ge) in k_row.iter().zip(g_px) {
                            acc = acc + k * ge;
                        }
                        *gi_e = *gi_e + acc;
                    }
                }
            }
        }
    }
}

fn reduce_geometry(
    shape: &[usize],
    axis: Option<usize>,
) -> Result<(Vec<usize>, usize, usize, usize), TensorError> {
    match axis {
        None => {
            let n: usize = shape.iter().product();
            Ok((vec![1], 1, n, 1))
        }
        Some(ax) => {
            if ax >= shape.len() {
                return Err(TensorError::InvalidAxis {
                    axis: ax,
                    shape: shape.to_vec(),
                });
            }
            let outer: usize = shape[..ax].iter().product();
            let mid = shape[ax];
            let inner: usize = shape[ax + 1..].iter().product();
            let mut out_shape: Vec<usize> = shape[..ax].to_vec();
            out_shape.extend_from_slice(&shape[ax + 1..]);
            if out_shape.is_empty() {
                out_shape.push(1);
            }
            Ok((out_shape, outer, mid, inner))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_grad, max_rel_error, DEFAULT_STEP};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    /// Reduces an arbitrary node to a scalar through a fixed pseudo-random
    /// weighting, so every output coordinate has a distinct sensitivity.
    fn weighted_sum(tape: &mut Tape<f64>, id: TensorId) -> TensorId {
        let n = tape.value(id).len();
        let weights: Vec<f64> = (0..n)
            .map(|i| ((i * 2654435761 + 12345) % 1000) as f64 / 500.0 - 1.0)
            .collect();
        let weighted = tape.const_mul(id, weights).unwrap();
        tape.sum(weighted, None).unwrap()
    }

    /// Checks the tape gradient of a recorded graph against central finite
    /// differences, for gradients with respect to each provided leaf.
    fn grad_check(inputs: &[Tensor<f64>], build: impl Fn(&mut Tape<f64>, &[TensorId]) -> TensorId) {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = inputs
            .iter()
            .map(|t| tape.input(&t.clone().with_requires_grad(true)))
            .collect();
        let loss = build(&mut tape, &ids);
        let grads = tape.backward(loss).unwrap();

        for probe in 0..inputs.len() {
            let numeric = finite_diff_grad(
                |x| {
                    let mut t = Tape::new();
                    let ids: Vec<TensorId> = inputs
                        .iter()
                        .enumerate()
                        .map(|(i, orig)| t.input(if i == probe { x } else { orig }))
                        .collect();
                    let l = build(&mut t, &ids);
                    t.value(l)[0]
                },
                &inputs[probe],
                DEFAULT_STEP,
            )
            .unwrap();
            let analytic = grads.wrt(ids[probe]).unwrap();
            let err = max_rel_error(analytic, &numeric);
            assert!(
                err < 1e-4,
                "gradient mismatch on input {probe}: max rel err {err:e}"
            );
        }
    }

    // ── frozen value examples ───────────────────────────────────────────

    #[test]
    fn matmul_hand_values() {
        let mut tape = Tape::<f64>::new();
        let a = tape.input(&Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let b = tape.input(&Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[11.0]);

        let x = tape.input(&Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let eye = tape.input(&Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let left = tape.matmul(eye, x).unwrap();
        let right = tape.matmul(x, eye).unwrap();
        assert_eq!(tape.value(left), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(tape.value(right), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.input(&Tensor::zeros(vec![2, 3]));
        let b = tape.input(&Tensor::zeros(vec![4, 5]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("[2, 3]") && msg.contains("[4, 5]"),
            "message: {msg}"
        );
    }

    #[test]
    fn conv_scaling_kernel_doubles_everything() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(&Tensor::from_fn(vec![4, 4, 1], |i| i as f64));
        let k = tape.input(&Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap());
        let b = tape.input(&Tensor::zeros(vec![1]));
        let y = tape.conv2d_same(x, k, b).unwrap();
        assert_eq!(tape.shape(y), &[4, 4, 1]);
        for (i, &v) in tape.value(y).iter().enumerate() {
            assert_eq!(v, 2.0 * i as f64);
        }
    }

    #[test]
    fn conv_overlap_counts_on_all_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(&Tensor::filled(vec![3, 3, 1], 1.0));
        let k = tape.input(&Tensor::filled(vec![3, 3, 1, 1], 1.0));
        let b = tape.input(&Tensor::zeros(vec![1]));
        let y = tape.conv2d_same(x, k, b).unwrap();
        let v = tape.value(y);
        assert_eq!(v[4], 9.0, "center counts all nine overlaps");
        assert_eq!(v[0], 4.0, "corner counts four overlaps");
        assert_eq!(v[8], 4.0);
    }

    #[test]
    fn conv_even_kernel_pads_more_at_trailing_edge() {
        // 1-D case: width-2 kernel pads nothing before, one zero after.
        let mut tape = Tape::<f64>::new();
        let x = tape.input(&Tensor::new(vec![1, 5, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
        let k = tape.input(&Tensor::new(vec![1, 2, 1, 1], vec![1.0, 1.0]).unwrap());
        let b = tape.input(&Tensor::zeros(vec![1]));
        let y = tape.conv2d_same(x, k, b).unwrap();
        assert_eq!(tape.value(y), &[3.0, 5.0, 7.0, 9.0, 5.0]);
    }

    #[test]
    fn conv_preserves_grid_extents_for_model_kernels() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(&Tensor::filled(vec![612, 14, 2], 0.5));
        let k = tape.input(&Tensor::filled(vec![12, 2, 2, 8], 0.01));
        let b = tape.input(&Tensor::zeros(vec![8]));
        let y = tape.conv2d_same(x, k, b).unwrap();
        assert_eq!(tape.shape(y), &[612, 14, 8]);

        let k2 = tape.input(&Tensor::filled(vec![6, 7, 8, 8], 0.01));
        let b2 = tape.input(&Tensor::zeros(vec![8]));
        let y2 = tape.conv2d_same(y, k2, b2).unwrap();
        assert_eq!(tape.shape(y2), &[612, 14, 8]);
    }

    #[test]
    fn conv_channel_mismatch_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(&Tensor::zeros(vec![4, 4, 3]));
        let k = tape.input(&Tensor::zeros(vec![3, 3, 2, 5]));
        let b = tape.input(&Tensor::zeros(vec![5]));
        assert!(matches!(
            tape.conv2d_same(x, k, b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(&Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = tape.relu(x);
        assert_eq!(tape.value(r), &[0.0, 0.0, 2.0]);

        let z = tape.input(&Tensor::scalar(0.0));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s), &[0.5]);
    }

    #[test]
    fn softmax_hand_values() {
        let mut tape = Tape::<f64>::new();
        let a = tape.input(&Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let sa = tape.softmax_lastaxis(a);
        assert_eq!(tape.value(sa), &[0.5, 0.5]);

        // Stability: large equal logits must not overflow.
        let b = tape.input(&Tensor::new(vec![2], vec![1000.0, 1000.0]).unwrap());
        let sb = tape.softmax_lastaxis(b);
        assert_eq!(tape.value(sb), &[0.5, 0.5]);

        let c = tape.input(&Tensor::new(vec![2], vec![0.0, 3.0f64.ln()]).unwrap());
        let sc = tape.softmax_lastaxis(c);
        assert!((tape.value(sc)[0] - 0.25).abs() < 1e-12);
        assert!((tape.value(sc)[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn reduce_hand_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(&Tensor::new(vec![2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        let m0 = tape.mean(x, Some(0)).unwrap();
        assert_eq!(tape.shape(m0), &[2]);
        assert_eq!(tape.value(m0), &[3.0, 5.0]);

        let zeros = tape.input(&Tensor::zeros(vec![4, 3]));
        let s = tape.sum(zeros, None).unwrap();
        assert_eq!(tape.value(s), &[0.0]);

        let tokens = tape.input(&Tensor::zeros(vec![51, 64]));
        let pooled = tape.mean(tokens, Some(0)).unwrap();
        assert_eq!(tape.shape(pooled), &[64]);

        let err = tape.mean(x, Some(2)).unwrap_err();
        assert!(matches!(err, TensorError::InvalidAxis { axis: 2, .. }));
    }

    #[test]
    fn add_broadcasts_last_axis_vector() {
        let mut tape = Tape::<f64>::new();
        let a = tape.input(&Tensor::new(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
        let v = tape.input(&Tensor::new(vec![3], vec![10.0, 20.0, 30.0]).unwrap());
        let y = tape.add(a, v).unwrap();
        assert_eq!(tape.value(y), &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);

        let bad = tape.input(&Tensor::zeros(vec![2]));
        assert!(tape.add(a, bad).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(&Tensor::zeros(vec![2, 2]).with_requires_grad(true));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn gradient_accumulates_over_multiple_uses() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(&Tensor::scalar(1.5).with_requires_grad(true));
        let y = tape.add(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn mean_of_relu_hand_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(
            &Tensor::new(vec![2], vec![-1.0, 1.0])
                .unwrap()
                .with_requires_grad(true),
        );
        let r = tape.relu(x);
        let loss = tape.mean(r, None).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.0, 0.5]);
    }

    #[test]
    fn add_gradient_is_one_everywhere() {
        grad_check(
            &[rand_tensor(&[3, 4], 11), rand_tensor(&[3, 4], 12)],
            |t, ids| {
                let y = t.add(ids[0], ids[1]).unwrap();
                t.sum(y, None).unwrap()
            },
        );
        // Direct check of the constant-one property.
        let mut tape = Tape::<f64>::new();
        let a = tape.input(&rand_tensor(&[5], 13).with_requires_grad(true));
        let b = tape.input(&rand_tensor(&[5], 14).with_requires_grad(true));
        let y = tape.add(a, b).unwrap();
        let loss = tape.sum(y, None).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.wrt(a).unwrap().iter().all(|&v| v == 1.0));
        assert!(grads.wrt(b).unwrap().iter().all(|&v| v == 1.0));
    }

    // ── finite-difference oracle checks, one per differentiable op ──────

    #[test]
    fn matmul_gradient_matches_oracle() {
        grad_check(
            &[rand_tensor(&[5, 7], 21), rand_tensor(&[7, 3], 22)],
            |t, ids| {
                let y = t.matmul(ids[0], ids[1]).unwrap();
                weighted_sum(t, y)
            },
        );
    }

    #[test]
    fn conv2d_gradient_matches_oracle() {
        // Odd kernel extents.
        grad_check(
            &[
                rand_tensor(&[6, 5, 2], 31),
                rand_tensor(&[3, 3, 2, 3], 32),
                rand_tensor(&[3], 33),
            ],
            |t, ids| {
                let y = t.conv2d_same(ids[0], ids[1], ids[2]).unwrap();
                weighted_sum(t, y)
            },
        );
        // Even kernel extents exercise the asymmetric padding.
        grad_check(
            &[
                rand_tensor(&[8, 4, 1], 34),
                rand_tensor(&[4, 2, 1, 2], 35),
                rand_tensor(&[2], 36),
            ],
            |t, ids| {
                let y = t.conv2d_same(ids[0], ids[1], ids[2]).unwrap();
                weighted_sum(t, y)
            },
        );
    }

    #[test]
    fn elementwise_gradients_match_oracle() {
        grad_check(
            &[rand_tensor(&[4, 3], 41), rand_tensor(&[4, 3], 42)],
            |t, ids| {
                let y = t.mul(ids[0], ids[1]).unwrap();
                weighted_sum(t, y)
            },
        );
        grad_check(
            &[rand_tensor(&[4, 3], 43), rand_tensor(&[4, 3], 44)],
            |t, ids| {
                let y = t.sub(ids[0], ids[1]).unwrap();
                weighted_sum(t, y)
            },
        );
        grad_check(
            &[rand_tensor(&[4, 3], 45), rand_tensor(&[3], 46)],
            |t, ids| {
                let y = t.add(ids[0], ids[1]).unwrap();
                weighted_sum(t, y)
            },
        );
        grad_check(
            &[rand_tensor(&[4, 3], 47), rand_tensor(&[3], 48)],
            |t, ids| {
                let y = t.mul(ids[0], ids[1]).unwrap();
                weighted_sum(t, y)
            },
        );
        grad_check(&[rand_tensor(&[6], 49)], |t, ids| {
            let y = t.scale(ids[0], -1.7);
            weighted_sum(t, y)
        });
    }

    #[test]
    fn activation_gradients_match_oracle() {
        // Keep inputs away from the ReLU kink at 0, where the one-sided
        // derivative makes finite differences disagree by construction.
        let mut x = rand_tensor(&[5, 4], 51);
        for v in x.data_mut() {
            if v.abs() < 0.05 {
                *v += 0.1;
            }
        }
        grad_check(&[x], |t, ids| {
            let y = t.relu(ids[0]);
            weighted_sum(t, y)
        });
        grad_check(&[rand_tensor(&[5, 4], 52)], |t, ids| {
            let y = t.sigmoid(ids[0]);
            weighted_sum(t, y)
        });
    }

    #[test]
    fn softmax_gradient_matches_oracle() {
        grad_check(&[rand_tensor(&[4, 6], 61)], |t, ids| {
            let y = t.softmax_lastaxis(ids[0]);
            weighted_sum(t, y)
        });
    }

    #[test]
    fn reduction_gradients_match_oracle() {
        for axis in [None, Some(0), Some(1), Some(2)] {
            grad_check(&[rand_tensor(&[3, 4, 2], 71)], |t, ids| {
                let y = t.mean(ids[0], axis).unwrap();
                weighted_sum(t, y)
            });
            grad_check(&[rand_tensor(&[3, 4, 2], 72)], |t, ids| {
                let y = t.sum(ids[0], axis).unwrap();
                weighted_sum(t, y)
            });
        }
    }

    #[test]
    fn structural_op_gradients_match_oracle() {
        grad_check(&[rand_tensor(&[3, 8], 81)], |t, ids| {
            let y = t.reshape(ids[0], vec![4, 6]).unwrap();
            weighted_sum(t, y)
        });
        grad_check(&[rand_tensor(&[3, 5], 82)], |t, ids| {
            let y = t.transpose2d(ids[0]).unwrap();
            weighted_sum(t, y)
        });
        grad_check(
            &[rand_tensor(&[4, 2], 83), rand_tensor(&[4, 3], 84)],
            |t, ids| {
                let y = t.concat_last(ids).unwrap();
                weighted_sum(t, y)
            },
        );
        grad_check(&[rand_tensor(&[4, 5], 85)], |t, ids| {
            let mask: Vec<f64> = (0..20)
                .map(|i| if i % 3 == 0 { 0.0 } else { 1.25 })
                .collect();
            let y = t.const_mul(ids[0], mask).unwrap();
            weighted_sum(t, y)
        });
    }

    #[test]
    fn layernorm_gradient_matches_oracle() {
        grad_check(
            &[
                rand_tensor(&[3, 6], 91),
                rand_tensor(&[6], 92),
                rand_tensor(&[6], 93),
            ],
            |t, ids| {
                let y = t.layernorm(ids[0], ids[1], ids[2]).unwrap();
                weighted_sum(t, y)
            },
        );
    }

    #[test]
    fn composite_graph_gradient_matches_oracle() {
        // A miniature of the real network: conv, relu, reshape, matmul,
        // softmax-attention style product, reduction.
        grad_check(
            &[
                rand_tensor(&[4, 3, 2], 101),
                rand_tensor(&[2, 2, 2, 2], 102),
                rand_tensor(&[2], 103),
                rand_tensor(&[6, 4], 104),
            ],
            |t, ids| {
                let c = t.conv2d_same(ids[0], ids[1], ids[2]).unwrap();
                let r = t.relu(c);
                let flat = t.reshape(r, vec![4, 6]).unwrap();
                let e = t.matmul(flat, ids[3]).unwrap();
                let et = t.transpose2d(e).unwrap();
                let scores = t.matmul(e, et).unwrap();
                let attn = t.softmax_lastaxis(scores);
                let out = t.matmul(attn, e).unwrap();
                weighted_sum(t, out)
            },
        );
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            rows in 1usize..5, cols in 1usize..7, seed in 0u64..1000, shift in -50.0f64..50.0
        ) {
            let x = rand_tensor(&[rows, cols], seed);
            let mut tape = Tape::<f64>::new();
            let a = tape.input(&x);
            let s = tape.softmax_lastaxis(a);
            for row in tape.value(s).chunks(cols) {
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
            }
            let shifted = Tensor::from_fn(vec![rows, cols], |i| x.data()[i] + shift);
            let b = tape.input(&shifted);
            let s2 = tape.softmax_lastaxis(b);
            for (v1, v2) in tape.value(s).iter().zip(tape.value(s2)) {
                prop_assert!((v1 - v2).abs() < 1e-6);
            }
        }

        #[test]
        fn reshape_and_transpose_preserve_multiset(seed in 0u64..1000) {
            let x = rand_tensor(&[3, 4], seed);
            let mut tape = Tape::<f64>::new();
            let a = tape.input(&x);
            let r = tape.reshape(a, vec![2, 6]).unwrap();
            prop_assert_eq!(tape.value(r), x.data());
            let tr = tape.transpose2d(a).unwrap();
            let back = tape.transpose2d(tr).unwrap();
            prop_assert_eq!(tape.value(back), x.data());
        }
    }
}
