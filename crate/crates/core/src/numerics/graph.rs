//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its variables. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and returns
//! the gradient of a scalar with respect to every node that requires one.
//! Graphs are cheap to build and are meant to be thrown away after each
//! training step or inference call.

use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use super::NumericsError;
use crate::ctc;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Sigmoid(Var),
    Silu(Var),
    DepthwiseConv {
        x: Var,
        kernel: Var,
        bias: Var,
        out_start: usize,
        limits: Vec<usize>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    MaskedFill {
        x: Var,
        mask: Vec<bool>,
    },
    Sum(Var),
    Mean(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
    CtcLoss {
        log_probs: Var,
        grad: Option<Vec<f64>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

/// Computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    no_grad: bool,
}

fn mismatch(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        sum += *d;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

fn log_softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + src.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = s - lse;
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that records values only; nothing on it requires gradients.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            no_grad: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = !self.no_grad && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(Arc::new(value), op, requires_grad)
    }

    fn push_node(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let rg = requires_grad && !self.no_grad;
        self.push_node(Arc::new(value), Op::Leaf, rg)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Shares a parameter's value with the graph without copying it.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.shared_value(id);
        self.push_node(value, Op::Param(id), !self.no_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.cols() {
            return Err(mismatch("matmul_t", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), true, &mut out, false);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulT(a, b), &[a, b]))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        a: Var,
        r: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, NumericsError> {
        let (ta, tr) = (self.value(a), self.value(r));
        if tr.shape().len() != 1 || tr.len() != ta.cols() {
            return Err(mismatch(name, ta, tr));
        }
        let c = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tr.data()[i % c]))
            .collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    /// Adds a `[cols]` vector to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, NumericsError> {
        let t = self.row_broadcast("add_row", a, bias, |x, y| x + y)?;
        Ok(self.push(t, Op::AddRow(a, bias), &[a, bias]))
    }

    /// Multiplies every row elementwise by a `[cols]` vector.
    pub fn mul_row(&mut self, a: Var, gain: Var) -> Result<Var, NumericsError> {
        let t = self.row_broadcast("mul_row", a, gain, |x, y| x * y)?;
        Ok(self.push(t, Op::MulRow(a, gain), &[a, gain]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x * s).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(t, Op::Scale(a, s), &[a])
    }

    fn rowwise(&self, a: Var, f: impl Fn(&[f64], &mut [f64])) -> Tensor {
        let ta = self.value(a);
        let c = ta.cols();
        let mut out = vec![0.0; ta.len()];
        for (src, dst) in ta.data().chunks(c).zip(out.chunks_mut(c)) {
            f(src, dst);
        }
        Tensor::from_parts(ta.shape().to_vec(), out)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.rowwise(a, softmax_row);
        self.push(t, Op::Softmax(a), &[a])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.rowwise(a, log_softmax_row);
        self.push(t, Op::LogSoftmax(a), &[a])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NumericsError> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = tx.cols();
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(mismatch("layer_norm", tx, tg));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let src = tx.row(r);
            let mean = src.iter().sum::<f64>() / c as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (src[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::from_parts(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.max(0.0));
        self.push(t, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, sigmoid);
        self.push(t, Op::Sigmoid(a), &[a])
    }

    /// `x · sigmoid(x)` (swish).
    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x * sigmoid(x));
        self.push(t, Op::Silu(a), &[a])
    }

    /// Depthwise 1-D convolution along rows of `x: [T, d]` with `kernel: [k, d]`
    /// (k odd), computed for output rows `out_start..out_start + limits.len()`.
    ///
    /// Output row `i` reads input rows `j ∈ [i − (k−1)/2, i + (k−1)/2]` with
    /// `0 ≤ j < T` and `j ≤ limits[i − out_start]`; everything else is zero padding.
    pub fn depthwise_conv(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Var,
        out_start: usize,
        limits: Vec<usize>,
    ) -> Result<Var, NumericsError> {
        let (tx, tk, tb) = (self.value(x), self.value(kernel), self.value(bias));
        let d = tx.cols();
        if tk.shape().len() != 2 || tk.cols() != d || tk.rows() % 2 == 0 || tb.shape() != [d] {
            return Err(mismatch("depthwise_conv", tx, tk));
        }
        if out_start + limits.len() > tx.rows() {
            return Err(NumericsError::OutOfRange {
                op: "depthwise_conv",
                index: out_start + limits.len(),
                len: tx.rows(),
            });
        }
        let half = tk.rows() / 2;
        let t_len = tx.rows();
        let mut out = vec![0.0; limits.len() * d];
        for (oi, &limit) in limits.iter().enumerate() {
            let i = out_start + oi;
            let dst = &mut out[oi * d..(oi + 1) * d];
            dst.copy_from_slice(tb.data());
            for o in 0..tk.rows() {
                let Some(j) = (i + o).checked_sub(half) else { continue };
                if j >= t_len || j > limit {
                    continue;
                }
                let krow = tk.row(o);
                let xrow = tx.row(j);
                for c in 0..d {
                    dst[c] += krow[c] * xrow[c];
                }
            }
        }
        let t = Tensor::from_parts(vec![limits.len(), d], out);
        Ok(self.push(
            t,
            Op::DepthwiseConv {
                x,
                kernel,
                bias,
                out_start,
                limits,
            },
            &[x, kernel, bias],
        ))
    }

    /// Row lookup `table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let tt = self.value(table);
        let d = tt.cols();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= tt.rows() {
                return Err(NumericsError::OutOfRange {
                    op: "embedding",
                    index: id,
                    len: tt.rows(),
                });
            }
            out.extend_from_slice(tt.row(id));
        }
        let t = Tensor::from_parts(vec![ids.len(), d], out);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumericsError> {
        let tl = self.value(logits);
        if tl.rows() != targets.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let c = tl.cols();
        let mut probs = vec![0.0; tl.len()];
        let mut loss = 0.0;
        for (r, &tgt) in targets.iter().enumerate() {
            if tgt >= c {
                return Err(NumericsError::OutOfRange {
                    op: "cross_entropy",
                    index: tgt,
                    len: c,
                });
            }
            let row = tl.row(r);
            let mut lp = vec![0.0; c];
            log_softmax_row(row, &mut lp);
            loss -= lp[tgt];
            for j in 0..c {
                probs[r * c + j] = lp[j].exp();
            }
        }
        let n = targets.len().max(1) as f64;
        let t = Tensor::scalar(loss / n);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Replaces entries where `mask` is 1 with `value`. The mask must be
    /// {0,1}-valued with the same shape as `x`.
    pub fn masked_fill(&mut self, x: Var, mask: &Tensor, value: f64) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        if tx.shape() != mask.shape() {
            return Err(mismatch("masked_fill", tx, mask));
        }
        let mut bits = Vec::with_capacity(mask.len());
        for &m in mask.data() {
            if m == 1.0 {
                bits.push(true);
            } else if m == 0.0 {
                bits.push(false);
            } else {
                return Err(NumericsError::InvalidMask(m));
            }
        }
        let data = tx
            .data()
            .iter()
            .zip(&bits)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(t, Op::MaskedFill { x, mask: bits }, &[x]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        self.push(t, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::scalar(ta.sum() / ta.len() as f64);
        self.push(t, Op::Mean(a), &[a])
    }

    /// Columns `start..start + len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        let c = tx.cols();
        if start + len > c || len == 0 {
            return Err(NumericsError::OutOfRange {
                op: "slice_cols",
                index: start + len,
                len: c,
            });
        }
        let mut out = Vec::with_capacity(tx.rows() * len);
        for r in 0..tx.rows() {
            out.extend_from_slice(&tx.row(r)[start..start + len]);
        }
        let t = Tensor::from_parts(vec![tx.rows(), len], out);
        Ok(self.push(t, Op::SliceCols { x, start }, &[x]))
    }

    /// Rows `start..start + len` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        if start + len > tx.rows() || len == 0 {
            return Err(NumericsError::OutOfRange {
                op: "slice_rows",
                index: start + len,
                len: tx.rows(),
            });
        }
        let t = tx.slice_rows(start, len);
        Ok(self.push(t, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = self.value(parts[0]);
        let rows = first.rows();
        for p in parts {
            if self.value(*p).rows() != rows {
                return Err(mismatch("concat_cols", first, self.value(*p)));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let t = Tensor::from_parts(vec![rows, total], out);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = self.value(parts[0]);
        let cols = first.cols();
        for p in parts {
            if self.value(*p).cols() != cols {
                return Err(mismatch("concat_rows", first, self.value(*p)));
            }
        }
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(self.value(*p).data());
        }
        let rows = out.len() / cols;
        let t = Tensor::from_parts(vec![rows, cols], out);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Output row `i` is input row `idx[i]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * tx.cols());
        for &i in idx {
            if i >= tx.rows() {
                return Err(NumericsError::OutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: tx.rows(),
                });
            }
            out.extend_from_slice(tx.row(i));
        }
        let t = Tensor::from_parts(vec![idx.len(), tx.cols()], out);
        Ok(self.push(
            t,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, NumericsError> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// CTC negative log-likelihood of `target` given per-position
    /// log-probabilities `log_probs: [T, V]`. Infeasible targets yield `+∞`
    /// with a zero gradient.
    pub fn ctc_loss(&mut self, log_probs: Var, target: &[usize], blank: usize) -> Result<Var, NumericsError> {
        let tl = self.value(log_probs);
        if tl.shape().len() != 2 || blank >= tl.cols() {
            return Err(NumericsError::OutOfRange {
                op: "ctc_loss",
                index: blank,
                len: tl.cols(),
            });
        }
        if let Some(&bad) = target.iter().find(|&&t| t >= tl.cols() || t == blank) {
            return Err(NumericsError::OutOfRange {
                op: "ctc_loss",
                index: bad,
                len: tl.cols(),
            });
        }
        let want_grad = self.nodes[log_probs.0].requires_grad && !self.no_grad;
        let (loss, grad) = ctc::forward_backward(tl, target, blank, want_grad);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CtcLoss { log_probs, grad },
            &[log_probs],
        ))
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(NumericsError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Graph::backward`] and adds parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<(), NumericsError> {
        let grads = self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                store.accumulate_grad(*id, g);
            }
        }
        Ok(())
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        f(slot.as_mut().expect("initialized above"));
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                self.accum(grads, *a, |ga| {
                    gemm(m, n, k, g.data(), false, tb.data(), true, ga.data_mut(), true)
                });
                self.accum(grads, *b, |gb| {
                    gemm(k, m, n, ta.data(), true, g.data(), false, gb.data_mut(), true)
                });
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                self.accum(grads, *a, |ga| {
                    gemm(m, n, k, g.data(), false, tb.data(), false, ga.data_mut(), true)
                });
                self.accum(grads, *b, |gb| {
                    gemm(n, m, k, g.data(), true, ta.data(), false, gb.data_mut(), true)
                });
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, |ga| ga.add_assign(g));
                self.accum(grads, *b, |gb| gb.add_assign(g));
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, |ga| ga.add_assign(g));
                self.accum(grads, *b, |gb| {
                    for (d, s) in gb.data_mut().iter_mut().zip(g.data()) {
                        *d -= s;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accum(grads, *a, |ga| {
                    for ((d, s), y) in ga.data_mut().iter_mut().zip(g.data()).zip(tb.data()) {
                        *d += s * y;
                    }
                });
                self.accum(grads, *b, |gb| {
                    for ((d, s), x) in gb.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                        *d += s * x;
                    }
                });
            }
            Op::AddRow(a, r) => {
                self.accum(grads, *a, |ga| ga.add_assign(g));
                self.accum(grads, *r, |gr| {
                    let c = gr.len();
                    for (i, s) in g.data().iter().enumerate() {
                        gr.data_mut()[i % c] += s;
                    }
                });
            }
            Op::MulRow(a, r) => {
                let (ta, tr) = (self.value(*a), self.value(*r));
                let c = tr.len();
                self.accum(grads, *a, |ga| {
                    for (i, (d, s)) in ga.data_mut().iter_mut().zip(g.data()).enumerate() {
                        *d += s * tr.data()[i % c];
                    }
                });
                self.accum(grads, *r, |gr| {
                    for (i, (s, x)) in g.data().iter().zip(ta.data()).enumerate() {
                        gr.data_mut()[i % c] += s * x;
                    }
                });
            }
            Op::Scale(a, s) => {
                self.accum(grads, *a, |ga| {
                    for (d, v) in ga.data_mut().iter_mut().zip(g.data()) {
                        *d += s * v;
                    }
                });
            }
            Op::Softmax(a) => {
                let c = out.cols();
                self.accum(grads, *a, |ga| {
                    for r in 0..out.rows() {
                        let y = out.row(r);
                        let gy = g.row(r);
                        let dot: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                        let dst = &mut ga.data_mut()[r * c..(r + 1) * c];
                        for j in 0..c {
                            dst[j] += y[j] * (gy[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let c = out.cols();
                self.accum(grads, *a, |ga| {
                    for r in 0..out.rows() {
                        let y = out.row(r);
                        let gy = g.row(r);
                        let total: f64 = gy.iter().sum();
                        let dst = &mut ga.data_mut()[r * c..(r + 1) * c];
                        for j in 0..c {
                            dst[j] += gy[j] - y[j].exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let tg = self.value(*gamma);
                let c = tg.len();
                let rows = out.rows();
                self.accum(grads, *gamma, |gg| {
                    for (i, (s, h)) in g.data().iter().zip(xhat).enumerate() {
                        gg.data_mut()[i % c] += s * h;
                    }
                });
                self.accum(grads, *beta, |gb| {
                    for (i, s) in g.data().iter().enumerate() {
                        gb.data_mut()[i % c] += s;
                    }
                });
                self.accum(grads, *x, |gx| {
                    let n = c as f64;
                    let mut dh = vec![0.0; c];
                    for r in 0..rows {
                        let gy = g.row(r);
                        let h = &xhat[r * c..(r + 1) * c];
                        for j in 0..c {
                            dh[j] = gy[j] * tg.data()[j];
                        }
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(h).map(|(a, b)| a * b).sum();
                        let dst = &mut gx.data_mut()[r * c..(r + 1) * c];
                        for j in 0..c {
                            dst[j] += inv_std[r] / n * (n * dh[j] - sum_dh - h[j] * sum_dh_h);
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                self.accum(grads, *a, |ga| {
                    for ((d, s), x) in ga.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                        if *x > 0.0 {
                            *d += s;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                self.accum(grads, *a, |ga| {
                    for ((d, s), y) in ga.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        *d += s * y * (1.0 - y);
                    }
                });
            }
            Op::Silu(a) => {
                let ta = self.value(*a);
                self.accum(grads, *a, |ga| {
                    for ((d, s), &x) in ga.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                        let sg = sigmoid(x);
                        *d += s * sg * (1.0 + x * (1.0 - sg));
                    }
                });
            }
            Op::DepthwiseConv {
                x,
                kernel,
                bias,
                out_start,
                limits,
            } => {
                let (tx, tk) = (self.value(*x), self.value(*kernel));
                let d = tx.cols();
                let half = tk.rows() / 2;
                let t_len = tx.rows();
                let taps = |i: usize, limit: usize| {
                    (0..tk.rows()).filter_map(move |o| {
                        let j = (i + o).checked_sub(half)?;
                        (j < t_len && j <= limit).then_some((o, j))
                    })
                };
                self.accum(grads, *bias, |gb| {
                    for oi in 0..limits.len() {
                        for (c, s) in g.row(oi).iter().enumerate() {
                            gb.data_mut()[c] += s;
                        }
                    }
                });
                self.accum(grads, *kernel, |gk| {
                    for (oi, &limit) in limits.iter().enumerate() {
                        let gy = g.row(oi);
                        for (o, j) in taps(out_start + oi, limit) {
                            let xrow = tx.row(j);
                            let dst = gk.row_mut(o);
                            for c in 0..d {
                                dst[c] += gy[c] * xrow[c];
                            }
                        }
                    }
                });
                self.accum(grads, *x, |gx| {
                    for (oi, &limit) in limits.iter().enumerate() {
                        let gy = g.row(oi);
                        for (o, j) in taps(out_start + oi, limit) {
                            let krow = tk.row(o);
                            let dst = gx.row_mut(j);
                            for c in 0..d {
                                dst[c] += gy[c] * krow[c];
                            }
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                self.accum(grads, *table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, s) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g.item() / targets.len().max(1) as f64;
                self.accum(grads, *logits, |gl| {
                    let c = gl.cols();
                    for (r, &t) in targets.iter().enumerate() {
                        let dst = gl.row_mut(r);
                        for j in 0..c {
                            dst[j] += scale * probs[r * c + j];
                        }
                        dst[t] -= scale;
                    }
                });
            }
            Op::MaskedFill { x, mask } => {
                self.accum(grads, *x, |gx| {
                    for ((d, s), &m) in gx.data_mut().iter_mut().zip(g.data()).zip(mask) {
                        if !m {
                            *d += s;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let s = g.item();
                self.accum(grads, *a, |ga| ga.data_mut().iter_mut().for_each(|d| *d += s));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let s = g.item() / n;
                self.accum(grads, *a, |ga| ga.data_mut().iter_mut().for_each(|d| *d += s));
            }
            Op::SliceCols { x, start } => {
                let len = out.cols();
                self.accum(grads, *x, |gx| {
                    for r in 0..out.rows() {
                        let dst = &mut gx.row_mut(r)[*start..start + len];
                        for (d, s) in dst.iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let c = out.cols();
                self.accum(grads, *x, |gx| {
                    let dst = &mut gx.data_mut()[start * c..start * c + out.len()];
                    for (d, s) in dst.iter_mut().zip(g.data()) {
                        *d += s;
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    self.accum(grads, *p, |gp| {
                        for r in 0..out.rows() {
                            for (d, s) in gp.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + w]) {
                                *d += s;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    self.accum(grads, *p, |gp| {
                        for (d, s) in gp.data_mut().iter_mut().zip(&g.data()[offset..offset + n]) {
                            *d += s;
                        }
                    });
                    offset += n;
                }
            }
            Op::GatherRows { x, idx } => {
                self.accum(grads, *x, |gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        for (d, s) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                self.accum(grads, *x, |gx| {
                    for (d, s) in gx.data_mut().iter_mut().zip(g.data()) {
                        *d += s;
                    }
                });
            }
            Op::CtcLoss { log_probs, grad } => {
                if let Some(cached) = grad {
                    let s = g.item();
                    self.accum(grads, *log_probs, |gl| {
                        for (d, c) in gl.data_mut().iter_mut().zip(cached) {
                            *d += s * c;
                        }
                    });
                }
            }
        }
    }
}
