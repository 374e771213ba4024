//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends one node to the tape; node ids increase monotonically,
//! so a reverse sweep over the node list visits each op exactly once after
//! all of its consumers.

use super::kernels::{self, gemm, Mat, MatMut};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Target marker for positions excluded from the loss.
pub const IGNORE_INDEX: usize = usize::MAX;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Shape information for the fused multi-head attention op.
///
/// Queries are `[batch·nq × d]`, keys and values `[batch·nk × d]`, where the
/// sequence lengths are recovered from the row counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionSpec {
    pub heads: usize,
    pub batch: usize,
    pub causal: bool,
}

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<T>,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
        count: usize,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Result of [`Graph::cross_entropy_logits`].
#[derive(Clone, Copy, Debug)]
pub struct CrossEntropy {
    pub loss: Var,
    /// Number of non-ignored positions; zero means the loss is a
    /// placeholder 0 with no gradient signal.
    pub supervised: usize,
}

/// The recording tape plus every value computed on it.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
    check_finite: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Dimension(format!("{what} expects a matrix, got shape {s:?}"))),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            check_finite: false,
        }
    }

    /// Enables NaN/Inf detection on every op output.
    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Clears gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>, name: &'static str) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, &[a, b], Op::Add(a, b), "add")
    }

    /// Adds a bias vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.last_dim();
        if tb.numel() != c || tb.last_dim() != c {
            return Err(Error::Dimension(format!(
                "add_bias: bias shape {:?} does not match last extent of {:?}",
                tb.shape(),
                tx.shape()
            )));
        }
        let mut data = tx.data().to_vec();
        if c > 0 {
            for row in data.chunks_mut(c) {
                for (v, &b) in row.iter_mut().zip(tb.data()) {
                    *v += b;
                }
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(out, &[x, bias], Op::AddBias(x, bias), "add_bias")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, &[a, b], Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let tx = self.value(x);
        let out = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|&v| v * s).collect())?;
        self.push(out, &[x], Op::Scale(x, s), "scale")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), &[x], Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::Dimension("mean of an empty tensor".into()));
        }
        let total: T = t.data().iter().copied().sum();
        let n = T::from_f64(t.numel() as f64);
        self.push(Tensor::scalar(total / n), &[x], Op::Mean(x), "mean")
    }

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims2(ta, "matmul lhs")?;
        let (k2, n) = dims2(tb, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul: inner extents differ, {:?} · {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            Mat::new(ta.data(), m, k),
            Mat::new(tb.data(), k, n),
            MatMut::new(&mut out, n),
            false,
        );
        self.push(Tensor::new([m, n], out)?, &[a, b], Op::MatMul(a, b), "matmul")
    }

    /// Exact-erf GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| kernels::gelu(v)).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(out, &[x], Op::Gelu(x), "gelu")
    }

    /// Normalizes each last-axis slice to zero mean and unit variance, then
    /// applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = tx.last_dim();
        if tg.numel() != c || tb.numel() != c {
            return Err(Error::Dimension(format!(
                "layer_norm: gamma {:?} / beta {:?} do not match last extent of {:?}",
                tg.shape(),
                tb.shape(),
                tx.shape()
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let rows = tx.leading();
        let eps = T::from_f64(eps);
        let inv_c = T::one() / T::from_f64(c as f64);
        let mut xhat = vec![T::zero(); rows * c];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * c];
        for r in 0..rows {
            let row = &tx.data()[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(
            out,
            &[x, gamma, beta],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.last_dim();
        if c == 0 {
            return Err(Error::Dimension(format!("softmax over empty last axis of {:?}", tx.shape())));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            kernels::softmax_row(row, c);
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(out, &[x], Op::Softmax(x), "softmax")
    }

    /// Fused multi-head scaled dot-product attention.
    ///
    /// Heads split the last axis into `heads` contiguous groups of width
    /// `d / heads`; each (sample, head) pair attends independently and the
    /// head outputs are written back side by side.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (rq, d) = dims2(tq, "attention query")?;
        let (rk, dk) = dims2(tk, "attention key")?;
        if tk.shape() != tv.shape() || dk != d {
            return Err(Error::Dimension(format!(
                "attention: q {:?}, k {:?}, v {:?} are incompatible",
                tq.shape(),
                tk.shape(),
                tv.shape()
            )));
        }
        if spec.heads == 0 || d % spec.heads != 0 {
            return Err(Error::Config(format!(
                "attention width {d} is not divisible by {} heads",
                spec.heads
            )));
        }
        if spec.batch == 0 || rq % spec.batch != 0 || rk % spec.batch != 0 {
            return Err(Error::Dimension(format!(
                "attention rows ({rq}, {rk}) not divisible by batch {}",
                spec.batch
            )));
        }
        let (nq, nk) = (rq / spec.batch, rk / spec.batch);
        if nk == 0 && nq > 0 {
            return Err(Error::Dimension("attention over an empty key sequence".into()));
        }
        if spec.causal && nq != nk {
            return Err(Error::Dimension(format!(
                "causal attention needs equal query/key lengths, got {nq} and {nk}"
            )));
        }
        let dh = d / spec.heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); spec.batch * spec.heads * nq * nk];
        let mut out = vec![T::zero(); rq * d];
        for b in 0..spec.batch {
            for h in 0..spec.heads {
                let p = &mut probs[(b * spec.heads + h) * nq * nk..][..nq * nk];
                let qv = Mat::block(tq.data(), b * nq * d + h * dh, nq, dh, d);
                let kv = Mat::block(tk.data(), b * nk * d + h * dh, nk, dh, d);
                gemm(qv, kv.t(), MatMut::new(p, nk), false);
                for (i, row) in p.chunks_mut(nk).enumerate() {
                    for s in row.iter_mut() {
                        *s *= scale;
                    }
                    let valid = if spec.causal { i + 1 } else { nk };
                    kernels::softmax_row(row, valid);
                }
                let vv = Mat::block(tv.data(), b * nk * d + h * dh, nk, dh, d);
                gemm(
                    Mat::new(p, nq, nk),
                    vv,
                    MatMut::block(&mut out, b * nq * d + h * dh, d),
                    false,
                );
            }
        }
        let out = Tensor::new([rq, d], out)?;
        self.push(
            out,
            &[q, k, v],
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
            "attention",
        )
    }

    /// Row gather: output row `r` is input row `index[r]`. Used for
    /// embedding lookup, token reordering and broadcasting.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let tx = self.value(x);
        let (rows, c) = dims2(tx, "gather_rows")?;
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in &index {
            if i >= rows {
                return Err(Error::Index(format!("gather_rows: row {i} out of range for {rows} rows")));
            }
            data.extend_from_slice(tx.row(i));
        }
        let out = Tensor::new([index.len(), c], data)?;
        self.push(out, &[x], Op::GatherRows { x, index }, "gather_rows")
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat_rows of nothing".into()))?;
        let c = dims2(self.value(*first), "concat_rows")?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = dims2(self.value(p), "concat_rows")?;
            if pc != c {
                return Err(Error::Dimension(format!(
                    "concat_rows: column counts {c} and {pc} differ"
                )));
            }
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let out = Tensor::new([rows, c], data)?;
        self.push(out, parts, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    /// Mean negative log-softmax of `targets` under `logits` `[T×V]`,
    /// skipping [`IGNORE_INDEX`] positions.
    pub fn cross_entropy_logits(&mut self, logits: Var, targets: &[usize]) -> Result<CrossEntropy> {
        let tl = self.value(logits);
        let (t, vocab) = dims2(tl, "cross_entropy logits")?;
        if targets.len() != t {
            return Err(Error::Dimension(format!(
                "cross_entropy: {} targets for {t} logit rows",
                targets.len()
            )));
        }
        let mut probs = tl.data().to_vec();
        let mut total = 0.0f64;
        let mut count = 0;
        for (r, &target) in targets.iter().enumerate() {
            if target == IGNORE_INDEX {
                continue;
            }
            if target >= vocab {
                return Err(Error::Index(format!(
                    "cross_entropy: target {target} at position {r} outside vocabulary of {vocab}"
                )));
            }
            let row = &mut probs[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max).as_f64();
            let lse = max + row.iter().map(|&v| (v.as_f64() - max).exp()).sum::<f64>().ln();
            total += lse - row[target].as_f64();
            count += 1;
            kernels::softmax_row(row, vocab);
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let out = Tensor::scalar(T::from_f64(loss));
        let var = self.push(
            out,
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            "cross_entropy",
        )?;
        Ok(CrossEntropy {
            loss: var,
            supervised: count,
        })
    }

    /// Propagates gradients from a scalar `loss` back through the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::StaleTape);
        }
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.backward_node(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        self.backward_done = true;
        Ok(())
    }

    fn backward_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[id];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let numel = |v: Var| self.nodes[v.0].value.numel();
        // Returns the accumulation buffer for `v`, allocating zeros on first use.
        fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut Vec<T> {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        let s = slot(grads, v, numel(v));
                        s.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                    }
                }
            }
            Op::AddBias(x, b) => {
                if wants(*x) {
                    let s = slot(grads, *x, numel(*x));
                    s.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                }
                if wants(*b) {
                    let c = numel(*b);
                    let s = slot(grads, *b, c);
                    if c > 0 {
                        for row in g.chunks(c) {
                            s.iter_mut().zip(row).for_each(|(d, &x)| *d += x);
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if wants(*a) {
                    let s = slot(grads, *a, ta.len());
                    for i in 0..s.len() {
                        s[i] += g[i] * tb[i];
                    }
                }
                if wants(*b) {
                    let s = slot(grads, *b, tb.len());
                    for i in 0..s.len() {
                        s[i] += g[i] * ta[i];
                    }
                }
            }
            Op::Scale(x, k) => {
                let s = slot(grads, *x, numel(*x));
                s.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *k);
            }
            Op::Sum(x) => {
                let s = slot(grads, *x, numel(*x));
                s.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(x) => {
                let n = numel(*x);
                let inc = g[0] / T::from_f64(n as f64);
                let s = slot(grads, *x, n);
                s.iter_mut().for_each(|d| *d += inc);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                let gm = Mat::new(g, m, n);
                if wants(*a) {
                    let s = slot(grads, *a, m * k);
                    gemm(gm, Mat::new(tb.data(), k, n).t(), MatMut::new(s, k), true);
                }
                if wants(*b) {
                    let s = slot(grads, *b, k * n);
                    gemm(Mat::new(ta.data(), m, k).t(), gm, MatMut::new(s, n), true);
                }
            }
            Op::Gelu(x) => {
                let tx = self.value(*x).data();
                let s = slot(grads, *x, tx.len());
                for i in 0..s.len() {
                    s[i] += g[i] * kernels::gelu_grad(tx[i]);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = numel(*gamma);
                let rows = rstd.len();
                let tg = self.value(*gamma).data();
                if wants(*gamma) {
                    let s = slot(grads, *gamma, c);
                    for r in 0..rows {
                        for j in 0..c {
                            s[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                }
                if wants(*beta) {
                    let s = slot(grads, *beta, c);
                    for r in 0..rows {
                        for j in 0..c {
                            s[j] += g[r * c + j];
                        }
                    }
                }
                if wants(*x) {
                    let s = slot(grads, *x, rows * c);
                    let inv_c = T::one() / T::from_f64(c as f64);
                    let mut dxhat = vec![T::zero(); c];
                    for r in 0..rows {
                        let (mut sum_d, mut sum_dx) = (T::zero(), T::zero());
                        for j in 0..c {
                            let d = g[r * c + j] * tg[j];
                            dxhat[j] = d;
                            sum_d += d;
                            sum_dx += d * xhat[r * c + j];
                        }
                        for j in 0..c {
                            s[r * c + j] += rstd[r]
                                * (dxhat[j] - inv_c * sum_d - xhat[r * c + j] * inv_c * sum_dx);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.last_dim();
                let s = slot(grads, *x, y.len());
                let mut dx = vec![T::zero(); c];
                for ((yr, gr), sr) in y.chunks(c).zip(g.chunks(c)).zip(s.chunks_mut(c)) {
                    kernels::softmax_row_backward(yr, gr, &mut dx, T::one());
                    sr.iter_mut().zip(&dx).for_each(|(d, &v)| *d += v);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => self.attention_backward(*q, *k, *v, *spec, probs, g, grads),
            Op::GatherRows { x, index } => {
                let c = self.value(*x).last_dim();
                let s = slot(grads, *x, numel(*x));
                for (r, &i) in index.iter().enumerate() {
                    s[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(&g[r * c..(r + 1) * c])
                        .for_each(|(d, &v)| *d += v);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = numel(p);
                    if wants(p) {
                        let s = slot(grads, p, n);
                        s.iter_mut().zip(&g[off..off + n]).for_each(|(d, &v)| *d += v);
                    }
                    off += n;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return Ok(());
                }
                let vocab = self.value(*logits).last_dim();
                let inv = g[0] / T::from_f64(*count as f64);
                let s = slot(grads, *logits, probs.len());
                for (r, &t) in targets.iter().enumerate() {
                    if t == IGNORE_INDEX {
                        continue;
                    }
                    let row = &probs[r * vocab..(r + 1) * vocab];
                    for j in 0..vocab {
                        s[r * vocab + j] += row[j] * inv;
                    }
                    s[r * vocab + t] -= inv;
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (rq, d) = (tq.shape()[0], tq.shape()[1]);
        let rk = tk.shape()[0];
        let (nq, nk) = (rq / spec.batch, rk / spec.batch);
        let dh = d / spec.heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let (wq, wk, wv) = (
            self.nodes[q.0].requires_grad,
            self.nodes[k.0].requires_grad,
            self.nodes[v.0].requires_grad,
        );
        let mut dq = wq.then(|| vec![T::zero(); rq * d]);
        let mut dk = wk.then(|| vec![T::zero(); rk * d]);
        let mut dv = wv.then(|| vec![T::zero(); rk * d]);
        let mut dp = vec![T::zero(); nq * nk];
        let mut ds = vec![T::zero(); nq * nk];
        for b in 0..spec.batch {
            for h in 0..spec.heads {
                let p = &probs[(b * spec.heads + h) * nq * nk..][..nq * nk];
                let go = Mat::block(g, b * nq * d + h * dh, nq, dh, d);
                let k_off = b * nk * d + h * dh;
                let q_off = b * nq * d + h * dh;
                if let Some(dv) = dv.as_mut() {
                    gemm(Mat::new(p, nq, nk).t(), go, MatMut::block(dv, k_off, d), true);
                }
                if !(wq || wk) {
                    continue;
                }
                let vv = Mat::block(tv.data(), k_off, nk, dh, d);
                gemm(go, vv.t(), MatMut::new(&mut dp, nk), false);
                for i in 0..nq {
                    let r = i * nk..(i + 1) * nk;
                    kernels::softmax_row_backward(&p[r.clone()], &dp[r.clone()], &mut ds[r], scale);
                }
                if let Some(dq) = dq.as_mut() {
                    let kv = Mat::block(tk.data(), k_off, nk, dh, d);
                    gemm(Mat::new(&ds, nq, nk), kv, MatMut::block(dq, q_off, d), true);
                }
                if let Some(dk) = dk.as_mut() {
                    let qv = Mat::block(tq.data(), q_off, nq, dh, d);
                    gemm(Mat::new(&ds, nq, nk).t(), qv, MatMut::block(dk, k_off, d), true);
                }
            }
        }
        for (var, local) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(local) = local {
                match grads[var.0].as_mut() {
                    Some(s) => s.iter_mut().zip(&local).for_each(|(d, &x)| *d += x),
                    None => grads[var.0] = Some(local),
                }
            }
        }
    }
}
