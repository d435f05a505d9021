//! The recording tape for reverse-mode differentiation.
//!
//! Forward operations append nodes to the tape; each node stores its output
//! value and enough bookkeeping to push gradients back into its inputs. Nodes
//! only ever reference earlier nodes, so the tape is acyclic by construction
//! and replaying it in reverse is a valid topological backward order.
//!
//! All reductions run in ascending index order, which makes every value on
//! the tape a deterministic function of the inputs.

use super::{Tensor, TensorError};

/// Handle to a tensor on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    AddBias { a: usize, bias: usize },
    MatMul { a: usize, b: usize },
    Transpose { a: usize },
    Embedding { weight: usize, indices: Vec<usize> },
    LayerNorm { x: usize, gamma: usize, beta: usize, mean: Vec<f64>, rstd: Vec<f64> },
    CausalSoftmax { x: usize },
    SoftmaxRows { x: usize },
    LogSoftmaxRows { x: usize },
    Gelu { x: usize },
    Sigmoid { x: usize },
    Log { x: usize },
    Exp { x: usize },
    Softplus { x: usize },
    Sum { x: usize },
    Mean { x: usize },
    Gather { x: usize, rows: Vec<usize>, cols: Vec<usize> },
    SliceCols { x: usize, start: usize, len: usize },
    ConcatCols { parts: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`TensorId`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `id`, if it required one and was reachable from the loss.
    pub fn get(&self, id: TensorId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, or a zero tensor of the given shape when the node
    /// was not on the trace.
    pub fn get_or_zeros(&self, id: TensorId, shape: &[usize]) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mat_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize), TensorError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(TensorError::Shape {
            op,
            detail: format!("expected rank-2 tensor, got shape {other:?}"),
        }),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Inserts a tensor as a leaf. Gradient flows into it only when the
    /// tensor's `requires_grad` flag is set.
    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        let requires_grad = t.requires_grad();
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Inserts a non-differentiable constant.
    pub fn constant(&mut self, t: Tensor) -> TensorId {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> TensorId {
        self.constant(Tensor::scalar(v))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> TensorId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // -- elementwise and broadcast ops ------------------------------------

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.zip_op("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.zip_op("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.zip_op("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> Result<TensorId, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(TensorError::Shape {
                op: name,
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(value, op(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId, TensorError> {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.needs_grad(&[a]);
        Ok(self.push(value, Op::Scale { a: a.0, c }, rg))
    }

    /// Adds a length-n bias vector to every row of an [m, n] matrix.
    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId, TensorError> {
        let (m, n) = mat_dims("add_bias", &self.nodes[a.0].value)?;
        let tb = &self.nodes[bias.0].value;
        if tb.shape() != [n] {
            return Err(TensorError::Shape {
                op: "add_bias",
                detail: format!("matrix [{m}, {n}] with bias {:?}", tb.shape()),
            });
        }
        let ta = &self.nodes[a.0].value;
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                data.push(ta.data()[i * n + j] + tb.data()[j]);
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        let rg = self.needs_grad(&[a, bias]);
        Ok(self.push(value, Op::AddBias { a: a.0, bias: bias.0 }, rg))
    }

    // -- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (m, k) = mat_dims("matmul", &self.nodes[a.0].value)?;
        let (k2, n) = mat_dims("matmul", &self.nodes[b.0].value)?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                detail: format!("[{m}, {k}] x [{k2}, {n}]"),
            });
        }
        let data = matmul_raw(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            k,
            n,
        );
        let value = Tensor::matrix(m, n, data)?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul { a: a.0, b: b.0 }, rg))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let (m, n) = mat_dims("transpose", &self.nodes[a.0].value)?;
        let src = self.nodes[a.0].value.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let value = Tensor::matrix(n, m, data)?;
        let rg = self.needs_grad(&[a]);
        Ok(self.push(value, Op::Transpose { a: a.0 }, rg))
    }

    /// Looks up rows of `weight` ([v, d]) by index, producing [len, d].
    pub fn embedding(
        &mut self,
        weight: TensorId,
        indices: &[usize],
    ) -> Result<TensorId, TensorError> {
        let (v, d) = mat_dims("embedding", &self.nodes[weight.0].value)?;
        for &ix in indices {
            if ix >= v {
                return Err(TensorError::IndexOutOfRange {
                    what: "embedding row",
                    index: ix,
                    size: v,
                });
            }
        }
        let src = self.nodes[weight.0].value.data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &ix in indices {
            data.extend_from_slice(&src[ix * d..(ix + 1) * d]);
        }
        let value = Tensor::matrix(indices.len(), d, data)?;
        let rg = self.needs_grad(&[weight]);
        Ok(self.push(
            value,
            Op::Embedding {
                weight: weight.0,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    // -- normalization and nonlinearities -----------------------------------

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        let (m, n) = mat_dims("layer_norm", &self.nodes[x.0].value)?;
        if self.nodes[gamma.0].value.shape() != [n] || self.nodes[beta.0].value.shape() != [n] {
            return Err(TensorError::Shape {
                op: "layer_norm",
                detail: format!(
                    "x [{m}, {n}] with gamma {:?} beta {:?}",
                    self.nodes[gamma.0].value.shape(),
                    self.nodes[beta.0].value.shape()
                ),
            });
        }
        let xs = self.nodes[x.0].value.data();
        let gs = self.nodes[gamma.0].value.data();
        let bs = self.nodes[beta.0].value.data();
        let mut data = vec![0.0; m * n];
        let mut means = vec![0.0; m];
        let mut rstds = vec![0.0; m];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            means[i] = mean;
            rstds[i] = rstd;
            for j in 0..n {
                data[i * n + j] = (row[j] - mean) * rstd * gs[j] + bs[j];
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        let rg = self.needs_grad(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                mean: means,
                rstd: rstds,
            },
            rg,
        ))
    }

    /// Row-wise softmax over a square score matrix where row i only attends
    /// to columns 0..=i. Columns above the diagonal come out exactly zero,
    /// which keeps causal masking bit-exact.
    pub fn causal_softmax(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let (m, n) = mat_dims("causal_softmax", &self.nodes[x.0].value)?;
        if m != n {
            return Err(TensorError::Shape {
                op: "causal_softmax",
                detail: format!("expected square scores, got [{m}, {n}]"),
            });
        }
        let xs = self.nodes[x.0].value.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &xs[i * n..i * n + i + 1];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, v) in row.iter().enumerate() {
                let e = (v - max).exp();
                data[i * n + j] = e;
                denom += e;
            }
            for j in 0..=i {
                data[i * n + j] /= denom;
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        let rg = self.needs_grad(&[x]);
        Ok(self.push(value, Op::CausalSoftmax { x: x.0 }, rg))
    }

    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let (m, n) = mat_dims("softmax", &self.nodes[x.0].value)?;
        let xs = self.nodes[x.0].value.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            softmax_into(&xs[i * n..(i + 1) * n], &mut data[i * n..(i + 1) * n]);
        }
        let value = Tensor::matrix(m, n, data)?;
        let rg = self.needs_grad(&[x]);
        Ok(self.push(value, Op::SoftmaxRows { x: x.0 }, rg))
    }

    pub fn log_softmax_rows(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let (m, n) = mat_dims("log_softmax", &self.nodes[x.0].value)?;
        let xs = self.nodes[x.0].value.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..n {
                data[i * n + j] = row[j] - lse;
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        let rg = self.needs_grad(&[x]);
        Ok(self.push(value, Op::LogSoftmaxRows { x: x.0 }, rg))
    }

    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        self.unary_op(x, gelu_fwd, |x| Op::Gelu { x })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        self.unary_op(x, sigmoid, |x| Op::Sigmoid { x })
    }

    pub fn log(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        self.unary_op(x, f64::ln, |x| Op::Log { x })
    }

    pub fn exp(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        self.unary_op(x, f64::exp, |x| Op::Exp { x })
    }

    /// Numerically stable ln(1 + e^x).
    pub fn softplus(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        self.unary_op(x, softplus, |x| Op::Softplus { x })
    }

    fn unary_op(
        &mut self,
        x: TensorId,
        f: impl Fn(f64) -> f64,
        op: impl Fn(usize) -> Op,
    ) -> Result<TensorId, TensorError> {
        let tx = &self.nodes[x.0].value;
        let data = tx.data().iter().map(|v| f(*v)).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.needs_grad(&[x]);
        Ok(self.push(value, op(x.0), rg))
    }

    // -- reductions and indexing --------------------------------------------

    pub fn sum(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let total = self.nodes[x.0].value.data().iter().sum();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Tensor::scalar(total), Op::Sum { x: x.0 }, rg))
    }

    pub fn mean(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let tx = &self.nodes[x.0].value;
        if tx.numel() == 0 {
            return Err(TensorError::Shape {
                op: "mean",
                detail: "empty tensor".into(),
            });
        }
        let total: f64 = tx.data().iter().sum();
        let v = total / tx.numel() as f64;
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Tensor::scalar(v), Op::Mean { x: x.0 }, rg))
    }

    /// Picks entries (rows[t], cols[t]) of a matrix into a vector.
    pub fn gather(
        &mut self,
        x: TensorId,
        rows: &[usize],
        cols: &[usize],
    ) -> Result<TensorId, TensorError> {
        let (m, n) = mat_dims("gather", &self.nodes[x.0].value)?;
        if rows.len() != cols.len() {
            return Err(TensorError::Shape {
                op: "gather",
                detail: format!("{} row indices vs {} column indices", rows.len(), cols.len()),
            });
        }
        for &r in rows {
            if r >= m {
                return Err(TensorError::IndexOutOfRange {
                    what: "gather row",
                    index: r,
                    size: m,
                });
            }
        }
        for &c in cols {
            if c >= n {
                return Err(TensorError::IndexOutOfRange {
                    what: "gather column",
                    index: c,
                    size: n,
                });
            }
        }
        let src = self.nodes[x.0].value.data();
        let data: Vec<f64> = rows
            .iter()
            .zip(cols)
            .map(|(&r, &c)| src[r * n + c])
            .collect();
        let value = Tensor::from_vec(data);
        let rg = self.needs_grad(&[x]);
        Ok(self.push(
            value,
            Op::Gather {
                x: x.0,
                rows: rows.to_vec(),
                cols: cols.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_cols(
        &mut self,
        x: TensorId,
        start: usize,
        len: usize,
    ) -> Result<TensorId, TensorError> {
        let (m, n) = mat_dims("slice_cols", &self.nodes[x.0].value)?;
        if start + len > n {
            return Err(TensorError::Shape {
                op: "slice_cols",
                detail: format!("columns {start}..{} of [{m}, {n}]", start + len),
            });
        }
        let src = self.nodes[x.0].value.data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let value = Tensor::matrix(m, len, data)?;
        let rg = self.needs_grad(&[x]);
        Ok(self.push(value, Op::SliceCols { x: x.0, start, len }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Shape {
                op: "concat_cols",
                detail: "no parts".into(),
            });
        }
        let (m, _) = mat_dims("concat_cols", &self.nodes[parts[0].0].value)?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (mp, np) = mat_dims("concat_cols", &self.nodes[p.0].value)?;
            if mp != m {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    detail: format!("row counts {m} vs {mp}"),
                });
            }
            widths.push(np);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (p, w) in parts.iter().zip(&widths) {
                let src = self.nodes[p.0].value.data();
                data.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        let rg = self.needs_grad(parts);
        Ok(self.push(
            value,
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            rg,
        ))
    }

    // -- backward ------------------------------------------------------------

    /// Backpropagates from a scalar loss through the whole tape.
    ///
    /// Every node that requires grad and is reachable from the loss receives
    /// a gradient of its own shape; unreachable nodes are reported as zero by
    /// [`Gradients::get_or_zeros`].
    pub fn backward(&self, loss: TensorId) -> Result<Gradients, TensorError> {
        let loss_t = &self.nodes[loss.0].value;
        if !loss_t.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: loss_t.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let go = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[idx].requires_grad {
                grads[idx] = Some(go);
                continue;
            }
            self.propagate(idx, &go, &mut grads);
            grads[idx] = Some(go);
        }

        let out = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| {
                    Tensor::new(self.nodes[i].value.shape().to_vec(), data)
                        .expect("gradient shape matches node shape")
                })
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], target: usize, len: usize, f: impl FnOnce(&mut [f64])) {
        let slot = grads[target].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn propagate(&self, idx: usize, go: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let rg = |i: usize| nodes[i].requires_grad;
        let numel = |i: usize| nodes[i].value.numel();
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                if rg(*a) {
                    Self::accumulate(grads, *a, numel(*a), |g| {
                        for (gi, &o) in g.iter_mut().zip(go) {
                            *gi += o;
                        }
                    });
                }
                if rg(*b) {
                    Self::accumulate(grads, *b, numel(*b), |g| {
                        for (gi, &o) in g.iter_mut().zip(go) {
                            *gi += o;
                        }
                    });
                }
            }
            Op::Sub { a, b } => {
                if rg(*a) {
                    Self::accumulate(grads, *a, numel(*a), |g| {
                        for (gi, &o) in g.iter_mut().zip(go) {
                            *gi += o;
                        }
                    });
                }
                if rg(*b) {
                    Self::accumulate(grads, *b, numel(*b), |g| {
                        for (gi, &o) in g.iter_mut().zip(go) {
                            *gi -= o;
                        }
                    });
                }
            }
            Op::Mul { a, b } => {
                let (da, db) = (nodes[*a].value.data(), nodes[*b].value.data());
                if rg(*a) {
                    Self::accumulate(grads, *a, numel(*a), |g| {
                        for i in 0..g.len() {
                            g[i] += go[i] * db[i];
                        }
                    });
                }
                if rg(*b) {
                    Self::accumulate(grads, *b, numel(*b), |g| {
                        for i in 0..g.len() {
                            g[i] += go[i] * da[i];
                        }
                    });
                }
            }
            Op::Scale { a, c } => {
                if rg(*a) {
                    Self::accumulate(grads, *a, numel(*a), |g| {
                        for i in 0..g.len() {
                            g[i] += go[i] * c;
                        }
                    });
                }
            }
            Op::AddBias { a, bias } => {
                let [m, n] = nodes[*a].value.shape() else { unreachable!() };
                let (m, n) = (*m, *n);
                if rg(*a) {
                    Self::accumulate(grads, *a, m * n, |g| {
                        for i in 0..m * n {
                            g[i] += go[i];
                        }
                    });
                }
                if rg(*bias) {
                    Self::accumulate(grads, *bias, n, |g| {
                        for i in 0..m {
                            for j in 0..n {
                                g[j] += go[i * n + j];
                            }
                        }
                    });
                }
            }
            Op::MatMul { a, b } => {
                let [m, k] = nodes[*a].value.shape() else { unreachable!() };
                let [_, n] = nodes[*b].value.shape() else { unreachable!() };
                let (m, k, n) = (*m, *k, *n);
                if rg(*a) {
                    // dA = dC . B^T
                    let bd = nodes[*b].value.data();
                    Self::accumulate(grads, *a, m * k, |g| {
                        for i in 0..m {
                            for p in 0..k {
                                let brow = &bd[p * n..(p + 1) * n];
                                let gorow = &go[i * n..(i + 1) * n];
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += gorow[j] * brow[j];
                                }
                                g[i * k + p] += s;
                            }
                        }
                    });
                }
                if rg(*b) {
                    // dB = A^T . dC
                    let ad = nodes[*a].value.data();
                    Self::accumulate(grads, *b, k * n, |g| {
                        for i in 0..m {
                            let arow = &ad[i * k..(i + 1) * k];
                            let gorow = &go[i * n..(i + 1) * n];
                            for p in 0..k {
                                let av = arow[p];
                                let grow = &mut g[p * n..(p + 1) * n];
                                for j in 0..n {
                                    grow[j] += av * gorow[j];
                                }
                            }
                        }
                    });
                }
            }
            Op::Transpose { a } => {
                let [m, n] = nodes[*a].value.shape() else { unreachable!() };
                let (m, n) = (*m, *n);
                if rg(*a) {
                    Self::accumulate(grads, *a, m * n, |g| {
                        for i in 0..m {
                            for j in 0..n {
                                g[i * n + j] += go[j * m + i];
                            }
                        }
                    });
                }
            }
            Op::Embedding { weight, indices } => {
                let [_, d] = nodes[*weight].value.shape() else { unreachable!() };
                let d = *d;
                if rg(*weight) {
                    Self::accumulate(grads, *weight, numel(*weight), |g| {
                        for (t, &ix) in indices.iter().enumerate() {
                            for j in 0..d {
                                g[ix * d + j] += go[t * d + j];
                            }
                        }
                    });
                }
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let [m, n] = nodes[*x].value.shape() else { unreachable!() };
                let (m, n) = (*m, *n);
                let xs = nodes[*x].value.data();
                let gs = nodes[*gamma].value.data();
                if rg(*gamma) {
                    Self::accumulate(grads, *gamma, n, |g| {
                        for i in 0..m {
                            for j in 0..n {
                                let xhat = (xs[i * n + j] - mean[i]) * rstd[i];
                                g[j] += go[i * n + j] * xhat;
                            }
                        }
                    });
                }
                if rg(*beta) {
                    Self::accumulate(grads, *beta, n, |g| {
                        for i in 0..m {
                            for j in 0..n {
                                g[j] += go[i * n + j];
                            }
                        }
                    });
                }
                if rg(*x) {
                    Self::accumulate(grads, *x, m * n, |g| {
                        for i in 0..m {
                            let mut sum_gy = 0.0;
                            let mut sum_gy_xhat = 0.0;
                            for j in 0..n {
                                let xhat = (xs[i * n + j] - mean[i]) * rstd[i];
                                let gy = go[i * n + j] * gs[j];
                                sum_gy += gy;
                                sum_gy_xhat += gy * xhat;
                            }
                            let inv_n = 1.0 / n as f64;
                            for j in 0..n {
                                let xhat = (xs[i * n + j] - mean[i]) * rstd[i];
                                let gy = go[i * n + j] * gs[j];
                                g[i * n + j] +=
                                    rstd[i] * (gy - inv_n * sum_gy - xhat * inv_n * sum_gy_xhat);
                            }
                        }
                    });
                }
            }
            Op::CausalSoftmax { x } => {
                let [m, n] = nodes[idx].value.shape() else { unreachable!() };
                let (m, n) = (*m, *n);
                let s = nodes[idx].value.data();
                if rg(*x) {
                    Self::accumulate(grads, *x, m * n, |g| {
                        for i in 0..m {
                            let mut dot = 0.0;
                            for j in 0..=i {
                                dot += go[i * n + j] * s[i * n + j];
                            }
                            for j in 0..=i {
                                g[i * n + j] += s[i * n + j] * (go[i * n + j] - dot);
                            }
                        }
                    });
                }
            }
            Op::SoftmaxRows { x } => {
                let [m, n] = nodes[idx].value.shape() else { unreachable!() };
                let (m, n) = (*m, *n);
                let s = nodes[idx].value.data();
                if rg(*x) {
                    Self::accumulate(grads, *x, m * n, |g| {
                        for i in 0..m {
                            let mut dot = 0.0;
                            for j in 0..n {
                                dot += go[i * n + j] * s[i * n + j];
                            }
                            for j in 0..n {
                                g[i * n + j] += s[i * n + j] * (go[i * n + j] - dot);
                            }
                        }
                    });
                }
            }
            Op::LogSoftmaxRows { x } => {
                let [m, n] = nodes[idx].value.shape() else { unreachable!() };
                let (m, n) = (*m, *n);
                let y = nodes[idx].value.data();
                if rg(*x) {
                    Self::accumulate(grads, *x, m * n, |g| {
                        for i in 0..m {
                            let mut sum_go = 0.0;
                            for j in 0..n {
                                sum_go += go[i * n + j];
                            }
                            for j in 0..n {
                                g[i * n + j] += go[i * n + j] - y[i * n + j].exp() * sum_go;
                            }
                        }
                    });
                }
            }
            Op::Gelu { x } => {
                let xs = nodes[*x].value.data();
                if rg(*x) {
                    Self::accumulate(grads, *x, numel(*x), |g| {
                        for i in 0..g.len() {
                            g[i] += go[i] * gelu_bwd(xs[i]);
                        }
                    });
                }
            }
            Op::Sigmoid { x } => {
                let s = nodes[idx].value.data();
                if rg(*x) {
                    Self::accumulate(grads, *x, numel(*x), |g| {
                        for i in 0..g.len() {
                            g[i] += go[i] * s[i] * (1.0 - s[i]);
                        }
                    });
                }
            }
            Op::Log { x } => {
                let xs = nodes[*x].value.data();
                if rg(*x) {
                    Self::accumulate(grads, *x, numel(*x), |g| {
                        for i in 0..g.len() {
                            g[i] += go[i] / xs[i];
                        }
                    });
                }
            }
            Op::Exp { x } => {
                let y = nodes[idx].value.data();
                if rg(*x) {
                    Self::accumulate(grads, *x, numel(*x), |g| {
                        for i in 0..g.len() {
                            g[i] += go[i] * y[i];
                        }
                    });
                }
            }
            Op::Softplus { x } => {
                let xs = nodes[*x].value.data();
                if rg(*x) {
                    Self::accumulate(grads, *x, numel(*x), |g| {
                        for i in 0..g.len() {
                            g[i] += go[i] * sigmoid(xs[i]);
                        }
                    });
                }
            }
            Op::Sum { x } => {
                if rg(*x) {
                    Self::accumulate(grads, *x, numel(*x), |g| {
                        for gi in g.iter_mut() {
                            *gi += go[0];
                        }
                    });
                }
            }
            Op::Mean { x } => {
                let inv = 1.0 / numel(*x) as f64;
                if rg(*x) {
                    Self::accumulate(grads, *x, numel(*x), |g| {
                        for gi in g.iter_mut() {
                            *gi += go[0] * inv;
                        }
                    });
                }
            }
            Op::Gather { x, rows, cols } => {
                let [_, n] = nodes[*x].value.shape() else { unreachable!() };
                let n = *n;
                if rg(*x) {
                    Self::accumulate(grads, *x, numel(*x), |g| {
                        for (t, (&r, &c)) in rows.iter().zip(cols).enumerate() {
                            g[r * n + c] += go[t];
                        }
                    });
                }
            }
            Op::SliceCols { x, start, len } => {
                let [m, n] = nodes[*x].value.shape() else { unreachable!() };
                let (m, n) = (*m, *n);
                if rg(*x) {
                    Self::accumulate(grads, *x, m * n, |g| {
                        for i in 0..m {
                            for j in 0..*len {
                                g[i * n + start + j] += go[i * len + j];
                            }
                        }
                    });
                }
            }
            Op::ConcatCols { parts } => {
                let [m, _] = nodes[idx].value.shape() else { unreachable!() };
                let m = *m;
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|&p| nodes[p].value.shape()[1])
                    .collect();
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (pi, &p) in parts.iter().enumerate() {
                    let w = widths[pi];
                    if rg(p) {
                        Self::accumulate(grads, p, m * w, |g| {
                            for i in 0..m {
                                for j in 0..w {
                                    g[i * w + j] += go[i * total + offset + j];
                                }
                            }
                        });
                    }
                    offset += w;
                }
            }
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        denom += *o;
    }
    for o in out.iter_mut() {
        *o /= denom;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
