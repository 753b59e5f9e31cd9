use super::kernels::{mm_nn, mm_nt, mm_tn};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<E> {
    Leaf,
    /// Elementwise a + b (identical shapes).
    Add(usize, usize),
    /// c · a
    Scale(usize, E),
    /// Elementwise multiply by a constant vector (dropout masks, stream weights).
    MulConstVec(usize, Vec<E>),
    /// (m×k)·(k×n)
    MatMul(usize, usize),
    /// (m×k)·(n×k)ᵀ
    MatMulNT(usize, usize),
    /// Row gather from a (V×d) table.
    GatherRows(usize, Vec<usize>),
    /// Probability-weighted sum of table rows: weightsᵀ·(V×d) → (1×d).
    WeightedRowSum(usize, Vec<E>),
    /// Column slice [start, end) of a rank-2 tensor.
    SliceCols(usize, usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    /// Row-wise layer norm with learned gain and bias.
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
    },
    Gelu(usize),
    SoftmaxRows(usize),
    /// Sets entries above the diagonal to a large negative constant.
    CausalMask(usize),
    /// Per-row −log softmax(logits)[target]; output is an n-vector.
    CrossEntropyRows(usize, Vec<usize>),
    /// Constant-weighted reduction to a scalar.
    WeightedSum(usize, Vec<E>),
}

struct Node<E: Scalar> {
    value: Tensor<E>,
    op: Op<E>,
    trainable: bool,
}

const LN_EPS: f64 = 1e-5;
const MASK_NEG: f64 = -1e9;

/// Wengert tape. Forward methods record primitives; [`Tape::backward`]
/// replays them once in reverse, accumulating gradients in tape order.
pub struct Tape<E: Scalar> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            trainable: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Register an input tensor. Trainable leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor<E>, trainable: bool) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].trainable = trainable;
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target with respect to `v`, if any
    /// reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a.0, b.0)))
    }

    pub fn scale(&mut self, a: Var, c: E) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| x * c).collect::<Vec<_>>();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(a.0, c))
    }

    pub fn mul_const_vec(&mut self, a: Var, w: Vec<E>) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.numel() != w.len() {
            return Err(Error::Shape(format!(
                "mul_const_vec: {} elements vs {} weights",
                ta.numel(),
                w.len()
            )));
        }
        let data = ta.data().iter().zip(&w).map(|(&x, &c)| x * c).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::MulConstVec(a.0, w)))
    }

    /// Standard matrix product (m×k)·(k×n) → (m×n).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = (ta.rows(), ta.cols());
        let (kb, n) = (tb.rows(), tb.cols());
        if k != kb {
            return Err(Error::Shape(format!(
                "matmul: inner dims {k} vs {kb} (shapes {:?}·{:?})",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = vec![E::zero(); m * n];
        mm_nn(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a.0, b.0)))
    }

    /// (m×k)·(n×k)ᵀ → (m×n), used for attention scores.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = (ta.rows(), ta.cols());
        let (n, kb) = (tb.rows(), tb.cols());
        if k != kb {
            return Err(Error::Shape(format!(
                "matmul_nt: inner dims {k} vs {kb}"
            )));
        }
        let mut out = vec![E::zero(); m * n];
        mm_nt(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMulNT(a.0, b.0)))
    }

    pub fn gather_rows(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        let tt = &self.nodes[table.0].value;
        let (v, d) = (tt.rows(), tt.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in &ids {
            if id >= v {
                return Err(Error::Index(format!("gather_rows: row {id} ≥ {v}")));
            }
            out.extend_from_slice(tt.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(value, Op::GatherRows(table.0, ids)))
    }

    /// weightsᵀ·table → (1×d). Weights are data, not differentiated through.
    pub fn weighted_row_sum(&mut self, table: Var, weights: Vec<E>) -> Result<Var> {
        let tt = &self.nodes[table.0].value;
        let (v, d) = (tt.rows(), tt.cols());
        if weights.len() != v {
            return Err(Error::Shape(format!(
                "weighted_row_sum: {} weights vs {v} rows",
                weights.len()
            )));
        }
        let mut out = vec![E::zero(); d];
        for (r, &w) in weights.iter().enumerate() {
            if w == E::zero() {
                continue;
            }
            for (o, &t) in out.iter_mut().zip(tt.row(r)) {
                *o = *o + w * t;
            }
        }
        let value = Tensor::new(vec![1, d], out)?;
        Ok(self.push(value, Op::WeightedRowSum(table.0, weights)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (m, k) = (ta.rows(), ta.cols());
        if start >= end || end > k {
            return Err(Error::Index(format!(
                "slice_cols: [{start}, {end}) of {k} columns"
            )));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&ta.row(r)[start..end]);
        }
        let value = Tensor::new(vec![m, w], out)?;
        Ok(self.push(value, Op::SliceCols(a.0, start, end)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols: empty".into()));
        }
        let m = self.nodes[parts[0].0].value.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.rows() != m {
                return Err(Error::Shape("concat_cols: row counts differ".into()));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for p in parts {
                out.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let value = Tensor::new(vec![m, total], out)?;
        Ok(self.push(value, Op::ConcatCols(parts.iter().map(|v| v.0).collect())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows: empty".into()));
        }
        let d = self.nodes[parts[0].0].value.cols();
        let mut out = Vec::new();
        let mut m = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.cols() != d {
                return Err(Error::Shape("concat_rows: column counts differ".into()));
            }
            m += t.rows();
            out.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![m, d], out)?;
        Ok(self.push(value, Op::ConcatRows(parts.iter().map(|v| v.0).collect())))
    }

    /// Row-wise layer norm: (x − μ)/√(σ² + ε) ∘ gain + bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let (m, d) = (tx.rows(), tx.cols());
        let tg = &self.nodes[gain.0].value;
        let tb = &self.nodes[bias.0].value;
        if tg.numel() != d || tb.numel() != d {
            return Err(Error::Shape("layer_norm: gain/bias width".into()));
        }
        let eps = E::from_f64_lossy(LN_EPS);
        let inv_d = E::from_f64_lossy(1.0 / d as f64);
        let mut out = vec![E::zero(); m * d];
        for r in 0..m {
            let row = tx.row(r);
            let mean = row.iter().copied().sum::<E>() * inv_d;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<E>()
                * inv_d;
            let inv_std = (var + eps).sqrt().recip();
            let orow = &mut out[r * d..(r + 1) * d];
            for j in 0..d {
                let xhat = (row[j] - mean) * inv_std;
                orow[j] = xhat * tg.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor::new(vec![m, d], out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
            },
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| gelu_fwd(x)).collect::<Vec<_>>();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Gelu(a.0))
    }

    /// Row-stabilized softmax. Each output row is non-negative and sums to 1.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if !ta.all_finite() {
            return Err(Error::Numeric("softmax_rows: non-finite input".into()));
        }
        let (m, d) = (ta.rows(), ta.cols());
        let mut out = vec![E::zero(); m * d];
        for r in 0..m {
            softmax_into(ta.row(r), &mut out[r * d..(r + 1) * d]);
        }
        let value = Tensor::new(vec![m, d], out)?;
        Ok(self.push(value, Op::SoftmaxRows(a.0)))
    }

    /// Causal mask for a square score matrix: entries with column > row
    /// become a large negative constant and pass no gradient.
    pub fn causal_mask(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (m, n) = (ta.rows(), ta.cols());
        if m != n {
            return Err(Error::Shape(format!("causal_mask: {m}×{n} not square")));
        }
        let neg = E::from_f64_lossy(MASK_NEG);
        let mut out = ta.data().to_vec();
        for r in 0..m {
            for c in (r + 1)..n {
                out[r * n + c] = neg;
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::CausalMask(a.0)))
    }

    /// Token-wise cross entropy: ℓ_t = −log softmax(logits_t)[target_t].
    /// No reduction; output has one entry per row.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = &self.nodes[logits.0].value;
        let (n, v) = (tl.rows(), tl.cols());
        if targets.len() != n {
            return Err(Error::Shape(format!(
                "cross_entropy: {} targets vs {n} rows",
                targets.len()
            )));
        }
        let mut out = Vec::with_capacity(n);
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::Index(format!("cross_entropy: target {t} ≥ {v}")));
            }
            let row = tl.row(r);
            out.push(log_sum_exp(row) - row[t]);
        }
        let value = Tensor::new(vec![n], out)?;
        Ok(self.push(value, Op::CrossEntropyRows(logits.0, targets.to_vec())))
    }

    /// Constant-weighted reduction to a scalar: Σ wᵢ·xᵢ.
    pub fn weighted_sum(&mut self, a: Var, w: Vec<E>) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.numel() != w.len() {
            return Err(Error::Shape(format!(
                "weighted_sum: {} elements vs {} weights",
                ta.numel(),
                w.len()
            )));
        }
        let s = ta
            .data()
            .iter()
            .zip(&w)
            .map(|(&x, &c)| x * c)
            .sum::<E>();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(a.0, w)))
    }

    /// Mean of all elements.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.numel();
        let w = vec![E::from_f64_lossy(1.0 / n as f64); n];
        self.weighted_sum(a, w)
    }

    /// Reverse pass from a scalar loss. Gradients accumulate in reverse tape
    /// order; every trainable leaf reachable from `loss` ends up populated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(E::one()));

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn grad_buf(&mut self, idx: usize) -> &mut Tensor<E> {
        if self.grads[idx].is_none() {
            let shape = self.nodes[idx].value.shape().to_vec();
            self.grads[idx] = Some(Tensor::zeros(shape));
        }
        self.grads[idx].as_mut().unwrap()
    }

    fn propagate(&mut self, i: usize, g: &Tensor<E>) -> Result<()> {
        // Ops are moved out structurally via indices; values stay put.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (o, &gv) in self.grad_buf(*a).data_mut().iter_mut().zip(g.data()) {
                    *o = *o + gv;
                }
                for (o, &gv) in self.grad_buf(*b).data_mut().iter_mut().zip(g.data()) {
                    *o = *o + gv;
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                for (o, &gv) in self.grad_buf(*a).data_mut().iter_mut().zip(g.data()) {
                    *o = *o + gv * c;
                }
            }
            Op::MulConstVec(a, w) => {
                let ga = self.grad_buf(*a);
                for ((o, &gv), &c) in ga.data_mut().iter_mut().zip(g.data()).zip(w) {
                    *o = *o + gv * c;
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = {
                    let t = &self.nodes[*a].value;
                    (t.rows(), t.cols())
                };
                let n = self.nodes[*b].value.cols();
                // dA = g · Bᵀ
                let bdata = self.nodes[*b].value.data().to_vec();
                let mut da = vec![E::zero(); m * k];
                mm_nt(g.data(), &bdata, &mut da, m, n, k);
                for (o, dv) in self.grad_buf(*a).data_mut().iter_mut().zip(da) {
                    *o = *o + dv;
                }
                // dB = Aᵀ · g
                let adata = self.nodes[*a].value.data().to_vec();
                let mut db = vec![E::zero(); k * n];
                mm_tn(&adata, g.data(), &mut db, m, k, n);
                for (o, dv) in self.grad_buf(*b).data_mut().iter_mut().zip(db) {
                    *o = *o + dv;
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = {
                    let t = &self.nodes[*a].value;
                    (t.rows(), t.cols())
                };
                let n = self.nodes[*b].value.rows();
                // value = A·Bᵀ; dA = g·B, dB = gᵀ·A
                let bdata = self.nodes[*b].value.data().to_vec();
                let mut da = vec![E::zero(); m * k];
                mm_nn(g.data(), &bdata, &mut da, m, n, k);
                for (o, dv) in self.grad_buf(*a).data_mut().iter_mut().zip(da) {
                    *o = *o + dv;
                }
                let adata = self.nodes[*a].value.data().to_vec();
                let mut db = vec![E::zero(); n * k];
                mm_tn(g.data(), &adata, &mut db, m, n, k);
                for (o, dv) in self.grad_buf(*b).data_mut().iter_mut().zip(db) {
                    *o = *o + dv;
                }
            }
            Op::GatherRows(table, ids) => {
                let d = self.nodes[*table].value.cols();
                let gt = self.grad_buf(*table);
                for (r, &id) in ids.iter().enumerate() {
                    let grow = &g.data()[r * d..(r + 1) * d];
                    let trow = &mut gt.data_mut()[id * d..(id + 1) * d];
                    for (o, &gv) in trow.iter_mut().zip(grow) {
                        *o = *o + gv;
                    }
                }
            }
            Op::WeightedRowSum(table, w) => {
                let d = self.nodes[*table].value.cols();
                let gt = self.grad_buf(*table);
                for (r, &c) in w.iter().enumerate() {
                    if c == E::zero() {
                        continue;
                    }
                    let trow = &mut gt.data_mut()[r * d..(r + 1) * d];
                    for (o, &gv) in trow.iter_mut().zip(g.data()) {
                        *o = *o + c * gv;
                    }
                }
            }
            Op::SliceCols(a, start, _end) => {
                let k = self.nodes[*a].value.cols();
                let w = g.cols();
                let m = g.rows();
                let ga = self.grad_buf(*a);
                for r in 0..m {
                    let grow = &g.data()[r * w..(r + 1) * w];
                    let arow = &mut ga.data_mut()[r * k + start..r * k + start + w];
                    for (o, &gv) in arow.iter_mut().zip(grow) {
                        *o = *o + gv;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let m = g.rows();
                let total = g.cols();
                let widths: Vec<usize> =
                    parts.iter().map(|&p| self.nodes[p].value.cols()).collect();
                let mut offset = 0;
                for (pi, &p) in parts.iter().enumerate() {
                    let w = widths[pi];
                    let gp = self.grad_buf(p);
                    for r in 0..m {
                        let grow = &g.data()[r * total + offset..r * total + offset + w];
                        let prow = &mut gp.data_mut()[r * w..(r + 1) * w];
                        for (o, &gv) in prow.iter_mut().zip(grow) {
                            *o = *o + gv;
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let d = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let rows = self.nodes[p].value.rows();
                    let gslice = &g.data()[offset * d..(offset + rows) * d];
                    let gp = self.grad_buf(p);
                    for (o, &gv) in gp.data_mut().iter_mut().zip(gslice) {
                        *o = *o + gv;
                    }
                    offset += rows;
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                self.layer_norm_backward(*x, *gain, *bias, g)?;
            }
            Op::Gelu(a) => {
                let deriv: Vec<E> = self.nodes[*a]
                    .value
                    .data()
                    .iter()
                    .map(|&x| gelu_bwd(x))
                    .collect();
                let ga = self.grad_buf(*a);
                for ((o, &gv), dv) in ga.data_mut().iter_mut().zip(g.data()).zip(deriv) {
                    *o = *o + gv * dv;
                }
            }
            Op::SoftmaxRows(a) => {
                let (m, d) = {
                    let t = &self.nodes[i].value;
                    (t.rows(), t.cols())
                };
                let y = self.nodes[i].value.data().to_vec();
                let ga = self.grad_buf(*a);
                for r in 0..m {
                    let yrow = &y[r * d..(r + 1) * d];
                    let grow = &g.data()[r * d..(r + 1) * d];
                    let dot = yrow
                        .iter()
                        .zip(grow)
                        .map(|(&yv, &gv)| yv * gv)
                        .sum::<E>();
                    let arow = &mut ga.data_mut()[r * d..(r + 1) * d];
                    for j in 0..d {
                        arow[j] = arow[j] + yrow[j] * (grow[j] - dot);
                    }
                }
            }
            Op::CausalMask(a) => {
                let n = g.rows();
                let ga = self.grad_buf(*a);
                for r in 0..n {
                    for c in 0..=r {
                        let idx = r * n + c;
                        ga.data_mut()[idx] = ga.data_mut()[idx] + g.data()[idx];
                    }
                }
            }
            Op::CrossEntropyRows(logits, targets) => {
                let (n, v) = {
                    let t = &self.nodes[*logits].value;
                    (t.rows(), t.cols())
                };
                let z = self.nodes[*logits].value.data().to_vec();
                let gl = self.grad_buf(*logits);
                let mut probs = vec![E::zero(); v];
                for r in 0..n {
                    let u = g.data()[r];
                    if u == E::zero() {
                        continue;
                    }
                    softmax_into(&z[r * v..(r + 1) * v], &mut probs);
                    let grow = &mut gl.data_mut()[r * v..(r + 1) * v];
                    for j in 0..v {
                        grow[j] = grow[j] + u * probs[j];
                    }
                    grow[targets[r]] = grow[targets[r]] - u;
                }
            }
            Op::WeightedSum(a, w) => {
                let u = g.item();
                let ga = self.grad_buf(*a);
                for (o, &c) in ga.data_mut().iter_mut().zip(w) {
                    *o = *o + u * c;
                }
            }
        }
        self.nodes[i].op = op;
        Ok(())
    }

    fn layer_norm_backward(&mut self, x: usize, gain: usize, bias: usize, g: &Tensor<E>) -> Result<()> {
        let tx = self.nodes[x].value.clone();
        let tg = self.nodes[gain].value.clone();
        let (m, d) = (tx.rows(), tx.cols());
        let eps = E::from_f64_lossy(LN_EPS);
        let inv_d = E::from_f64_lossy(1.0 / d as f64);

        let mut dgain = vec![E::zero(); d];
        let mut dbias = vec![E::zero(); d];
        let mut dx = vec![E::zero(); m * d];
        for r in 0..m {
            let row = tx.row(r);
            let grow = &g.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<E>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() * inv_d;
            let inv_std = (var + eps).sqrt().recip();

            let mut mean_gx = E::zero();
            let mut mean_gxx = E::zero();
            for j in 0..d {
                let xhat = (row[j] - mean) * inv_std;
                dgain[j] = dgain[j] + grow[j] * xhat;
                dbias[j] = dbias[j] + grow[j];
                let gx = grow[j] * tg.data()[j];
                mean_gx = mean_gx + gx;
                mean_gxx = mean_gxx + gx * xhat;
            }
            mean_gx = mean_gx * inv_d;
            mean_gxx = mean_gxx * inv_d;
            let dxr = &mut dx[r * d..(r + 1) * d];
            for j in 0..d {
                let xhat = (row[j] - mean) * inv_std;
                let gx = grow[j] * tg.data()[j];
                dxr[j] = inv_std * (gx - mean_gx - xhat * mean_gxx);
            }
        }
        for (o, dv) in self.grad_buf(x).data_mut().iter_mut().zip(dx) {
            *o = *o + dv;
        }
        for (o, dv) in self.grad_buf(gain).data_mut().iter_mut().zip(dgain) {
            *o = *o + dv;
        }
        for (o, dv) in self.grad_buf(bias).data_mut().iter_mut().zip(dbias) {
            *o = *o + dv;
        }
        Ok(())
    }
}

fn softmax_into<E: Scalar>(row: &[E], out: &mut [E]) {
    let max = row.iter().copied().fold(E::neg_infinity(), E::max);
    let mut sum = E::zero();
    for (o, &z) in out.iter_mut().zip(row) {
        let e = (z - max).exp();
        *o = e;
        sum = sum + e;
    }
    let inv = sum.recip();
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

fn log_sum_exp<E: Scalar>(row: &[E]) -> E {
    let max = row.iter().copied().fold(E::neg_infinity(), E::max);
    let sum = row.iter().map(|&z| (z - max).exp()).sum::<E>();
    max + sum.ln()
}

fn gelu_fwd<E: Scalar>(x: E) -> E {
    let c = E::from_f64_lossy(0.7978845608028654); // sqrt(2/π)
    let k = E::from_f64_lossy(0.044715);
    let half = E::from_f64_lossy(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (E::one() + u.tanh())
}

fn gelu_bwd<E: Scalar>(x: E) -> E {
    let c = E::from_f64_lossy(0.7978845608028654);
    let k = E::from_f64_lossy(0.044715);
    let half = E::from_f64_lossy(0.5);
    let three = E::from_f64_lossy(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = E::one() - t * t;
    half * (E::one() + t) + half * x * sech2 * c * (E::one() + three * k * x * x)
}
