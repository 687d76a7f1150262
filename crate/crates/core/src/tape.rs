//! Reverse-mode differentiation over a fixed set of tensor primitives.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! registered with a [`ParamId`] and borrowed, so building a tape per sample
//! costs no parameter copies. [`Tape::backward`] walks the record in reverse
//! and returns one gradient per registered parameter.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{std_normal_cdf, std_normal_pdf, ShapeError, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("loss must be a single value, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRowBias(usize, usize),
    Scale(usize, T),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        normalized: Tensor<T>,
        inv_std: Vec<T>,
    },
    Gelu(usize),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize),
    SumSquares(usize),
    RowSumSquares(usize),
    Log1p(usize),
    Sum(usize),
    AddTiled(usize, usize),
    StridedRows {
        x: usize,
        group: usize,
        offset: usize,
    },
    GroupedAttention {
        q: usize,
        k: usize,
        v: usize,
        group: usize,
        q_per: usize,
        scale: T,
        weights: Vec<T>,
    },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<ParamId>,
}

pub struct Tape<'a, T: Scalar> {
    id: u64,
    nodes: Vec<Node<'a, T>>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable used on a foreign tape");
        v.index
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.push(Cow::Owned(value), op, needs_grad)
    }

    /// Registers a trainable parameter; gradients are reported under `id`.
    pub fn param(&mut self, id: ParamId, value: &'a Tensor<T>) -> Var {
        let v = self.push(Cow::Borrowed(value), Op::Leaf, true);
        self.nodes[v.index].param = Some(id);
        v
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.idx(v)].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let out = self.nodes[ai].value.matmul(&self.nodes[bi].value)?;
        Ok(self.derived(out, Op::MatMul(ai, bi), &[ai, bi]))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let out = self.nodes[ai].value.matmul_t(&self.nodes[bi].value)?;
        Ok(self.derived(out, Op::MatMulT(ai, bi), &[ai, bi]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let out = self.nodes[ai].value.add(&self.nodes[bi].value)?;
        Ok(self.derived(out, Op::Add(ai, bi), &[ai, bi]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let out = self.nodes[ai].value.sub(&self.nodes[bi].value)?;
        Ok(self.derived(out, Op::Sub(ai, bi), &[ai, bi]))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let out = self.nodes[ai].value.hadamard(&self.nodes[bi].value)?;
        Ok(self.derived(out, Op::Mul(ai, bi), &[ai, bi]))
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var, ShapeError> {
        let (xi, bi) = (self.idx(x), self.idx(bias));
        let out = self.nodes[xi].value.add_row_bias(&self.nodes[bi].value)?;
        Ok(self.derived(out, Op::AddRowBias(xi, bi), &[xi, bi]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let xi = self.idx(x);
        let out = self.nodes[xi].value.scale(s);
        self.derived(out, Op::Scale(xi, s), &[xi])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, ShapeError> {
        let xi = self.idx(x);
        let out = self.nodes[xi].value.softmax_rows()?;
        Ok(self.derived(out, Op::SoftmaxRows(xi), &[xi]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, rho: T) -> Result<Var, ShapeError> {
        let (xi, gi, bi) = (self.idx(x), self.idx(gamma), self.idx(beta));
        let (out, normalized, inv_std) =
            self.nodes[xi]
                .value
                .layer_norm_parts(&self.nodes[gi].value, &self.nodes[bi].value, rho)?;
        let op = Op::LayerNorm {
            x: xi,
            gamma: gi,
            beta: bi,
            normalized,
            inv_std,
        };
        Ok(self.derived(out, op, &[xi, gi, bi]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xi = self.idx(x);
        let out = self.nodes[xi].value.gelu();
        self.derived(out, Op::Gelu(xi), &[xi])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, ShapeError> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect();
        let refs: Vec<&Tensor<T>> = idx.iter().map(|&i| self.nodes[i].value.as_ref()).collect();
        let out = Tensor::concat_cols(&refs)?;
        let op = Op::ConcatCols(idx.clone());
        Ok(self.derived(out, op, &idx))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, ShapeError> {
        let xi = self.idx(x);
        let out = self.nodes[xi].value.slice_rows(start, len)?;
        Ok(self.derived(out, Op::SliceRows(xi, start), &[xi]))
    }

    /// Sum of squared entries, as a 1×1 tensor.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let xi = self.idx(x);
        let s = self.nodes[xi].value.data().iter().map(|&v| v * v).sum();
        self.derived(Tensor::scalar(s), Op::SumSquares(xi), &[xi])
    }

    /// Row-wise sum of squares, as a column vector.
    pub fn row_sum_squares(&mut self, x: Var) -> Var {
        let xi = self.idx(x);
        let src = &self.nodes[xi].value;
        let n = src.cols();
        let out: Vec<T> = src.data().chunks_exact(n).map(|r| r.iter().map(|&v| v * v).sum()).collect();
        self.derived(Tensor::col_vector(out), Op::RowSumSquares(xi), &[xi])
    }

    /// `x + [p; p; …; p]` where `x` stacks whole copies of `p` row-wise.
    pub fn add_tiled(&mut self, x: Var, p: Var) -> Result<Var, ShapeError> {
        let (xi, pi) = (self.idx(x), self.idx(p));
        let (xv, pv) = (&self.nodes[xi].value, &self.nodes[pi].value);
        if xv.rank() != 2 || pv.rank() != 2 || xv.cols() != pv.cols() || xv.rows() % pv.rows() != 0 {
            return Err(ShapeError::Mismatch {
                op: "add_tiled",
                left: xv.shape().to_vec(),
                right: pv.shape().to_vec(),
            });
        }
        let mut out = xv.as_ref().clone();
        for chunk in out.data_mut().chunks_exact_mut(pv.len()) {
            for (o, &v) in chunk.iter_mut().zip(pv.data()) {
                *o += v;
            }
        }
        Ok(self.derived(out, Op::AddTiled(xi, pi), &[xi, pi]))
    }

    /// Rows `offset, offset + group, offset + 2·group, …` of `x`.
    pub fn strided_rows(&mut self, x: Var, group: usize, offset: usize) -> Result<Var, ShapeError> {
        let xi = self.idx(x);
        let src = &self.nodes[xi].value;
        if src.rank() != 2 || group == 0 || offset >= group || src.rows() % group != 0 {
            return Err(ShapeError::Invalid {
                op: "strided_rows",
                detail: format!("cannot take row {offset} of every {group} from {:?}", src.shape()),
            });
        }
        let n = src.cols();
        let count = src.rows() / group;
        let mut data = Vec::with_capacity(count * n);
        for b in 0..count {
            data.extend_from_slice(src.row(b * group + offset));
        }
        let out = Tensor::new(vec![count, n], data)?;
        Ok(self.derived(out, Op::StridedRows { x: xi, group, offset }, &[xi]))
    }

    /// Scaled dot-product attention over independent groups.
    ///
    /// `k` and `v` stack `B` groups of `group` rows, `q` stacks `B` groups of
    /// `q_per` rows. Each query row attends to the key/value rows of its own
    /// group: `softmax(q kᵀ · scale) v`.
    pub fn grouped_attention(&mut self, q: Var, k: Var, v: Var, group: usize, q_per: usize, scale: T) -> Result<Var, ShapeError> {
        let (qi, ki, vi) = (self.idx(q), self.idx(k), self.idx(v));
        let (qv, kv, vv) = (&self.nodes[qi].value, &self.nodes[ki].value, &self.nodes[vi].value);
        let d = qv.cols();
        let ok = qv.rank() == 2
            && kv.shape() == vv.shape()
            && kv.cols() == d
            && group > 0
            && q_per > 0
            && kv.rows() % group == 0
            && qv.rows() == kv.rows() / group * q_per;
        if !ok {
            return Err(ShapeError::Invalid {
                op: "grouped_attention",
                detail: format!("q {:?}, k {:?}, v {:?}, group {group}, q_per {q_per}", qv.shape(), kv.shape(), vv.shape()),
            });
        }
        let batch = kv.rows() / group;
        let mut weights = vec![T::zero(); batch * q_per * group];
        let mut out = vec![T::zero(); batch * q_per * d];
        for b in 0..batch {
            for r in 0..q_per {
                let qrow = qv.row(b * q_per + r);
                let w = &mut weights[(b * q_per + r) * group..(b * q_per + r + 1) * group];
                let mut max = T::neg_infinity();
                for (j, wj) in w.iter_mut().enumerate() {
                    *wj = crate::tensor::dot(qrow, kv.row(b * group + j)) * scale;
                    max = max.max(*wj);
                }
                let mut total = T::zero();
                for wj in w.iter_mut() {
                    *wj = (*wj - max).exp();
                    total += *wj;
                }
                let o = &mut out[(b * q_per + r) * d..(b * q_per + r + 1) * d];
                for (j, wj) in w.iter_mut().enumerate() {
                    *wj /= total;
                    for (oc, &vc) in o.iter_mut().zip(vv.row(b * group + j)) {
                        *oc += *wj * vc;
                    }
                }
            }
        }
        let out = Tensor::new(vec![batch * q_per, d], out)?;
        let op = Op::GroupedAttention {
            q: qi,
            k: ki,
            v: vi,
            group,
            q_per,
            scale,
            weights,
        };
        Ok(self.derived(out, op, &[qi, ki, vi]))
    }

    /// Element-wise `ln(1 + x)`.
    pub fn log1p(&mut self, x: Var) -> Var {
        let xi = self.idx(x);
        let out = self.nodes[xi].value.map(|v| v.ln_1p());
        self.derived(out, Op::Log1p(xi), &[xi])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let xi = self.idx(x);
        let s = self.nodes[xi].value.sum();
        self.derived(Tensor::scalar(s), Op::Sum(xi), &[xi])
    }

    /// Gradients of the scalar `loss` with respect to every registered
    /// parameter. Parameters the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TapeError> {
        if loss.tape != self.id || loss.index >= self.nodes.len() {
            return Err(TapeError::ForeignVar);
        }
        let root = loss.index;
        if self.nodes[root].value.len() != 1 {
            return Err(TapeError::NonScalarLoss(self.nodes[root].value.shape().to_vec()));
        }

        let mut adj: Vec<Option<Tensor<T>>> = (0..=root).map(|_| None).collect();
        adj[root] = Some(Tensor::ones(self.nodes[root].value.shape()));

        for i in (0..=root).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                adj[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut adj)?;
        }

        let mut grads = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(id) = node.param {
                let g = adj
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                match grads.get_mut(&id) {
                    None => {
                        grads.insert(id, g);
                    }
                    // same parameter registered twice: contributions add
                    Some(acc) => Tensor::add_assign(acc, &g)?,
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, adj: &mut [Option<Tensor<T>>]) -> Result<(), ShapeError> {
        let val = |k: usize| -> &Tensor<T> { &self.nodes[k].value };
        let wants = |k: usize| self.nodes[k].needs_grad;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    accumulate(adj, *a, g.matmul_t(val(*b))?)?;
                }
                if wants(*b) {
                    accumulate(adj, *b, val(*a).t_matmul(g)?)?;
                }
            }
            Op::MatMulT(a, b) => {
                if wants(*a) {
                    accumulate(adj, *a, g.matmul(val(*b))?)?;
                }
                if wants(*b) {
                    accumulate(adj, *b, g.t_matmul(val(*a))?)?;
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(adj, *a, g.clone())?;
                }
                if wants(*b) {
                    accumulate(adj, *b, g.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(adj, *a, g.clone())?;
                }
                if wants(*b) {
                    accumulate(adj, *b, g.scale(-T::one()))?;
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    accumulate(adj, *a, g.hadamard(val(*b))?)?;
                }
                if wants(*b) {
                    accumulate(adj, *b, g.hadamard(val(*a))?)?;
                }
            }
            Op::AddRowBias(x, b) => {
                if wants(*x) {
                    accumulate(adj, *x, g.clone())?;
                }
                if wants(*b) {
                    let n = g.cols();
                    let mut db = vec![T::zero(); n];
                    for row in g.data().chunks_exact(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let db = Tensor::new(val(*b).shape().to_vec(), db)?;
                    accumulate(adj, *b, db)?;
                }
            }
            Op::Scale(x, s) => {
                if wants(*x) {
                    accumulate(adj, *x, g.scale(*s))?;
                }
            }
            Op::SoftmaxRows(x) => {
                if wants(*x) {
                    let y = &self.nodes[i].value;
                    let n = y.cols();
                    let mut dx = g.clone();
                    for (dx_row, y_row) in dx.data_mut().chunks_exact_mut(n).zip(y.data().chunks_exact(n)) {
                        let inner: T = dx_row.iter().zip(y_row).map(|(&gv, &yv)| gv * yv).sum();
                        for (d, &yv) in dx_row.iter_mut().zip(y_row) {
                            *d = yv * (*d - inner);
                        }
                    }
                    accumulate(adj, *x, dx)?;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let d = g.cols();
                if wants(*gamma) {
                    let mut dg = vec![T::zero(); d];
                    for (g_row, n_row) in g.data().chunks_exact(d).zip(normalized.data().chunks_exact(d)) {
                        for k in 0..d {
                            dg[k] += g_row[k] * n_row[k];
                        }
                    }
                    accumulate(adj, *gamma, Tensor::new(val(*gamma).shape().to_vec(), dg)?)?;
                }
                if wants(*beta) {
                    let mut db = vec![T::zero(); d];
                    for g_row in g.data().chunks_exact(d) {
                        for k in 0..d {
                            db[k] += g_row[k];
                        }
                    }
                    accumulate(adj, *beta, Tensor::new(val(*beta).shape().to_vec(), db)?)?;
                }
                if wants(*x) {
                    let gam = val(*gamma).data();
                    let dn = T::from_usize(d).unwrap();
                    let mut dx = Tensor::zeros(g.shape());
                    for (r, ((g_row, n_row), dx_row)) in g
                        .data()
                        .chunks_exact(d)
                        .zip(normalized.data().chunks_exact(d))
                        .zip(dx.data_mut().chunks_exact_mut(d))
                        .enumerate()
                    {
                        let mut sum_dxh = T::zero();
                        let mut sum_dxh_xh = T::zero();
                        for k in 0..d {
                            let dxh = g_row[k] * gam[k];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * n_row[k];
                        }
                        let scale = inv_std[r] / dn;
                        for k in 0..d {
                            let dxh = g_row[k] * gam[k];
                            dx_row[k] = scale * (dn * dxh - sum_dxh - n_row[k] * sum_dxh_xh);
                        }
                    }
                    accumulate(adj, *x, dx)?;
                }
            }
            Op::Gelu(x) => {
                if wants(*x) {
                    let dx = val(*x).zip_with(g, "gelu_backward", |xv, gv| {
                        gv * (std_normal_cdf(xv) + xv * std_normal_pdf(xv))
                    })?;
                    accumulate(adj, *x, dx)?;
                }
            }
            Op::ConcatCols(parts) => {
                let m = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let pn = val(p).cols();
                    if wants(p) {
                        let mut dp = Vec::with_capacity(m * pn);
                        for r in 0..m {
                            dp.extend_from_slice(&g.row(r)[offset..offset + pn]);
                        }
                        accumulate(adj, p, Tensor::new(vec![m, pn], dp)?)?;
                    }
                    offset += pn;
                }
            }
            Op::SliceRows(x, start) => {
                if wants(*x) {
                    let src = val(*x);
                    let n = src.cols();
                    let mut dx = Tensor::zeros(src.shape());
                    dx.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                    accumulate(adj, *x, dx)?;
                }
            }
            Op::SumSquares(x) => {
                if wants(*x) {
                    let two_g = g.data()[0] + g.data()[0];
                    accumulate(adj, *x, val(*x).scale(two_g))?;
                }
            }
            Op::RowSumSquares(x) => {
                if wants(*x) {
                    let src = val(*x);
                    let n = src.cols();
                    let mut dx = src.clone();
                    for (row, &gr) in dx.data_mut().chunks_exact_mut(n).zip(g.data()) {
                        for v in row {
                            *v *= gr + gr;
                        }
                    }
                    accumulate(adj, *x, dx)?;
                }
            }
            Op::AddTiled(x, p) => {
                if wants(*x) {
                    accumulate(adj, *x, g.clone())?;
                }
                if wants(*p) {
                    let mut dp = Tensor::zeros(val(*p).shape());
                    let len = dp.len();
                    for chunk in g.data().chunks_exact(len) {
                        for (d, &v) in dp.data_mut().iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    accumulate(adj, *p, dp)?;
                }
            }
            Op::StridedRows { x, group, offset } => {
                if wants(*x) {
                    let mut dx = Tensor::zeros(val(*x).shape());
                    for b in 0..g.rows() {
                        dx.row_mut(b * group + offset).copy_from_slice(g.row(b));
                    }
                    accumulate(adj, *x, dx)?;
                }
            }
            Op::GroupedAttention {
                q,
                k,
                v,
                group,
                q_per,
                scale,
                weights,
            } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let d = qv.cols();
                let batch = kv.rows() / group;
                let mut dq = Tensor::zeros(qv.shape());
                let mut dk = Tensor::zeros(kv.shape());
                let mut dv = Tensor::zeros(vv.shape());
                let mut dw = vec![T::zero(); *group];
                for b in 0..batch {
                    for r in 0..*q_per {
                        let qr = b * q_per + r;
                        let w = &weights[qr * group..(qr + 1) * group];
                        let go = g.row(qr);
                        // dV += wᵀ g; dW = g Vᵀ
                        for j in 0..*group {
                            let vrow = b * group + j;
                            dw[j] = crate::tensor::dot(go, vv.row(vrow));
                            for (dvc, &gc) in dv.row_mut(vrow).iter_mut().zip(go) {
                                *dvc += w[j] * gc;
                            }
                        }
                        // softmax backward, then through the scaled logits
                        let inner: T = w.iter().zip(&dw).map(|(&a, &b)| a * b).sum();
                        for j in 0..*group {
                            let dl = w[j] * (dw[j] - inner) * *scale;
                            let krow = b * group + j;
                            for c in 0..d {
                                let qc = qv.data()[qr * d + c];
                                dq.data_mut()[qr * d + c] += dl * kv.data()[krow * d + c];
                                dk.data_mut()[krow * d + c] += dl * qc;
                            }
                        }
                    }
                }
                if wants(*q) {
                    accumulate(adj, *q, dq)?;
                }
                if wants(*k) {
                    accumulate(adj, *k, dk)?;
                }
                if wants(*v) {
                    accumulate(adj, *v, dv)?;
                }
            }
            Op::Log1p(x) => {
                if wants(*x) {
                    let dx = val(*x).zip_with(g, "log1p_backward", |xv, gv| gv / (T::one() + xv))?;
                    accumulate(adj, *x, dx)?;
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    accumulate(adj, *x, Tensor::full(val(*x).shape(), g.data()[0]))?;
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(adj: &mut [Option<Tensor<T>>], k: usize, g: Tensor<T>) -> Result<(), ShapeError> {
    match &mut adj[k] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Gradient tensors keyed by parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    grads: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `other` entry-wise; parameters missing on either side are kept.
    pub fn accumulate(&mut self, other: &Self) -> Result<(), ShapeError> {
        for (id, g) in &other.grads {
            match self.grads.get_mut(id) {
                Some(acc) => acc.add_assign(g)?,
                None => {
                    self.grads.insert(*id, g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn global_norm(&self) -> T {
        self.grads
            .values()
            .flat_map(|g| g.data().iter())
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
    }

    pub fn into_map(self) -> BTreeMap<ParamId, Tensor<T>> {
        self.grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let p = Tensor::<f64>::col_vector(vec![1.0, -2.0, 0.5]);
        let mut tape = Tape::new();
        let v = tape.param(ParamId(0), &p);
        let loss = tape.sum_squares(v);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let p = Tensor::<f64>::ones(&[2, 2]);
        let mut tape = Tape::new();
        let _ = tape.param(ParamId(3), &p);
        let c = tape.constant(Tensor::scalar(4.0));
        let loss = tape.sum(c);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(ParamId(3)).unwrap(), &Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn backward_rejects_foreign_or_non_scalar() {
        let p = Tensor::<f64>::ones(&[2, 2]);
        let mut a = Tape::new();
        let mut b = Tape::<f64>::new();
        let va = a.param(ParamId(0), &p);
        let vb = b.constant(Tensor::scalar(1.0));
        assert!(matches!(a.backward(vb), Err(TapeError::ForeignVar)));
        assert!(matches!(a.backward(va), Err(TapeError::NonScalarLoss(_))));
    }

    /// Central differences over every entry of every parameter of a small
    /// composite touching each primitive.
    #[test]
    fn primitives_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut params: Vec<Tensor<f64>> = vec![
            Tensor::from_fn(3, 4, |_, _| rng.gen_range(-1.0..1.0)),
            Tensor::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0)),
            Tensor::vector((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            Tensor::vector((0..4).map(|_| rng.gen_range(0.5..1.5)).collect()),
            Tensor::vector((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()),
        ];
        let mask = Tensor::row_vector(vec![1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0]);

        let eval = |ps: &[Tensor<f64>]| -> (f64, Option<Gradients<f64>>) {
            let mut t = Tape::new();
            let v: Vec<Var> = ps.iter().enumerate().map(|(i, p)| t.param(ParamId(i), p)).collect();
            let h = t.matmul(v[0], v[1]).unwrap();
            let h = t.add_row_bias(h, v[2]).unwrap();
            let s = t.matmul_t(h, h).unwrap();
            let s = t.scale(s, 0.5);
            let a = t.softmax_rows(s).unwrap();
            let c = t.matmul(a, h).unwrap();
            let c = t.add(c, h).unwrap();
            let n = t.layer_norm(c, v[3], v[4], 1e-5).unwrap();
            let f = t.gelu(n);
            let m = t.mul(f, n).unwrap();
            let d = t.sub(m, c).unwrap();
            let last = t.slice_rows(d, 2, 1).unwrap();
            let first = t.slice_rows(f, 0, 1).unwrap();
            let cat = t.concat_cols(&[last, first]).unwrap();
            let k = t.constant(mask.clone());
            let masked = t.mul(cat, k).unwrap();
            let ss = t.sum_squares(masked);
            let l = t.log1p(ss);
            let tot = t.sum(d);
            let tot = t.scale(tot, 0.1);
            let loss = t.add(l, tot).unwrap();
            let value = t.value(loss).item().unwrap();
            (value, Some(t.backward(loss).unwrap()))
        };

        let (_, grads) = eval(&params);
        let grads = grads.unwrap();
        let h = 1e-6;
        for pi in 0..params.len() {
            let analytic = grads.get(ParamId(pi)).unwrap().clone();
            let mut numeric = Tensor::zeros(params[pi].shape());
            for k in 0..params[pi].len() {
                let orig = params[pi].data()[k];
                params[pi].data_mut()[k] = orig + h;
                let up = eval(&params).0;
                params[pi].data_mut()[k] = orig - h;
                let down = eval(&params).0;
                params[pi].data_mut()[k] = orig;
                numeric.data_mut()[k] = (up - down) / (2.0 * h);
            }
            let err = analytic.sub(&numeric).unwrap().frobenius_norm()
                / (analytic.frobenius_norm() + numeric.frobenius_norm()).max(1e-12);
            assert!(err < 1e-6, "param {pi}: relative error {err}");
        }
    }

    /// Central differences through the grouped (batched) operations.
    #[test]
    fn grouped_ops_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut params: Vec<Tensor<f64>> = vec![
            Tensor::from_fn(6, 4, |_, _| rng.gen_range(-1.0..1.0)),
            Tensor::from_fn(3, 4, |_, _| rng.gen_range(-1.0..1.0)),
            Tensor::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0)),
        ];
        let eval = |ps: &[Tensor<f64>]| -> (f64, Gradients<f64>) {
            let mut t = Tape::new();
            let v: Vec<Var> = ps.iter().enumerate().map(|(i, p)| t.param(ParamId(i), p)).collect();
            let h = t.add_tiled(v[0], v[1]).unwrap();
            let kv = t.matmul(h, v[2]).unwrap();
            let last = t.strided_rows(h, 3, 2).unwrap();
            let att = t.grouped_attention(last, kv, h, 3, 1, 0.7).unwrap();
            let full = t.grouped_attention(kv, h, kv, 3, 3, 0.4).unwrap();
            let a = t.row_sum_squares(att);
            let a = t.log1p(a);
            let a = t.sum(a);
            let f = t.row_sum_squares(full);
            let f = t.sum(f);
            let loss = t.add(a, f).unwrap();
            (t.value(loss).item().unwrap(), t.backward(loss).unwrap())
        };
        let grads = eval(&params).1;
        let h = 1e-6;
        for pi in 0..params.len() {
            let analytic = grads.get(ParamId(pi)).unwrap().clone();
            let mut numeric = Tensor::zeros(params[pi].shape());
            for k in 0..params[pi].len() {
                let orig = params[pi].data()[k];
                params[pi].data_mut()[k] = orig + h;
                let up = eval(&params).0;
                params[pi].data_mut()[k] = orig - h;
                let down = eval(&params).0;
                params[pi].data_mut()[k] = orig;
                numeric.data_mut()[k] = (up - down) / (2.0 * h);
            }
            let err = analytic.sub(&numeric).unwrap().frobenius_norm() / (analytic.frobenius_norm() + numeric.frobenius_norm());
            assert!(err < 1e-6, "param {pi}: relative error {err}");
        }
    }

    #[test]
    fn grouped_attention_matches_dense_per_group() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let q = Tensor::<f64>::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0));
        let k = Tensor::<f64>::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0));
        let v = Tensor::<f64>::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0));
        let mut t = Tape::new();
        let (qv, kv, vv) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
        let out = t.grouped_attention(qv, kv, vv, 2, 2, 0.5).unwrap();
        for b in 0..2 {
            let qs = q.slice_rows(2 * b, 2).unwrap();
            let ks = k.slice_rows(2 * b, 2).unwrap();
            let vs = v.slice_rows(2 * b, 2).unwrap();
            let dense = qs.matmul_t(&ks).unwrap().scale(0.5).softmax_rows().unwrap().matmul(&vs).unwrap();
            let got = t.value(out).slice_rows(2 * b, 2).unwrap();
            assert!(dense.sub(&got).unwrap().max_abs() < 1e-15);
        }
    }

    #[test]
    fn gradients_of_sum_equal_sum_of_gradients() {
        let p = Tensor::<f64>::from_f64_rows(&[[0.3, -0.7], [1.1, 0.2]]).unwrap();
        let x1 = Tensor::<f64>::from_f64_rows(&[[1.0, 2.0]]).unwrap();
        let x2 = Tensor::<f64>::from_f64_rows(&[[-0.5, 0.25]]).unwrap();
        let single = |x: &Tensor<f64>| {
            let mut t = Tape::new();
            let w = t.param(ParamId(0), &p);
            let xv = t.constant(x.clone());
            let y = t.matmul(xv, w).unwrap();
            let y = t.gelu(y);
            let l = t.sum_squares(y);
            t.backward(l).unwrap()
        };
        let mut summed = single(&x1);
        summed.accumulate(&single(&x2)).unwrap();

        let mut t = Tape::new();
        let w = t.param(ParamId(0), &p);
        let a = t.constant(x1.clone());
        let b = t.constant(x2.clone());
        let ya = t.matmul(a, w).unwrap();
        let ya = t.gelu(ya);
        let la = t.sum_squares(ya);
        let yb = t.matmul(b, w).unwrap();
        let yb = t.gelu(yb);
        let lb = t.sum_squares(yb);
        let l = t.add(la, lb).unwrap();
        let joint = t.backward(l).unwrap();
        let diff = joint.get(ParamId(0)).unwrap().sub(summed.get(ParamId(0)).unwrap()).unwrap();
        assert!(diff.max_abs() < 1e-14);
    }
}
