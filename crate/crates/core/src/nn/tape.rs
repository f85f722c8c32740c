//! Reverse-mode tape over dense 2-D tensors.
//!
//! Every operation appends a node holding its forward value plus whatever it needs
//! for the backward pass. Parameters are leaves that borrow their value from the
//! [`ParamStore`], so building a tape never copies weights. Nodes are created in
//! topological order, which makes the backward sweep a reverse scan.

use std::sync::Arc;

use super::attention::{self, AttentionBias};
use super::linalg::{gemm, View, ViewMut};
use super::params::{Gradients, ParamId, ParamStore};
use super::real::Real;
use super::tensor::Tensor;
use super::NnError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

pub(crate) struct BiasUse {
    pub bias: Arc<AttentionBias>,
    pub vector: Var,
    pub row: usize,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    GatherRows {
        src: Var,
        idx: Vec<usize>,
    },
    SliceRows {
        src: Var,
        start: usize,
    },
    Add(Var, Var),
    AddRowBias {
        x: Var,
        bias: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    MatMulNt {
        a: Var,
        b: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu {
        x: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
        bias: Option<BiasUse>,
    },
    ScatterRows {
        parts: Vec<(Var, Vec<usize>)>,
    },
    NllLogSoftmax {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Vec<(usize, Vec<T>)>,
    },
    Scale {
        x: Var,
        s: T,
    },
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    track_frozen: bool,
}

const LN_EPS: f64 = 1e-5;

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(256),
            track_frozen: false,
        }
    }

    /// A tape that also differentiates frozen parameters (for gradient checks).
    pub fn tracking_frozen(params: &'p ParamStore<T>) -> Self {
        Tape {
            track_frozen: true,
            ..Tape::new(params)
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.value(*id),
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let p = self.params.get(id);
        let needs_grad = self.track_frozen || !p.frozen;
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Rows `idx` of a 2-D source, in order (repeats allowed).
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var, NnError> {
        let s = self.value(src);
        let cols = s.cols();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= s.rows() {
                return Err(NnError::Shape(format!(
                    "row index {i} out of range for {} rows",
                    s.rows()
                )));
            }
            out.extend_from_slice(s.row(i));
        }
        let value = Tensor::from_vec(&[idx.len(), cols], out)?;
        let needs = self.needs(src);
        Ok(self.push(
            value,
            Op::GatherRows {
                src,
                idx: idx.to_vec(),
            },
            needs,
        ))
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let s = self.value(src);
        if start + len > s.rows() {
            return Err(NnError::Shape(format!(
                "row slice {start}..{} out of range for {} rows",
                start + len,
                s.rows()
            )));
        }
        let cols = s.cols();
        let value = Tensor::from_vec(
            &[len, cols],
            s.data()[start * cols..(start + len) * cols].to_vec(),
        )?;
        let needs = self.needs(src);
        Ok(self.push(value, Op::SliceRows { src, start }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rows() != y.rows() || x.cols() != y.cols() {
            return Err(NnError::Shape(format!(
                "add of {:?} and {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::from_vec(&[x.rows(), x.cols()], data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    /// Adds a length-`n` bias to every row of an `[m, n]` input.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var, NnError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.len() != xv.cols() {
            return Err(NnError::Shape(format!(
                "row bias of {} values for {} columns",
                bv.len(),
                xv.cols()
            )));
        }
        let mut value = xv.clone();
        let n = xv.cols();
        for r in 0..xv.rows() {
            for (o, &b) in value.row_mut(r).iter_mut().zip(&bv.data()[..n]) {
                *o += b;
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(value, Op::AddRowBias { x, bias }, needs))
    }

    /// `[m, k] @ [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (x, y) = (self.value(a), self.value(b));
        let (m, k, n) = (x.rows(), x.cols(), y.cols());
        if y.rows() != k {
            return Err(NnError::Shape(format!(
                "matmul of {:?} and {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            T::one(),
            View::new(x.data(), m, k),
            View::new(y.data(), k, n),
            T::zero(),
            ViewMut::new(&mut out, m, n),
        );
        let value = Tensor::from_vec(&[m, n], out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul { a, b }, needs))
    }

    /// `[m, k] @ [n, k]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (x, y) = (self.value(a), self.value(b));
        let (m, k, n) = (x.rows(), x.cols(), y.rows());
        if y.cols() != k {
            return Err(NnError::Shape(format!(
                "matmul_nt of {:?} and {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            T::one(),
            View::new(x.data(), m, k),
            View::new(y.data(), n, k).t(),
            T::zero(),
            ViewMut::new(&mut out, m, n),
        );
        let value = Tensor::from_vec(&[m, n], out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMulNt { a, b }, needs))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NnError> {
        let (xv, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let (m, n) = (xv.rows(), xv.cols());
        if g.len() != n || b.len() != n {
            return Err(NnError::Shape("layer norm affine size".into()));
        }
        let eps = T::lit(LN_EPS);
        let inv_n = T::one() / T::from_usize(n).unwrap();
        let mut out = vec![T::zero(); m * n];
        let mut mean = Vec::with_capacity(m);
        let mut rstd = Vec::with_capacity(m);
        for r in 0..m {
            let row = xv.row(r);
            let mu = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_n;
            let rs = T::one() / (var + eps).sqrt();
            for j in 0..n {
                out[r * n + j] = (row[j] - mu) * rs * g.data()[j] + b.data()[j];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        let value = Tensor::from_vec(&[m, n], out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            needs,
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu(v)).collect();
        let value = Tensor::from_vec(&[xv.rows(), xv.cols()], data).expect("same shape");
        let needs = self.needs(x);
        self.push(value, Op::Gelu { x }, needs)
    }

    /// Causal multi-head attention with optional proximity bias on selected pairs.
    ///
    /// `bias` is `(pairs, bias_vectors, row)`: the score of each listed pair gains
    /// `sum_i bit_i * bias_vectors[row, i]` before the softmax, in every head.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        bias: Option<(Arc<AttentionBias>, Var, usize)>,
    ) -> Result<Var, NnError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (t, d) = (qv.rows(), qv.cols());
        if kv.rows() != t || vv.rows() != t || kv.cols() != d || vv.cols() != d {
            return Err(NnError::Shape("attention q/k/v shapes differ".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(NnError::Shape(format!(
                "model width {d} not divisible by {heads} heads"
            )));
        }
        let bias_row = match &bias {
            Some((pairs, vector, row)) => {
                let bv = self.value(*vector);
                if *row >= bv.rows() || bv.cols() < pairs.width() {
                    return Err(NnError::Shape("bias vector table too small".into()));
                }
                pairs.check(t)?;
                Some((pairs.as_ref(), bv.row(*row)))
            }
            None => None,
        };
        let (out, probs) = attention::forward(qv.data(), kv.data(), vv.data(), t, d, heads, bias_row);
        let value = Tensor::from_vec(&[t, d], out)?;
        let needs = self.needs(q)
            || self.needs(k)
            || self.needs(v)
            || bias.as_ref().is_some_and(|(_, b, _)| self.needs(*b));
        let bias = bias.map(|(bias, vector, row)| BiasUse { bias, vector, row });
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
                bias,
            },
            needs,
        ))
    }

    /// Builds a `[total, cols]` tensor where row `positions[i]` of the output is row
    /// `i` of the matching part. Every output row must be covered exactly once.
    pub fn scatter_rows(
        &mut self,
        parts: Vec<(Var, Vec<usize>)>,
        total: usize,
    ) -> Result<Var, NnError> {
        let cols = parts
            .first()
            .map(|(v, _)| self.value(*v).cols())
            .ok_or_else(|| NnError::Shape("scatter of no parts".into()))?;
        let mut out = vec![T::zero(); total * cols];
        let mut seen = vec![false; total];
        for (var, pos) in &parts {
            let src = self.value(*var);
            if src.cols() != cols || src.rows() != pos.len() {
                return Err(NnError::Shape("scatter part shape".into()));
            }
            for (i, &p) in pos.iter().enumerate() {
                if p >= total || seen[p] {
                    return Err(NnError::Shape(format!("scatter position {p} invalid")));
                }
                seen[p] = true;
                out[p * cols..(p + 1) * cols].copy_from_slice(src.row(i));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(NnError::Shape("scatter leaves rows uncovered".into()));
        }
        let value = Tensor::from_vec(&[total, cols], out)?;
        let needs = parts.iter().any(|(v, _)| self.needs(*v));
        Ok(self.push(value, Op::ScatterRows { parts }, needs))
    }

    /// Mean over `targets` of `-log softmax(logits[row])[col]`, as a `[1, 1]` scalar.
    pub fn nll_log_softmax(
        &mut self,
        logits: Var,
        targets: &[(usize, usize)],
    ) -> Result<Var, NnError> {
        if targets.is_empty() {
            return Err(NnError::EmptyTargets);
        }
        let lv = self.value(logits);
        let (m, n) = (lv.rows(), lv.cols());
        let mut rows: Vec<usize> = targets.iter().map(|&(r, _)| r).collect();
        rows.sort_unstable();
        rows.dedup();
        let mut probs = Vec::with_capacity(rows.len());
        let mut log_norm = vec![T::zero(); m];
        for &r in &rows {
            if r >= m {
                return Err(NnError::Shape(format!("target row {r} out of {m}")));
            }
            let row = lv.row(r);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            let mut p: Vec<T> = row
                .iter()
                .map(|&x| {
                    let e = (x - mx).exp();
                    s += e;
                    e
                })
                .collect();
            for x in &mut p {
                *x /= s;
            }
            log_norm[r] = mx + s.ln();
            probs.push((r, p));
        }
        let mut total = T::zero();
        for &(r, c) in targets {
            if c >= n {
                return Err(NnError::Shape(format!("target column {c} out of {n}")));
            }
            total += log_norm[r] - lv.row(r)[c];
        }
        let loss = total / T::from_usize(targets.len()).unwrap();
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::NllLogSoftmax {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            needs,
        ))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let mut value = self.value(x).clone();
        value.scale(s);
        let needs = self.needs(x);
        self.push(value, Op::Scale { x, s }, needs)
    }

    /// Reverse sweep from a scalar; returns gradients of every parameter that
    /// received one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NnError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NnError::Shape("backward from a non-scalar".into()));
        }
        let mut pgrads = Gradients::empty(self.params.len());
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::filled(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let shape = self.params.value(*id).shape().to_vec();
                    pgrads.slot(*id, &shape).add_assign(&g);
                }
                Op::GatherRows { src, idx } => {
                    if self.needs(*src) {
                        let s = self.value(*src);
                        let acc = slot(&mut grads, *src, s);
                        let cols = s.cols();
                        for (r, &i) in idx.iter().enumerate() {
                            let dst = &mut acc.data_mut()[i * cols..(i + 1) * cols];
                            for (d, &x) in dst.iter_mut().zip(g.row(r)) {
                                *d += x;
                            }
                        }
                    }
                }
                Op::SliceRows { src, start } => {
                    if self.needs(*src) {
                        let s = self.value(*src);
                        let acc = slot(&mut grads, *src, s);
                        let cols = s.cols();
                        let dst = &mut acc.data_mut()[start * cols..start * cols + g.len()];
                        for (d, &x) in dst.iter_mut().zip(g.data()) {
                            *d += x;
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.needs(v) {
                            let s = self.value(v);
                            add_flat(slot(&mut grads, v, s), &g);
                        }
                    }
                }
                Op::AddRowBias { x, bias } => {
                    if self.needs(*x) {
                        let s = self.value(*x);
                        add_flat(slot(&mut grads, *x, s), &g);
                    }
                    if self.needs(*bias) {
                        let s = self.value(*bias);
                        let acc = slot(&mut grads, *bias, s);
                        for r in 0..g.rows() {
                            for (d, &x) in acc.data_mut().iter_mut().zip(g.row(r)) {
                                *d += x;
                            }
                        }
                    }
                }
                Op::MatMul { a, b } => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (x.rows(), x.cols(), y.cols());
                    if self.needs(*a) {
                        let acc = slot(&mut grads, *a, x);
                        gemm(
                            T::one(),
                            View::new(g.data(), m, n),
                            View::new(y.data(), k, n).t(),
                            T::one(),
                            ViewMut::new(acc.data_mut(), m, k),
                        );
                    }
                    if self.needs(*b) {
                        let acc = slot(&mut grads, *b, y);
                        gemm(
                            T::one(),
                            View::new(x.data(), m, k).t(),
                            View::new(g.data(), m, n),
                            T::one(),
                            ViewMut::new(acc.data_mut(), k, n),
                        );
                    }
                }
                Op::MatMulNt { a, b } => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (x.rows(), x.cols(), y.rows());
                    if self.needs(*a) {
                        let acc = slot(&mut grads, *a, x);
                        gemm(
                            T::one(),
                            View::new(g.data(), m, n),
                            View::new(y.data(), n, k),
                            T::one(),
                            ViewMut::new(acc.data_mut(), m, k),
                        );
                    }
                    if self.needs(*b) {
                        let acc = slot(&mut grads, *b, y);
                        gemm(
                            T::one(),
                            View::new(g.data(), m, n).t(),
                            View::new(x.data(), m, k),
                            T::one(),
                            ViewMut::new(acc.data_mut(), n, k),
                        );
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    rstd,
                } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gamma);
                    let (m, n) = (xv.rows(), xv.cols());
                    let inv_n = T::one() / T::from_usize(n).unwrap();
                    let mut dgamma = vec![T::zero(); n];
                    let mut dbeta = vec![T::zero(); n];
                    let mut dx = vec![T::zero(); m * n];
                    let mut xhat = vec![T::zero(); n];
                    let mut dxhat = vec![T::zero(); n];
                    for r in 0..m {
                        let row = xv.row(r);
                        let gr = g.row(r);
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..n {
                            xhat[j] = (row[j] - mean[r]) * rstd[r];
                            dxhat[j] = gr[j] * gv.data()[j];
                            dgamma[j] += gr[j] * xhat[j];
                            dbeta[j] += gr[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xhat[j];
                        }
                        for j in 0..n {
                            dx[r * n + j] =
                                rstd[r] * (dxhat[j] - s1 * inv_n - xhat[j] * s2 * inv_n);
                        }
                    }
                    if self.needs(*x) {
                        add_slice(slot(&mut grads, *x, xv), &dx);
                    }
                    if self.needs(*gamma) {
                        add_slice(slot(&mut grads, *gamma, gv), &dgamma);
                    }
                    if self.needs(*beta) {
                        let bv = self.value(*beta);
                        add_slice(slot(&mut grads, *beta, bv), &dbeta);
                    }
                }
                Op::Gelu { x } => {
                    if self.needs(*x) {
                        let xv = self.value(*x);
                        let acc = slot(&mut grads, *x, xv);
                        for ((d, &v), &gg) in acc.data_mut().iter_mut().zip(xv.data()).zip(g.data())
                        {
                            *d += gg * gelu_grad(v);
                        }
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                    bias,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (t, d) = (qv.rows(), qv.cols());
                    let bias_pairs = bias.as_ref().map(|b| b.bias.as_ref());
                    let back = attention::backward(
                        qv.data(),
                        kv.data(),
                        vv.data(),
                        g.data(),
                        probs,
                        t,
                        d,
                        *heads,
                        bias_pairs,
                    );
                    if self.needs(*q) {
                        add_slice(slot(&mut grads, *q, qv), &back.dq);
                    }
                    if self.needs(*k) {
                        add_slice(slot(&mut grads, *k, kv), &back.dk);
                    }
                    if self.needs(*v) {
                        add_slice(slot(&mut grads, *v, vv), &back.dv);
                    }
                    if let (Some(b), Some(db)) = (bias, back.dbias) {
                        if self.needs(b.vector) {
                            let bv = self.value(b.vector);
                            let cols = bv.cols();
                            let acc = slot(&mut grads, b.vector, bv);
                            let dst = &mut acc.data_mut()[b.row * cols..b.row * cols + db.len()];
                            for (d, x) in dst.iter_mut().zip(db) {
                                *d += x;
                            }
                        }
                    }
                }
                Op::ScatterRows { parts } => {
                    for (var, pos) in parts {
                        if self.needs(*var) {
                            let s = self.value(*var);
                            let cols = s.cols();
                            let acc = slot(&mut grads, *var, s);
                            for (i, &p) in pos.iter().enumerate() {
                                for (d, &x) in acc.row_mut(i).iter_mut().zip(g.row(p)) {
                                    *d += x;
                                }
                            }
                            debug_assert_eq!(cols, g.cols());
                        }
                    }
                }
                Op::NllLogSoftmax {
                    logits,
                    targets,
                    probs,
                } => {
                    if self.needs(*logits) {
                        let lv = self.value(*logits);
                        let scale = g.data()[0] / T::from_usize(targets.len()).unwrap();
                        let acc = slot(&mut grads, *logits, lv);
                        for (r, p) in probs {
                            let count =
                                T::from_usize(targets.iter().filter(|(tr, _)| tr == r).count())
                                    .unwrap();
                            for (d, &pj) in acc.row_mut(*r).iter_mut().zip(p) {
                                *d += scale * count * pj;
                            }
                        }
                        for &(r, c) in targets {
                            acc.row_mut(r)[c] -= scale;
                        }
                    }
                }
                Op::Scale { x, s } => {
                    if self.needs(*x) {
                        let xv = self.value(*x);
                        let acc = slot(&mut grads, *x, xv);
                        for (d, &gg) in acc.data_mut().iter_mut().zip(g.data()) {
                            *d += gg * *s;
                        }
                    }
                }
            }
        }
        Ok(pgrads)
    }
}

fn slot<'g, T: Real>(
    grads: &'g mut [Option<Tensor<T>>],
    v: Var,
    like: &Tensor<T>,
) -> &'g mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(like.shape()))
}

fn add_flat<T: Real>(acc: &mut Tensor<T>, g: &Tensor<T>) {
    add_slice(acc, g.data());
}

fn add_slice<T: Real>(acc: &mut Tensor<T>, g: &[T]) {
    for (d, &x) in acc.data_mut().iter_mut().zip(g) {
        *d += x;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let th = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::lit(3.0) * a * x * x)
}
