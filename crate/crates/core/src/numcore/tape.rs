//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! nodes in exact reverse order and returns the gradients of the parameter
//! leaves as [`Grads`].

use std::borrow::Cow;
use std::collections::HashMap;

use super::matrix::{gemm, Matrix};
use super::ops;
use super::params::{Grads, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(ParamId),
    Dense { x: usize, w: usize, b: Option<usize> },
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    MulCol { x: usize, c: usize },
    DivCol { x: usize, c: usize },
    Concat(Vec<usize>),
    Reshape(usize),
    Sum(usize),
    Attention { q: usize, k: usize, v: usize, tokens: usize, probs: Vec<f64> },
    Focal { logits: usize, targets: Matrix, gamma: f64 },
    Uncertainty { losses: Vec<usize>, log_var: usize },
}

struct Node<'p> {
    value: Cow<'p, Matrix>,
    op: Op,
    needs_grad: bool,
}

/// Record of one forward pass over a borrowed [`ParamStore`].
pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node<'p>>,
    param_nodes: HashMap<ParamId, usize>,
    relu_pattern: u64,
    consumed: bool,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            relu_pattern: 0xcbf2_9ce4_8422_2325,
            consumed: false,
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let m = self.value(v);
        if m.shape() != (1, 1) {
            return Err(Error::NotScalar(m.shape()));
        }
        Ok(m.as_slice()[0])
    }

    /// Hash of the on/off pattern of every ReLU evaluated so far. Two forward
    /// passes with the same pattern lie in the same linear region.
    pub fn relu_pattern(&self) -> u64 {
        self.relu_pattern
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&n) = self.param_nodes.get(&id) {
            return Var(n);
        }
        let store = self.store;
        self.nodes.push(Node {
            value: Cow::Borrowed(store.value(id)),
            op: Op::Param(id),
            needs_grad: true,
        });
        let n = self.nodes.len() - 1;
        self.param_nodes.insert(id, n);
        Var(n)
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let id = self.store.id(name)?;
        Ok(self.param(id))
    }

    /// `x W^T + b` with `x: B x n`, `W: m x n`, `b: 1 x m`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let bias = match b {
            Some(b) => {
                let bm = self.value(b);
                if bm.rows() != 1 {
                    return Err(Error::shape("dense bias", self.shape(w), bm.shape()));
                }
                Some(bm.as_slice())
            }
            None => None,
        };
        let out = ops::dense_batch(self.value(x), self.value(w), bias)?;
        let needs = self.ng(x.0) || self.ng(w.0) || b.is_some_and(|b| self.ng(b.0));
        Ok(self.push(
            out,
            Op::Dense {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
            },
            needs,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_scaled(self.value(b), 1.0)?;
        let needs = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(out, Op::Add(a.0, b.0), needs))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let mut out = self.value(a).clone();
        for (o, y) in out.as_mut_slice().iter_mut().zip(self.value(b).as_slice()) {
            *o *= y;
        }
        let needs = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(out, Op::Mul(a.0, b.0), needs))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let needs = self.ng(a.0);
        self.push(out, Op::Scale(a.0, s), needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut h = self.relu_pattern;
        for &v in x.as_slice() {
            h = (h ^ u64::from(v > 0.0)).wrapping_mul(0x0000_0100_0000_01b3);
        }
        let out = x.map(ops::relu);
        self.relu_pattern = h;
        let needs = self.ng(a.0);
        self.push(out, Op::Relu(a.0), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(ops::sigmoid);
        let needs = self.ng(a.0);
        self.push(out, Op::Sigmoid(a.0), needs)
    }

    /// Scales row `i` of `x` by `c[i]`, `c` is `B x 1`.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (xs, cs) = (self.shape(x), self.shape(c));
        if cs != (xs.0, 1) {
            return Err(Error::shape("mul_col", xs, cs));
        }
        let mut out = self.value(x).clone();
        let cv = self.value(c).as_slice().to_vec();
        for (r, ci) in cv.iter().enumerate() {
            out.row_mut(r).iter_mut().for_each(|v| *v *= ci);
        }
        let needs = self.ng(x.0) || self.ng(c.0);
        Ok(self.push(out, Op::MulCol { x: x.0, c: c.0 }, needs))
    }

    /// Divides row `i` of `x` by `c[i]`, `c` is `B x 1`.
    pub fn div_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (xs, cs) = (self.shape(x), self.shape(c));
        if cs != (xs.0, 1) {
            return Err(Error::shape("div_col", xs, cs));
        }
        let mut out = self.value(x).clone();
        let cv = self.value(c).as_slice().to_vec();
        for (r, ci) in cv.iter().enumerate() {
            out.row_mut(r).iter_mut().for_each(|v| *v /= ci);
        }
        let needs = self.ng(x.0) || self.ng(c.0);
        Ok(self.push(out, Op::DivCol { x: x.0, c: c.0 }, needs))
    }

    /// Column-wise concatenation of same-height blocks.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |p| self.shape(*p).0);
        for p in parts {
            if self.shape(*p).0 != rows {
                return Err(Error::shape("concat", self.shape(parts[0]), self.shape(*p)));
            }
        }
        let cols: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let src = self.value(*p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let needs = parts.iter().any(|p| self.ng(p.0));
        Ok(self.push(out, Op::Concat(parts.iter().map(|p| p.0).collect()), needs))
    }

    /// Row-major reinterpretation to `rows x cols`.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(a).clone().reshaped(rows, cols)?;
        let needs = self.ng(a.0);
        Ok(self.push(out, Op::Reshape(a.0), needs))
    }

    /// Sum of all entries, `1 x 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let needs = self.ng(a.0);
        self.push(Matrix::filled(1, 1, s), Op::Sum(a.0), needs)
    }

    /// Scaled dot-product attention over groups of `tokens` consecutive rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, tokens: usize) -> Result<Var> {
        let (out, probs) = ops::grouped_attention(self.value(q), self.value(k), self.value(v), tokens)?;
        let needs = self.ng(q.0) || self.ng(k.0) || self.ng(v.0);
        Ok(self.push(
            out,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                tokens,
                probs,
            },
            needs,
        ))
    }

    /// Batch-mean focal loss `-sum_k t_k (1 - q_k)^gamma log q_k` with
    /// `q = softmax(logits)` and soft `targets` of the same shape.
    pub fn focal_loss(&mut self, logits: Var, targets: Matrix, gamma: f64) -> Result<Var> {
        let x = self.value(logits);
        if x.shape() != targets.shape() {
            return Err(Error::shape("focal_loss", x.shape(), targets.shape()));
        }
        if x.rows() == 0 {
            return Err(Error::Invalid("focal_loss on empty batch".into()));
        }
        let mut total = 0.0;
        for r in 0..x.rows() {
            total += focal_row(x.row(r), targets.row(r), gamma);
        }
        let out = Matrix::filled(1, 1, total / x.rows() as f64);
        let needs = self.ng(logits.0);
        Ok(self.push(
            out,
            Op::Focal {
                logits: logits.0,
                targets,
                gamma,
            },
            needs,
        ))
    }

    /// `sum_i 0.5 exp(-s_i) L_i + 0.5 s_i` for scalar losses `L_i` and a
    /// `1 x n` log-variance row `s`.
    pub fn uncertainty_total(&mut self, losses: &[Var], log_var: Var) -> Result<Var> {
        let s = self.value(log_var);
        if s.shape() != (1, losses.len()) {
            return Err(Error::shape("uncertainty_total", s.shape(), (1, losses.len())));
        }
        let mut total = 0.0;
        for (l, si) in losses.iter().zip(s.as_slice()) {
            total += 0.5 * (-si).exp() * self.scalar(*l)? + 0.5 * si;
        }
        let needs = self.ng(log_var.0) || losses.iter().any(|l| self.ng(l.0));
        Ok(self.push(
            Matrix::filled(1, 1, total),
            Op::Uncertainty {
                losses: losses.iter().map(|l| l.0).collect(),
                log_var: log_var.0,
            },
            needs,
        ))
    }

    /// Reverse pass from a scalar `loss`. May only run once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<Grads> {
        if self.consumed {
            return Err(Error::DoubleBackward);
        }
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::NotScalar(shape));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = vec![None; n];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        let mut out = Grads {
            slots: vec![None; self.store.len()],
        };

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(id) => match &mut out.slots[id.0] {
                    Some(g) => g.add_scaled(&dy, 1.0)?,
                    slot => *slot = Some(dy),
                },
                Op::Dense { x, w, b } => {
                    let xv = &self.nodes[*x].value;
                    let wv = &self.nodes[*w].value;
                    if self.ng(*x) {
                        let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                        gemm(&dy, false, wv, false, &mut dx, 1.0, 0.0);
                        accum(&mut grads, *x, dx);
                    }
                    if self.ng(*w) {
                        let mut dw = Matrix::zeros(wv.rows(), wv.cols());
                        gemm(&dy, true, xv, false, &mut dw, 1.0, 0.0);
                        accum(&mut grads, *w, dw);
                    }
                    if let Some(b) = b {
                        if self.ng(*b) {
                            let mut db = Matrix::zeros(1, dy.cols());
                            for r in 0..dy.rows() {
                                for (d, g) in db.as_mut_slice().iter_mut().zip(dy.row(r)) {
                                    *d += g;
                                }
                            }
                            accum(&mut grads, *b, db);
                        }
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        accum(&mut grads, *a, dy.clone());
                    }
                    if self.ng(*b) {
                        accum(&mut grads, *b, dy);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    if self.ng(*a) {
                        accum(&mut grads, *a, hadamard(&dy, bv));
                    }
                    if self.ng(*b) {
                        accum(&mut grads, *b, hadamard(&dy, av));
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accum(&mut grads, *a, dy.map(|g| g * s));
                }
                Op::Relu(a) => {
                    let xv = &self.nodes[*a].value;
                    let mut d = dy;
                    for (g, x) in d.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                        if *x <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    accum(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let mut d = dy;
                    for (g, y) in d.as_mut_slice().iter_mut().zip(y.as_slice()) {
                        *g *= y * (1.0 - y);
                    }
                    accum(&mut grads, *a, d);
                }
                Op::MulCol { x, c } => {
                    let (xv, cv) = (&self.nodes[*x].value, &self.nodes[*c].value);
                    if self.ng(*x) {
                        let mut dx = dy.clone();
                        for r in 0..dx.rows() {
                            let ci = cv.as_slice()[r];
                            dx.row_mut(r).iter_mut().for_each(|g| *g *= ci);
                        }
                        accum(&mut grads, *x, dx);
                    }
                    if self.ng(*c) {
                        let mut dc = Matrix::zeros(cv.rows(), 1);
                        for r in 0..dy.rows() {
                            dc.as_mut_slice()[r] = dy.row(r).iter().zip(xv.row(r)).map(|(g, x)| g * x).sum();
                        }
                        accum(&mut grads, *c, dc);
                    }
                }
                Op::DivCol { x, c } => {
                    let (xv, cv) = (&self.nodes[*x].value, &self.nodes[*c].value);
                    if self.ng(*x) {
                        let mut dx = dy.clone();
                        for r in 0..dx.rows() {
                            let ci = cv.as_slice()[r];
                            dx.row_mut(r).iter_mut().for_each(|g| *g /= ci);
                        }
                        accum(&mut grads, *x, dx);
                    }
                    if self.ng(*c) {
                        let mut dc = Matrix::zeros(cv.rows(), 1);
                        for r in 0..dy.rows() {
                            let ci = cv.as_slice()[r];
                            let dot: f64 = dy.row(r).iter().zip(xv.row(r)).map(|(g, x)| g * x).sum();
                            dc.as_mut_slice()[r] = -dot / (ci * ci);
                        }
                        accum(&mut grads, *c, dc);
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let cols = self.nodes[p].value.cols();
                        if self.ng(p) {
                            let mut dp = Matrix::zeros(dy.rows(), cols);
                            for r in 0..dy.rows() {
                                dp.row_mut(r).copy_from_slice(&dy.row(r)[off..off + cols]);
                            }
                            accum(&mut grads, p, dp);
                        }
                        off += cols;
                    }
                }
                Op::Reshape(a) => {
                    let (r, c) = self.nodes[*a].value.shape();
                    accum(&mut grads, *a, dy.reshaped(r, c)?);
                }
                Op::Sum(a) => {
                    let (r, c) = self.nodes[*a].value.shape();
                    accum(&mut grads, *a, Matrix::filled(r, c, dy.as_slice()[0]));
                }
                Op::Attention { q, k, v, tokens, probs } => {
                    let (dq, dk, dv) = attention_backward(
                        &dy,
                        &self.nodes[*q].value,
                        &self.nodes[*k].value,
                        &self.nodes[*v].value,
                        *tokens,
                        probs,
                    );
                    if self.ng(*q) {
                        accum(&mut grads, *q, dq);
                    }
                    if self.ng(*k) {
                        accum(&mut grads, *k, dk);
                    }
                    if self.ng(*v) {
                        accum(&mut grads, *v, dv);
                    }
                }
                Op::Focal { logits, targets, gamma } => {
                    let xv = &self.nodes[*logits].value;
                    let upstream = dy.as_slice()[0] / xv.rows() as f64;
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        focal_row_grad(xv.row(r), targets.row(r), *gamma, upstream, dx.row_mut(r));
                    }
                    accum(&mut grads, *logits, dx);
                }
                Op::Uncertainty { losses, log_var } => {
                    let g = dy.as_slice()[0];
                    let s = self.nodes[*log_var].value.as_slice().to_vec();
                    let mut ds = Matrix::zeros(1, s.len());
                    for (j, (&l, si)) in losses.iter().zip(&s).enumerate() {
                        let lv = self.nodes[l].value.as_slice()[0];
                        let w = 0.5 * (-si).exp();
                        ds.as_mut_slice()[j] = g * (0.5 - w * lv);
                        if self.ng(l) {
                            accum(&mut grads, l, Matrix::filled(1, 1, g * w));
                        }
                    }
                    if self.ng(*log_var) {
                        accum(&mut grads, *log_var, ds);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accum(grads: &mut [Option<Matrix>], i: usize, g: Matrix) {
    match &mut grads[i] {
        Some(existing) => {
            for (a, b) in existing.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *a += b;
            }
        }
        slot => *slot = Some(g),
    }
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = a.clone();
    for (o, y) in out.as_mut_slice().iter_mut().zip(b.as_slice()) {
        *o *= y;
    }
    out
}

pub(crate) fn focal_row(logits: &[f64], targets: &[f64], gamma: f64) -> f64 {
    let logq = ops::log_softmax(logits);
    let mut loss = 0.0;
    for (t, lq) in targets.iter().zip(&logq) {
        if *t == 0.0 {
            continue;
        }
        let q = lq.exp();
        let w = if gamma == 0.0 { 1.0 } else { (1.0 - q).powf(gamma) };
        loss -= t * w * lq;
    }
    loss
}

fn focal_row_grad(logits: &[f64], targets: &[f64], gamma: f64, upstream: f64, out: &mut [f64]) {
    let logq = ops::log_softmax(logits);
    let q: Vec<f64> = logq.iter().map(|l| l.exp()).collect();
    // a_k = dL/dq_k * q_k, then dL/dx_j = a_j - q_j * sum_k a_k.
    let mut a = vec![0.0; q.len()];
    for k in 0..q.len() {
        let t = targets[k];
        if t == 0.0 {
            continue;
        }
        let one_minus = 1.0 - q[k];
        let (w, dw) = if gamma == 0.0 {
            (1.0, 0.0)
        } else if one_minus == 0.0 {
            (0.0, 0.0)
        } else {
            (one_minus.powf(gamma), gamma * one_minus.powf(gamma - 1.0) * q[k] * logq[k])
        };
        a[k] = -t * (w - dw);
    }
    let total: f64 = a.iter().sum();
    for j in 0..q.len() {
        out[j] = upstream * (a[j] - q[j] * total);
    }
}

fn attention_backward(
    dy: &Matrix,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    tokens: usize,
    probs: &[f64],
) -> (Matrix, Matrix, Matrix) {
    let d = q.cols();
    let scale = 1.0 / (d as f64).sqrt();
    let groups = q.rows() / tokens;
    let mut dq = Matrix::zeros(q.rows(), d);
    let mut dk = Matrix::zeros(k.rows(), d);
    let mut dv = Matrix::zeros(v.rows(), d);
    let mut dp = vec![0.0; tokens * tokens];
    for g in 0..groups {
        let base = g * tokens;
        let p = &probs[g * tokens * tokens..(g + 1) * tokens * tokens];
        for i in 0..tokens {
            let doi = dy.row(base + i);
            for j in 0..tokens {
                dp[i * tokens + j] = doi.iter().zip(v.row(base + j)).map(|(a, b)| a * b).sum();
                let pij = p[i * tokens + j];
                for (dvc, dc) in dv.row_mut(base + j).iter_mut().zip(doi) {
                    *dvc += pij * dc;
                }
            }
        }
        for i in 0..tokens {
            let row_p = &p[i * tokens..(i + 1) * tokens];
            let row_dp = &dp[i * tokens..(i + 1) * tokens];
            let inner: f64 = row_p.iter().zip(row_dp).map(|(a, b)| a * b).sum();
            for j in 0..tokens {
                let ds = row_p[j] * (row_dp[j] - inner) * scale;
                if ds == 0.0 {
                    continue;
                }
                for c in 0..d {
                    dq.as_mut_slice()[(base + i) * d + c] += ds * k.get(base + j, c);
                    dk.as_mut_slice()[(base + j) * d + c] += ds * q.get(base + i, c);
                }
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, m: Matrix) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.register(name, m).unwrap();
        (s, id)
    }

    #[test]
    fn double_backward_is_an_error() {
        let (store, id) = store_with("w", Matrix::row_vector(vec![1.0, 2.0]));
        let mut tape = Tape::new(&store);
        let w = tape.param(id);
        let l = tape.sum(w);
        tape.backward(l).unwrap();
        assert!(matches!(tape.backward(l), Err(Error::DoubleBackward)));
    }

    #[test]
    fn backward_requires_scalar() {
        let (store, id) = store_with("w", Matrix::row_vector(vec![1.0, 2.0]));
        let mut tape = Tape::new(&store);
        let w = tape.param(id);
        assert!(matches!(tape.backward(w), Err(Error::NotScalar((1, 2)))));
    }

    #[test]
    fn params_off_the_loss_path_get_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.register("a", Matrix::row_vector(vec![1.0, 2.0])).unwrap();
        let b = store.register("b", Matrix::row_vector(vec![3.0])).unwrap();
        let grads = {
            let mut tape = Tape::new(&store);
            let av = tape.param(a);
            let _unused = tape.param(b);
            let l = tape.sum(av);
            tape.backward(l).unwrap()
        };
        store.grad_mut(b).fill(0.0);
        store.accumulate(&grads).unwrap();
        assert_eq!(store.grad(a).as_slice(), &[1.0, 1.0]);
        assert!(store.grad(b).as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn reused_param_accumulates() {
        let (store, id) = store_with("w", Matrix::row_vector(vec![3.0]));
        let mut tape = Tape::new(&store);
        let w = tape.param(id);
        let w2 = tape.param(id);
        assert_eq!(w, w2);
        let sq = tape.mul(w, w2).unwrap();
        let l = tape.sum(sq);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(id).unwrap().as_slice(), &[6.0]);
    }

    #[test]
    fn focal_gamma_zero_matches_cross_entropy() {
        let logits = [0.2, -1.0, 2.5, 0.0];
        let mut t = [0.0; 4];
        t[2] = 1.0;
        let ce = -ops::log_softmax(&logits)[2];
        assert!((focal_row(&logits, &t, 0.0) - ce).abs() < 1e-15);
    }
}
