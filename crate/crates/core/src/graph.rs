//! Define-by-run differentiation graph over [`Tensor`] values.
//!
//! Every operation is evaluated eagerly and recorded. Both derivative
//! passes emit *new graph nodes*, so derivatives can themselves be
//! differentiated:
//!
//! * [`Graph::grad`] is reverse mode (vector-Jacobian products),
//! * [`Graph::jvp`] is forward mode (Jacobian-vector products).
//!
//! Composing them gives reverse-over-forward, reverse-over-reverse and so on
//! to any order. [`Graph::grad_values`] is a plain numeric reverse pass for
//! the last derivative of a chain, where no further graph is needed.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by std's inherent methods when std is linked
use num_traits::Float;

use crate::tensor::{broadcast_shape, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Relu(Var),
    Sqrt(Var),
    Square(Var),
    LogCosh(Var),
    RowSum(Var),
    ColSum(Var),
    SumAll(Var),
    Broadcast(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Pad(Var, usize),
    RowLogSumExp(Var),
    RowMin(Var),
}

impl Op {
    fn for_each_parent(&self, mut f: impl FnMut(Var)) {
        use Op::*;
        match self {
            Leaf => {}
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => {
                f(*a);
                f(*b);
            }
            Neg(a)
            | Scale(a, _)
            | Offset(a)
            | Transpose(a)
            | Exp(a)
            | Log(a)
            | Tanh(a)
            | Sigmoid(a)
            | Softplus(a)
            | Relu(a)
            | Sqrt(a)
            | Square(a)
            | LogCosh(a)
            | RowSum(a)
            | ColSum(a)
            | SumAll(a)
            | Broadcast(a)
            | Slice(a, _)
            | Pad(a, _)
            | RowLogSumExp(a)
            | RowMin(a) => f(*a),
            Concat(parts) => parts.iter().copied().for_each(f),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

#[inline]
fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - core::f64::consts::LN_2
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Input, parameter or constant. Constants are simply leaves that are
    /// never asked for.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        self.push(op, value)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let value = self.value(a).zip_broadcast(self.value(b), f);
        self.push(op, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Offset(a), |x| x + c)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), value)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(Op::Transpose(a), value)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// `log(cosh(x))`, evaluated without overflow.
    pub fn log_cosh(&mut self, a: Var) -> Var {
        self.unary(a, Op::LogCosh(a), log_cosh)
    }

    /// n×m → n×1.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let value = self.value(a).row_sum();
        self.push(Op::RowSum(a), value)
    }

    /// n×m → 1×m.
    pub fn col_sum(&mut self, a: Var) -> Var {
        let value = self.value(a).col_sum();
        self.push(Op::ColSum(a), value)
    }

    /// → 1×1.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Op::SumAll(a), value)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn broadcast(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        if self.shape(a) == (rows, cols) {
            return a;
        }
        let value = self.value(a).broadcast_to(rows, cols);
        self.push(Op::Broadcast(a), value)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let value = {
            let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
            Tensor::concat_cols(&ts)
        };
        self.push(Op::Concat(parts.to_vec()), value)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        if start == 0 && len == self.shape(a).1 {
            return a;
        }
        let value = self.value(a).slice_cols(start, len);
        self.push(Op::Slice(a, start), value)
    }

    pub fn pad_cols(&mut self, a: Var, start: usize, total: usize) -> Var {
        if start == 0 && total == self.shape(a).1 {
            return a;
        }
        let value = self.value(a).pad_cols(start, total);
        self.push(Op::Pad(a, start), value)
    }

    /// Stable row-wise log-sum-exp: n×m → n×1.
    pub fn row_logsumexp(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = (0..t.rows())
            .map(|i| {
                let row = t.row(i);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if m == f64::NEG_INFINITY {
                    return m;
                }
                m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
            })
            .collect();
        let value = Tensor::from_vec(t.rows(), 1, data);
        self.push(Op::RowLogSumExp(a), value)
    }

    /// Row-wise minimum: n×m → n×1 (subgradient picks the first minimiser).
    pub fn row_min(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = (0..t.rows())
            .map(|i| t.row(i).iter().copied().fold(f64::INFINITY, f64::min))
            .collect();
        let value = Tensor::from_vec(t.rows(), 1, data);
        self.push(Op::RowMin(a), value)
    }

    /// Row-wise dot product of two n×m nodes: n×1.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.row_sum(p)
    }

    fn ones_like(&mut self, v: Var) -> Var {
        let (r, c) = self.shape(v);
        self.constant(Tensor::filled(r, c, 1.0))
    }

    fn zeros_like(&mut self, v: Var) -> Var {
        let (r, c) = self.shape(v);
        self.constant(Tensor::zeros(r, c))
    }

    fn relu_mask(&self, a: Var) -> Tensor {
        self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    fn argmin_mask(&self, a: Var) -> Tensor {
        let t = self.value(a);
        let mut mask = Tensor::zeros(t.rows(), t.cols());
        for i in 0..t.rows() {
            let row = t.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v < row[best] {
                    best = j;
                }
            }
            mask.set(i, best, 1.0);
        }
        mask
    }

    /// Sum a gradient down to the shape of a (possibly broadcast) operand.
    fn reduce_grad(&mut self, g: Var, shape: (usize, usize)) -> Var {
        let gs = self.shape(g);
        if gs == shape {
            return g;
        }
        let mut r = g;
        if shape.0 == 1 && gs.0 != 1 {
            r = self.col_sum(r);
        }
        if shape.1 == 1 && self.shape(r).1 != 1 {
            r = self.row_sum(r);
        }
        r
    }

    fn dependence(&self, lo: usize, hi: usize, seeds: &[Var]) -> Vec<bool> {
        let mut dep = vec![false; hi + 1 - lo];
        for s in seeds {
            if s.0 >= lo && s.0 <= hi {
                dep[s.0 - lo] = true;
            }
        }
        for i in lo..=hi {
            if dep[i - lo] {
                continue;
            }
            let mut d = false;
            self.nodes[i].op.for_each_parent(|p| {
                if p.0 >= lo && dep[p.0 - lo] {
                    d = true;
                }
            });
            dep[i - lo] = d;
        }
        dep
    }

    fn ancestry(&self, lo: usize, hi: usize) -> Vec<bool> {
        let mut anc = vec![false; hi + 1 - lo];
        anc[hi - lo] = true;
        for i in (lo..=hi).rev() {
            if !anc[i - lo] {
                continue;
            }
            self.nodes[i].op.for_each_parent(|p| {
                if p.0 >= lo {
                    anc[p.0 - lo] = true;
                }
            });
        }
        anc
    }

    /// Reverse-mode derivative of `output` with respect to each of `wrt`,
    /// contracted with `seed` (all ones when `None`). The result is a set of
    /// new differentiable nodes with the shapes of `wrt`.
    pub fn grad(&mut self, output: Var, wrt: &[Var], seed: Option<Var>) -> Vec<Var> {
        let Some(lo) = wrt.iter().map(|v| v.0).min() else {
            return Vec::new();
        };
        let hi = output.0;
        if lo > hi {
            return wrt.iter().map(|&w| self.zeros_like(w)).collect();
        }
        let dep = self.dependence(lo, hi, wrt);
        let mut grads: Vec<Option<Var>> = vec![None; hi + 1 - lo];
        if dep[hi - lo] {
            let s = match seed {
                Some(s) => s,
                None => self.ones_like(output),
            };
            grads[hi - lo] = Some(s);
        }
        let is_wrt = |i: usize| wrt.iter().any(|w| w.0 == i);
        for i in (lo..=hi).rev() {
            let Some(g) = grads[i - lo] else { continue };
            if is_wrt(i) && matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let y = Var(i);
            let mut contribs: Vec<(Var, Var)> = Vec::with_capacity(2);
            let want = |p: Var| p.0 >= lo && dep[p.0 - lo];
            use Op::*;
            match op {
                Leaf => {}
                Add(a, b) => {
                    if want(a) {
                        let s = self.shape(a);
                        contribs.push((a, self.reduce_grad(g, s)));
                    }
                    if want(b) {
                        let s = self.shape(b);
                        contribs.push((b, self.reduce_grad(g, s)));
                    }
                }
                Sub(a, b) => {
                    if want(a) {
                        let s = self.shape(a);
                        contribs.push((a, self.reduce_grad(g, s)));
                    }
                    if want(b) {
                        let s = self.shape(b);
                        let n = self.neg(g);
                        contribs.push((b, self.reduce_grad(n, s)));
                    }
                }
                Mul(a, b) => {
                    if want(a) {
                        let s = self.shape(a);
                        let t = self.mul(g, b);
                        contribs.push((a, self.reduce_grad(t, s)));
                    }
                    if want(b) {
                        let s = self.shape(b);
                        let t = self.mul(g, a);
                        contribs.push((b, self.reduce_grad(t, s)));
                    }
                }
                Div(a, b) => {
                    if want(a) {
                        let s = self.shape(a);
                        let t = self.div(g, b);
                        contribs.push((a, self.reduce_grad(t, s)));
                    }
                    if want(b) {
                        let s = self.shape(b);
                        let gy = self.mul(g, y);
                        let t = self.div(gy, b);
                        let t = self.neg(t);
                        contribs.push((b, self.reduce_grad(t, s)));
                    }
                }
                Neg(a) => {
                    let t = self.neg(g);
                    contribs.push((a, t));
                }
                Scale(a, c) => {
                    let t = self.scale(g, c);
                    contribs.push((a, t));
                }
                Offset(a) => contribs.push((a, g)),
                MatMul(a, b) => {
                    if want(a) {
                        let bt = self.transpose(b);
                        contribs.push((a, self.matmul(g, bt)));
                    }
                    if want(b) {
                        let at = self.transpose(a);
                        contribs.push((b, self.matmul(at, g)));
                    }
                }
                Transpose(a) => {
                    let t = self.transpose(g);
                    contribs.push((a, t));
                }
                Exp(a) => {
                    let t = self.mul(g, y);
                    contribs.push((a, t));
                }
                Log(a) => {
                    let t = self.div(g, a);
                    contribs.push((a, t));
                }
                Tanh(a) => {
                    let y2 = self.square(y);
                    let d = self.neg(y2);
                    let d = self.offset(d, 1.0);
                    contribs.push((a, self.mul(g, d)));
                }
                Sigmoid(a) => {
                    let one_minus = self.neg(y);
                    let one_minus = self.offset(one_minus, 1.0);
                    let d = self.mul(y, one_minus);
                    contribs.push((a, self.mul(g, d)));
                }
                Softplus(a) => {
                    let d = self.sigmoid(a);
                    contribs.push((a, self.mul(g, d)));
                }
                Relu(a) => {
                    let m = self.relu_mask(a);
                    let m = self.constant(m);
                    contribs.push((a, self.mul(g, m)));
                }
                Sqrt(a) => {
                    let t = self.div(g, y);
                    contribs.push((a, self.scale(t, 0.5)));
                }
                Square(a) => {
                    let t = self.mul(g, a);
                    contribs.push((a, self.scale(t, 2.0)));
                }
                LogCosh(a) => {
                    let d = self.tanh(a);
                    contribs.push((a, self.mul(g, d)));
                }
                RowSum(a) | ColSum(a) | SumAll(a) => {
                    let (r, c) = self.shape(a);
                    contribs.push((a, self.broadcast(g, r, c)));
                }
                Broadcast(a) => {
                    let s = self.shape(a);
                    contribs.push((a, self.reduce_grad(g, s)));
                }
                Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.shape(p).1;
                        if want(p) {
                            let t = self.slice_cols(g, start, w);
                            contribs.push((p, t));
                        }
                        start += w;
                    }
                }
                Slice(a, start) => {
                    let total = self.shape(a).1;
                    contribs.push((a, self.pad_cols(g, start, total)));
                }
                Pad(a, start) => {
                    let w = self.shape(a).1;
                    contribs.push((a, self.slice_cols(g, start, w)));
                }
                RowLogSumExp(a) => {
                    let centered = self.sub(a, y);
                    let soft = self.exp(centered);
                    contribs.push((a, self.mul(soft, g)));
                }
                RowMin(a) => {
                    let m = self.argmin_mask(a);
                    let m = self.constant(m);
                    contribs.push((a, self.mul(m, g)));
                }
            }
            for (p, c) in contribs {
                if !want(p) {
                    continue;
                }
                let slot = &mut grads[p.0 - lo];
                *slot = Some(match *slot {
                    None => c,
                    Some(e) => self.add(e, c),
                });
            }
        }
        wrt.iter()
            .map(|&w| match grads[w.0 - lo] {
                Some(g) => g,
                None => self.zeros_like(w),
            })
            .collect()
    }

    /// Forward-mode derivative: the tangent of `output` when each of
    /// `inputs` moves along the matching entry of `tangents`. The result is a
    /// differentiable node with the shape of `output`.
    pub fn jvp(&mut self, output: Var, inputs: &[Var], tangents: &[Var]) -> Var {
        assert_eq!(inputs.len(), tangents.len(), "jvp inputs/tangents");
        for (&i, &t) in inputs.iter().zip(tangents) {
            assert_eq!(self.shape(i), self.shape(t), "tangent shape");
        }
        let Some(lo) = inputs.iter().map(|v| v.0).min() else {
            return self.zeros_like(output);
        };
        let hi = output.0;
        if lo > hi {
            return self.zeros_like(output);
        }
        let anc = self.ancestry(lo, hi);
        let mut tan: Vec<Option<Var>> = vec![None; hi + 1 - lo];
        for (&i, &t) in inputs.iter().zip(tangents) {
            if i.0 <= hi {
                tan[i.0 - lo] = Some(t);
            }
        }
        for i in lo..=hi {
            if !anc[i - lo] || tan[i - lo].is_some() {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let y = Var(i);
            let t = |p: Var| if p.0 >= lo { tan[p.0 - lo] } else { None };
            let out_shape = self.shape(y);
            use Op::*;
            let result: Option<Var> = match op {
                Leaf => None,
                Add(a, b) => match (t(a), t(b)) {
                    (None, None) => None,
                    (Some(ta), None) => Some(self.broadcast(ta, out_shape.0, out_shape.1)),
                    (None, Some(tb)) => Some(self.broadcast(tb, out_shape.0, out_shape.1)),
                    (Some(ta), Some(tb)) => {
                        let s = self.add(ta, tb);
                        Some(self.broadcast(s, out_shape.0, out_shape.1))
                    }
                },
                Sub(a, b) => match (t(a), t(b)) {
                    (None, None) => None,
                    (Some(ta), None) => Some(self.broadcast(ta, out_shape.0, out_shape.1)),
                    (None, Some(tb)) => {
                        let n = self.neg(tb);
                        Some(self.broadcast(n, out_shape.0, out_shape.1))
                    }
                    (Some(ta), Some(tb)) => {
                        let s = self.sub(ta, tb);
                        Some(self.broadcast(s, out_shape.0, out_shape.1))
                    }
                },
                Mul(a, b) => {
                    let l = t(a).map(|ta| self.mul(ta, b));
                    let r = t(b).map(|tb| self.mul(a, tb));
                    let s = self.sum_opt(l, r);
                    s.map(|s| self.broadcast(s, out_shape.0, out_shape.1))
                }
                Div(a, b) => {
                    let l = t(a);
                    let r = t(b).map(|tb| {
                        let yt = self.mul(y, tb);
                        self.neg(yt)
                    });
                    self.sum_opt(l, r).map(|num| {
                        let q = self.div(num, b);
                        self.broadcast(q, out_shape.0, out_shape.1)
                    })
                }
                Neg(a) => t(a).map(|ta| self.neg(ta)),
                Scale(a, c) => t(a).map(|ta| self.scale(ta, c)),
                Offset(a) => t(a),
                MatMul(a, b) => {
                    let l = t(a).map(|ta| self.matmul(ta, b));
                    let r = t(b).map(|tb| self.matmul(a, tb));
                    self.sum_opt(l, r)
                }
                Transpose(a) => t(a).map(|ta| self.transpose(ta)),
                Exp(a) => t(a).map(|ta| self.mul(ta, y)),
                Log(a) => t(a).map(|ta| self.div(ta, a)),
                Tanh(a) => t(a).map(|ta| {
                    let y2 = self.square(y);
                    let d = self.neg(y2);
                    let d = self.offset(d, 1.0);
                    self.mul(ta, d)
                }),
                Sigmoid(a) => t(a).map(|ta| {
                    let om = self.neg(y);
                    let om = self.offset(om, 1.0);
                    let d = self.mul(y, om);
                    self.mul(ta, d)
                }),
                Softplus(a) => t(a).map(|ta| {
                    let d = self.sigmoid(a);
                    self.mul(ta, d)
                }),
                Relu(a) => t(a).map(|ta| {
                    let m = self.relu_mask(a);
                    let m = self.constant(m);
                    self.mul(ta, m)
                }),
                Sqrt(a) => t(a).map(|ta| {
                    let q = self.div(ta, y);
                    self.scale(q, 0.5)
                }),
                Square(a) => t(a).map(|ta| {
                    let p = self.mul(ta, a);
                    self.scale(p, 2.0)
                }),
                LogCosh(a) => t(a).map(|ta| {
                    let d = self.tanh(a);
                    self.mul(ta, d)
                }),
                RowSum(a) => t(a).map(|ta| self.row_sum(ta)),
                ColSum(a) => t(a).map(|ta| self.col_sum(ta)),
                SumAll(a) => t(a).map(|ta| self.sum_all(ta)),
                Broadcast(a) => t(a).map(|ta| self.broadcast(ta, out_shape.0, out_shape.1)),
                Concat(parts) => {
                    if parts.iter().all(|&p| t(p).is_none()) {
                        None
                    } else {
                        let pieces: Vec<Var> = parts
                            .iter()
                            .map(|&p| match t(p) {
                                Some(tp) => tp,
                                None => self.zeros_like(p),
                            })
                            .collect();
                        Some(self.concat_cols(&pieces))
                    }
                }
                Slice(a, start) => t(a).map(|ta| self.slice_cols(ta, start, out_shape.1)),
                Pad(a, start) => t(a).map(|ta| self.pad_cols(ta, start, out_shape.1)),
                RowLogSumExp(a) => t(a).map(|ta| {
                    let centered = self.sub(a, y);
                    let soft = self.exp(centered);
                    let p = self.mul(soft, ta);
                    self.row_sum(p)
                }),
                RowMin(a) => t(a).map(|ta| {
                    let m = self.argmin_mask(a);
                    let m = self.constant(m);
                    let p = self.mul(m, ta);
                    self.row_sum(p)
                }),
            };
            tan[i - lo] = result;
        }
        match tan[hi - lo] {
            Some(t) => t,
            None => self.zeros_like(output),
        }
    }

    fn sum_opt(&mut self, a: Option<Var>, b: Option<Var>) -> Option<Var> {
        match (a, b) {
            (None, None) => None,
            (Some(x), None) | (None, Some(x)) => Some(x),
            (Some(x), Some(y)) => Some(self.add(x, y)),
        }
    }

    /// Numeric reverse pass: gradient values of the sum of `output`
    /// (or of `output` contracted with `seed`) with respect to `wrt`.
    /// Builds no nodes.
    pub fn grad_values(&self, output: Var, wrt: &[Var], seed: Option<&Tensor>) -> Vec<Tensor> {
        let Some(lo) = wrt.iter().map(|v| v.0).min() else {
            return Vec::new();
        };
        let hi = output.0;
        let zeros = |v: Var| {
            let (r, c) = self.shape(v);
            Tensor::zeros(r, c)
        };
        if lo > hi {
            return wrt.iter().map(|&w| zeros(w)).collect();
        }
        let dep = self.dependence(lo, hi, wrt);
        let mut grads: Vec<Option<Tensor>> = vec![None; hi + 1 - lo];
        if dep[hi - lo] {
            grads[hi - lo] = Some(match seed {
                Some(s) => s.clone(),
                None => {
                    let (r, c) = self.shape(output);
                    Tensor::filled(r, c, 1.0)
                }
            });
        }
        let want = |p: Var| p.0 >= lo && dep[p.0 - lo];
        fn accumulate(slot: &mut Option<Tensor>, c: Tensor) {
            match slot {
                None => *slot = Some(c),
                Some(e) => {
                    if e.shape() == c.shape() {
                        for (x, y) in e.data_mut().iter_mut().zip(c.data()) {
                            *x += *y;
                        }
                    } else {
                        *e = e.zip_broadcast(&c, |x, y| x + y);
                    }
                }
            }
        }
        for i in (lo..=hi).rev() {
            let Some(g) = grads[i - lo].take() else {
                continue;
            };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i - lo] = Some(g);
                continue;
            }
            let y = &self.nodes[i].value;
            let val = |v: Var| &self.nodes[v.0].value;
            let mut push = |p: Var, c: Tensor| {
                if want(p) {
                    accumulate(&mut grads[p.0 - lo], c);
                }
            };
            use Op::*;
            match &self.nodes[i].op {
                Leaf => {}
                Add(a, b) => {
                    if want(*a) {
                        let (r, c) = val(*a).shape();
                        push(*a, g.reduce_to(r, c));
                    }
                    if want(*b) {
                        let (r, c) = val(*b).shape();
                        push(*b, g.reduce_to(r, c));
                    }
                }
                Sub(a, b) => {
                    if want(*a) {
                        let (r, c) = val(*a).shape();
                        push(*a, g.reduce_to(r, c));
                    }
                    if want(*b) {
                        let (r, c) = val(*b).shape();
                        push(*b, g.map(|v| -v).reduce_to(r, c));
                    }
                }
                Mul(a, b) => {
                    if want(*a) {
                        let (r, c) = val(*a).shape();
                        push(*a, g.zip_broadcast(val(*b), |x, y| x * y).reduce_to(r, c));
                    }
                    if want(*b) {
                        let (r, c) = val(*b).shape();
                        push(*b, g.zip_broadcast(val(*a), |x, y| x * y).reduce_to(r, c));
                    }
                }
                Div(a, b) => {
                    if want(*a) {
                        let (r, c) = val(*a).shape();
                        push(*a, g.zip_broadcast(val(*b), |x, y| x / y).reduce_to(r, c));
                    }
                    if want(*b) {
                        let (r, c) = val(*b).shape();
                        let gy = g.zip_broadcast(y, |x, y| -x * y);
                        push(*b, gy.zip_broadcast(val(*b), |x, y| x / y).reduce_to(r, c));
                    }
                }
                Neg(a) => push(*a, g.map(|v| -v)),
                Scale(a, k) => {
                    let k = *k;
                    push(*a, g.map(|v| k * v))
                }
                Offset(a) => push(*a, g),
                MatMul(a, b) => {
                    if want(*a) {
                        push(*a, g.matmul(&val(*b).transpose()));
                    }
                    if want(*b) {
                        push(*b, val(*a).transpose().matmul(&g));
                    }
                }
                Transpose(a) => push(*a, g.transpose()),
                Exp(a) => push(*a, g.zip_broadcast(y, |x, y| x * y)),
                Log(a) => push(*a, g.zip_broadcast(val(*a), |x, y| x / y)),
                Tanh(a) => push(*a, g.zip_broadcast(y, |x, y| x * (1.0 - y * y))),
                Sigmoid(a) => push(*a, g.zip_broadcast(y, |x, y| x * y * (1.0 - y))),
                Softplus(a) => push(*a, g.zip_broadcast(val(*a), |x, y| x * sigmoid(y))),
                Relu(a) => push(
                    *a,
                    g.zip_broadcast(val(*a), |x, y| if y > 0.0 { x } else { 0.0 }),
                ),
                Sqrt(a) => push(*a, g.zip_broadcast(y, |x, y| 0.5 * x / y)),
                Square(a) => push(*a, g.zip_broadcast(val(*a), |x, y| 2.0 * x * y)),
                LogCosh(a) => push(*a, g.zip_broadcast(val(*a), |x, y| x * y.tanh())),
                RowSum(a) | ColSum(a) | SumAll(a) | Broadcast(a)
                    if !matches!(&self.nodes[i].op, Broadcast(_)) =>
                {
                    let (r, c) = val(*a).shape();
                    push(*a, g.broadcast_to(r, c))
                }
                Broadcast(a) => {
                    let (r, c) = val(*a).shape();
                    push(*a, g.reduce_to(r, c))
                }
                RowSum(_) | ColSum(_) | SumAll(_) => unreachable!(),
                Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = val(p).cols();
                        if want(p) {
                            push(p, g.slice_cols(start, w));
                        }
                        start += w;
                    }
                }
                Slice(a, start) => push(*a, g.pad_cols(*start, val(*a).cols())),
                Pad(a, start) => push(*a, g.slice_cols(*start, val(*a).cols())),
                RowLogSumExp(a) => {
                    let soft = val(*a).zip_broadcast(y, |x, m| (x - m).exp());
                    push(*a, soft.zip_broadcast(&g, |s, gg| s * gg))
                }
                RowMin(a) => push(*a, self.argmin_mask(*a).zip_broadcast(&g, |m, gg| m * gg)),
            }
        }
        wrt.iter()
            .map(|&w| grads[w.0 - lo].take().unwrap_or_else(|| zeros(w)))
            .collect()
    }
}

/// Check two shapes broadcast; used by callers validating external input.
pub fn shapes_broadcast(a: (usize, usize), b: (usize, usize)) -> bool {
    broadcast_shape(a, b).is_some()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    /// Central finite difference of `f` at `x` along `dir`.
    fn fd(f: &dyn Fn(&[f64]) -> f64, x: &[f64], dir: &[f64]) -> f64 {
        let h = 1e-5;
        let xp: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a + h * d).collect();
        let xm: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a - h * d).collect();
        (f(&xp) - f(&xm)) / (2.0 * h)
    }

    fn build(g: &mut Graph, x: Var) -> Var {
        // exercises most ops: f(x) = sum(logsumexp(tanh(x W) , softplus(x)^2)) + ...
        let w = g.constant(Tensor::from_rows(&[
            vec![0.3, -0.7, 0.2],
            vec![1.1, 0.4, -0.5],
        ]));
        let xw = g.matmul(x, w);
        let t = g.tanh(xw);
        let sp = g.softplus(x);
        let sq = g.square(sp);
        let c = g.concat_cols(&[t, sq]);
        let l = g.row_logsumexp(c);
        let s = g.sigmoid(x);
        let lc = g.log_cosh(s);
        let e = g.exp(lc);
        let q = g.div(e, sp);
        let sl = g.slice_cols(q, 1, 1);
        let p = g.pad_cols(sl, 0, 2);
        let rm = g.row_min(c);
        let sum1 = g.row_sum(p);
        let a = g.add(l, sum1);
        let a = g.sub(a, rm);
        let sq = g.sqrt(sp);
        let lg = g.log(sq);
        let rs = g.row_sum(lg);
        let b = g.mul(a, rs);
        let b = g.offset(b, 2.0);
        let b = g.scale(b, -1.5);
        let xt = g.transpose(x);
        let cs = g.col_sum(xt);
        let cs = g.sum_all(cs);
        let bb = g.add(b, cs);
        let bb = g.neg(bb);
        let r = g.relu(bb);
        g.sum_all(r)
    }

    fn eval(x: &[f64]) -> f64 {
        let mut g = Graph::new();
        let xv = g.leaf(Tensor::from_vec(2, 2, x.to_vec()));
        let out = build(&mut g, xv);
        g.value(out).item()
    }

    #[test]
    fn reverse_matches_finite_differences() {
        let x0 = [0.3, -0.4, 1.2, 0.7];
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(2, 2, x0.to_vec()));
        let out = build(&mut g, x);
        let gr = g.grad(out, &[x], None)[0];
        let gv = g.grad_values(out, &[x], None);
        for k in 0..4 {
            let mut e = [0.0; 4];
            e[k] = 1.0;
            let num = fd(&eval, &x0, &e);
            assert!(close(g.value(gr).data()[k], num, 1e-6), "k={k}");
            assert!(close(gv[0].data()[k], num, 1e-6), "k={k}");
        }
    }

    #[test]
    fn forward_matches_reverse() {
        let x0 = [0.3, -0.4, 1.2, 0.7];
        let dir = [0.5, -1.0, 0.25, 2.0];
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(2, 2, x0.to_vec()));
        let d = g.constant(Tensor::from_vec(2, 2, dir.to_vec()));
        let out = build(&mut g, x);
        let tan = g.jvp(out, &[x], &[d]);
        let num = fd(&eval, &x0, &dir);
        assert!(close(g.value(tan).item(), num, 1e-6));
    }

    #[test]
    fn second_order_compositions() {
        // f(x) = sum(x^3) -> Hessian-vector product = 6 x v
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row_vector(&[1.0, -2.0, 0.5]));
        let v = g.constant(Tensor::row_vector(&[1.0, 1.0, 2.0]));
        let x2 = g.square(x);
        let x3 = g.mul(x2, x);
        let f = g.sum_all(x3);
        let gx = g.grad(f, &[x], None)[0];
        // reverse over reverse
        let gv = g.row_dot(gx, v);
        let hv = g.grad(gv, &[x], None)[0];
        assert_eq!(g.value(hv).data(), &[6.0, -12.0, 6.0]);
        // forward over reverse
        let hv2 = g.jvp(gx, &[x], &[v]);
        assert_eq!(g.value(hv2).data(), &[6.0, -12.0, 6.0]);
        // reverse over forward over reverse: d/dx sum(v . H v) = 6 v^2
        let vhv = g.row_dot(hv2, v);
        let t3 = g.grad(vhv, &[x], None)[0];
        assert_eq!(g.value(t3).data(), &[6.0, 6.0, 24.0]);
    }

    #[test]
    fn broadcast_gradients_reduce() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = g.leaf(Tensor::row_vector(&[10.0, 20.0]));
        let c = g.leaf(Tensor::column(&[2.0, 3.0]));
        let ab = g.add(a, b);
        let abc = g.mul(ab, c);
        let s = g.sum_all(abc);
        let gs = g.grad(s, &[a, b, c], None);
        assert_eq!(g.value(gs[0]).data(), &[2.0, 2.0, 3.0, 3.0]);
        assert_eq!(g.value(gs[1]).data(), &[5.0, 5.0]);
        assert_eq!(g.value(gs[2]).data(), &[33.0, 37.0]);
        let gv = g.grad_values(s, &[a, b, c], None);
        assert_eq!(gv[1].data(), &[5.0, 5.0]);
        assert_eq!(gv[2].data(), &[33.0, 37.0]);
    }

    #[test]
    fn unreachable_wrt_gets_zeros() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::row_vector(&[1.0]));
        let b = g.leaf(Tensor::row_vector(&[1.0, 2.0]));
        let s = g.square(a);
        let gr = g.grad(s, &[b], None);
        assert_eq!(g.value(gr[0]).data(), &[0.0, 0.0]);
        let t = g.jvp(s, &[b], &[b]);
        assert_eq!(g.value(t).data(), &[0.0]);
    }
}
