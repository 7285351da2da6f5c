//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles. Ops never
//! fail: shape errors are programming errors and panic, while the first
//! non-finite value produced is remembered and reported by
//! [`Tape::backward`].

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ops::{Add, Div, Mul, Neg, Sub};

use super::params::ParamSet;
use super::tensor::{gemm, Tensor};
use super::NumericsError;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MatMul(usize, usize),
    Affine(usize, f64),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    SumAll(usize),
    MeanAll(usize),
    SumCols(usize),
    Clamp(usize, f64, f64),
    Minimum(usize, usize),
    ConcatCols(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    PickCols(usize, Vec<usize>),
    LogSoftmaxRows(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::MatMul(..) => "matmul",
            Op::Affine(..) => "affine",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::SumCols(..) => "sum_cols",
            Op::Clamp(..) => "clamp",
            Op::Minimum(..) => "minimum",
            Op::ConcatCols(..) => "concat_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::PickCols(..) => "pick_cols",
            Op::LogSoftmaxRows(..) => "log_softmax",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
    label: Option<String>,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    first_bad: Option<usize>,
}

/// Recording of one differentiable computation.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Parameters of one [`ParamSet`] placed on a tape.
pub struct Bound<'t> {
    tape: &'t Tape,
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn get(&self, name: &str) -> Var<'t> {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Gradients of the bound parameters, in the parameter set's ordering.
    pub fn gradients(&self, grads: &Gradients) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, var) in &self.vars {
            out.insert(name.clone(), grads.of(*var));
        }
        out
    }
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient w.r.t. `v`; zeros when `v` does not influence the output.
    pub fn of(&self, v: Var<'_>) -> Tensor {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.id]),
        }
    }
}

fn bcast_shape(a: &Tensor, b: &Tensor, op: &str) -> (usize, usize, Vec<usize>) {
    if a.shape() == b.shape() {
        return (a.rows(), a.cols(), a.shape().to_vec());
    }
    let r = a.rows().max(b.rows());
    let c = a.cols().max(b.cols());
    let ok = |t: &Tensor| (t.rows() == r || t.rows() == 1) && (t.cols() == c || t.cols() == 1);
    if !ok(a) || !ok(b) {
        panic!("{op}: cannot broadcast {:?} with {:?}", a.shape(), b.shape());
    }
    let shape = if a.len() == r * c {
        a.shape().to_vec()
    } else if b.len() == r * c {
        b.shape().to_vec()
    } else {
        vec![r, c]
    };
    (r, c, shape)
}

fn bcast_binary(a: &Tensor, b: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (r, c, shape) = bcast_shape(a, b, op);
    if a.len() == b.len() && a.len() == r * c {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(shape, data).expect("broadcast shape");
    }
    let (ar, ac, br, bc) = (a.rows(), a.cols(), b.rows(), b.cols());
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        let ia = if ar == 1 { 0 } else { i };
        let ib = if br == 1 { 0 } else { i };
        for j in 0..c {
            let x = a.data()[ia * ac + if ac == 1 { 0 } else { j }];
            let y = b.data()[ib * bc + if bc == 1 { 0 } else { j }];
            data.push(f(x, y));
        }
    }
    Tensor::new(shape, data).expect("broadcast shape")
}

/// Sums a broadcast gradient `g` (viewed `[r, c]`) back onto `target`'s shape.
fn unbroadcast(g: &[f64], r: usize, c: usize, target: &Tensor) -> Tensor {
    let (tr, tc) = (target.rows(), target.cols());
    if tr == r && tc == c {
        return Tensor::new(target.shape().to_vec(), g.to_vec()).expect("shape");
    }
    let mut out = vec![0.0; tr * tc];
    for i in 0..r {
        let oi = if tr == 1 { 0 } else { i };
        for j in 0..c {
            let oj = if tc == 1 { 0 } else { j };
            out[oi * tc + oj] += g[i * c + j];
        }
    }
    Tensor::new(target.shape().to_vec(), out).expect("shape")
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, op: Op, tracked: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        if inner.first_bad.is_none() && !value.is_finite() {
            inner.first_bad = Some(id);
        }
        inner.nodes.push(Node { value, op, tracked, label: None });
        Var { tape: self, id }
    }

    /// Untracked input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    /// Tracked leaf: gradients flow into it.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Places every tensor of `params` on the tape, tracked or frozen.
    pub fn bind(&self, params: &ParamSet, tracked: bool) -> Bound<'_> {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let v = if tracked { self.param(t.clone()) } else { self.constant(t.clone()) };
                (name.to_string(), v)
            })
            .collect();
        Bound { tape: self, vars }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn tracked(&self, ids: &[usize]) -> bool {
        let inner = self.inner.borrow();
        ids.iter().any(|&i| inner.nodes[i].tracked)
    }

    fn unary(&self, a: usize, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'_> {
        let value = {
            let inner = self.inner.borrow();
            f(&inner.nodes[a].value)
        };
        let tracked = self.tracked(&[a]);
        self.push(value, op, tracked)
    }

    fn binary(&self, a: usize, b: usize, op: Op, f: impl FnOnce(&Tensor, &Tensor) -> Tensor) -> Var<'_> {
        let value = {
            let inner = self.inner.borrow();
            f(&inner.nodes[a].value, &inner.nodes[b].value)
        };
        let tracked = self.tracked(&[a, b]);
        self.push(value, op, tracked)
    }

    /// Reports the first non-finite node, if any was recorded.
    pub fn check_finite(&self) -> Result<(), NumericsError> {
        let inner = self.inner.borrow();
        match inner.first_bad {
            None => Ok(()),
            Some(id) => {
                let node = &inner.nodes[id];
                Err(NumericsError::NonFinite {
                    node: id,
                    op: node.op.name(),
                    label: node.label.clone().unwrap_or_default(),
                })
            }
        }
    }

    /// Backpropagates from a one-element `output`.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients, NumericsError> {
        self.check_finite()?;
        let inner = self.inner.borrow();
        let nodes = &inner.nodes;
        let n = output.id + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        let out_node = &nodes[output.id];
        if out_node.value.len() != 1 {
            return Err(NumericsError::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out_node.value.shape()
            )));
        }
        grads[output.id] = Some(Tensor::new(out_node.value.shape().to_vec(), vec![1.0]).unwrap());

        for id in (0..n).rev() {
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let val = &node.value;
            let tracked = |i: usize| nodes[i].tracked;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let (r, c) = (val.rows(), val.cols());
                    if tracked(*a) {
                        let ga = unbroadcast(g.data(), r, c, &nodes[*a].value);
                        accumulate(&mut grads[*a], ga);
                    }
                    if tracked(*b) {
                        let mut gb = unbroadcast(g.data(), r, c, &nodes[*b].value);
                        if matches!(node.op, Op::Sub(..)) {
                            gb.data_mut().iter_mut().for_each(|v| *v = -*v);
                        }
                        accumulate(&mut grads[*b], gb);
                    }
                }
                Op::Mul(a, b) => {
                    let (r, c) = (val.rows(), val.cols());
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    if tracked(*a) {
                        let full = bcast_binary(&g, vb, "mul", |x, y| x * y);
                        accumulate(&mut grads[*a], unbroadcast(full.data(), r, c, va));
                    }
                    if tracked(*b) {
                        let full = bcast_binary(&g, va, "mul", |x, y| x * y);
                        accumulate(&mut grads[*b], unbroadcast(full.data(), r, c, vb));
                    }
                }
                Op::Div(a, b) => {
                    let (r, c) = (val.rows(), val.cols());
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    if tracked(*a) {
                        let full = bcast_binary(&g, vb, "div", |x, y| x / y);
                        accumulate(&mut grads[*a], unbroadcast(full.data(), r, c, va));
                    }
                    if tracked(*b) {
                        // d(a/b)/db = -out/b
                        let q = bcast_binary(val, vb, "div", |o, y| -o / y);
                        let full = bcast_binary(&g, &q, "div", |x, y| x * y);
                        accumulate(&mut grads[*b], unbroadcast(full.data(), r, c, vb));
                    }
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    if tracked(*a) {
                        let (d, m, k) =
                            gemm(g.data(), g.rows(), g.cols(), false, vb.data(), vb.rows(), vb.cols(), true);
                        accumulate(&mut grads[*a], Tensor::matrix(m, k, d));
                    }
                    if tracked(*b) {
                        let (d, k, nn) =
                            gemm(va.data(), va.rows(), va.cols(), true, g.data(), g.rows(), g.cols(), false);
                        accumulate(&mut grads[*b], Tensor::matrix(k, nn, d));
                    }
                }
                Op::Affine(a, s) => {
                    let s = *s;
                    accumulate(&mut grads[*a], g.map(|x| x * s));
                }
                Op::Tanh(a) => {
                    let d = g.data().iter().zip(val.data()).map(|(&x, &y)| x * (1.0 - y * y)).collect();
                    accumulate(&mut grads[*a], Tensor::new(val.shape().to_vec(), d).unwrap());
                }
                Op::Exp(a) => {
                    let d = g.data().iter().zip(val.data()).map(|(&x, &y)| x * y).collect();
                    accumulate(&mut grads[*a], Tensor::new(val.shape().to_vec(), d).unwrap());
                }
                Op::Log(a) => {
                    let va = &nodes[*a].value;
                    let d = g.data().iter().zip(va.data()).map(|(&x, &y)| x / y).collect();
                    accumulate(&mut grads[*a], Tensor::new(val.shape().to_vec(), d).unwrap());
                }
                Op::Square(a) => {
                    let va = &nodes[*a].value;
                    let d = g.data().iter().zip(va.data()).map(|(&x, &y)| 2.0 * x * y).collect();
                    accumulate(&mut grads[*a], Tensor::new(val.shape().to_vec(), d).unwrap());
                }
                Op::SumAll(a) | Op::MeanAll(a) => {
                    let va = &nodes[*a].value;
                    let mut gv = g.item();
                    if matches!(node.op, Op::MeanAll(_)) {
                        gv /= va.len() as f64;
                    }
                    accumulate(&mut grads[*a], Tensor::filled(va.shape(), gv));
                }
                Op::SumCols(a) => {
                    let va = &nodes[*a].value;
                    let c = va.cols();
                    let mut d = Vec::with_capacity(va.len());
                    for i in 0..va.rows() {
                        d.extend(std::iter::repeat_n(g.data()[i], c));
                    }
                    accumulate(&mut grads[*a], Tensor::new(va.shape().to_vec(), d).unwrap());
                }
                Op::Clamp(a, lo, hi) => {
                    let va = &nodes[*a].value;
                    let d = g
                        .data()
                        .iter()
                        .zip(va.data())
                        .map(|(&x, &y)| if y > *lo && y < *hi { x } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[*a], Tensor::new(va.shape().to_vec(), d).unwrap());
                }
                Op::Minimum(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let mut da = vec![0.0; va.len()];
                    let mut db = vec![0.0; vb.len()];
                    for i in 0..va.len() {
                        if va.data()[i] <= vb.data()[i] {
                            da[i] = g.data()[i];
                        } else {
                            db[i] = g.data()[i];
                        }
                    }
                    if tracked(*a) {
                        accumulate(&mut grads[*a], Tensor::new(va.shape().to_vec(), da).unwrap());
                    }
                    if tracked(*b) {
                        accumulate(&mut grads[*b], Tensor::new(vb.shape().to_vec(), db).unwrap());
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = val.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let pc = nodes[p].value.cols();
                        if tracked(p) {
                            let mut d = Vec::with_capacity(val.rows() * pc);
                            for i in 0..val.rows() {
                                d.extend_from_slice(&g.data()[i * total + offset..i * total + offset + pc]);
                            }
                            accumulate(&mut grads[p], Tensor::matrix(val.rows(), pc, d));
                        }
                        offset += pc;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let va = &nodes[*a].value;
                    let c = va.cols();
                    let mut d = vec![0.0; va.len()];
                    for (i, &r) in idx.iter().enumerate() {
                        for j in 0..c {
                            d[r * c + j] += g.data()[i * c + j];
                        }
                    }
                    accumulate(&mut grads[*a], Tensor::new(va.shape().to_vec(), d).unwrap());
                }
                Op::PickCols(a, idx) => {
                    let va = &nodes[*a].value;
                    let c = va.cols();
                    let mut d = vec![0.0; va.len()];
                    for (i, &j) in idx.iter().enumerate() {
                        d[i * c + j] = g.data()[i];
                    }
                    accumulate(&mut grads[*a], Tensor::new(va.shape().to_vec(), d).unwrap());
                }
                Op::LogSoftmaxRows(a) => {
                    // dx = g - softmax * rowsum(g)
                    let c = val.cols();
                    let mut d = Vec::with_capacity(val.len());
                    for i in 0..val.rows() {
                        let gr = &g.data()[i * c..(i + 1) * c];
                        let s: f64 = gr.iter().sum();
                        for j in 0..c {
                            d.push(gr[j] - val.data()[i * c + j].exp() * s);
                        }
                    }
                    accumulate(&mut grads[*a], Tensor::new(val.shape().to_vec(), d).unwrap());
                }
            }
        }
        for (id, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(NumericsError::NonFinite {
                        node: id,
                        op: "gradient",
                        label: nodes[id].label.clone().unwrap_or_default(),
                    });
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn item(&self) -> f64 {
        self.tape.inner.borrow().nodes[self.id].value.item()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].value.rows()
    }

    pub fn cols(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].value.cols()
    }

    /// Names the node for diagnostics.
    pub fn label(self, name: &str) -> Self {
        self.tape.inner.borrow_mut().nodes[self.id].label = Some(name.to_string());
        self
    }

    /// Same value, no gradient flows back through the result.
    pub fn stop_gradient(self) -> Var<'t> {
        let v = self.value();
        self.tape.push(v, Op::Leaf, false)
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(self.id, rhs.id, Op::MatMul(self.id, rhs.id), |a, b| {
            assert_eq!(a.cols(), b.rows(), "matmul: {:?} x {:?}", a.shape(), b.shape());
            let (d, m, n) = gemm(a.data(), a.rows(), a.cols(), false, b.data(), b.rows(), b.cols(), false);
            Tensor::matrix(m, n, d)
        })
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::Affine(self.id, s), |a| a.map(|x| x * s))
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Tanh(self.id), |a| a.map(f64::tanh))
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Exp(self.id), |a| a.map(f64::exp))
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Log(self.id), |a| a.map(f64::ln))
    }

    pub fn square(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Square(self.id), |a| a.map(|x| x * x))
    }

    pub fn sum(self) -> Var<'t> {
        self.tape.unary(self.id, Op::SumAll(self.id), |a| Tensor::scalar(a.data().iter().sum()))
    }

    pub fn mean(self) -> Var<'t> {
        self.tape.unary(self.id, Op::MeanAll(self.id), |a| {
            Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64)
        })
    }

    /// Per-row sum, `[r, c] -> [r, 1]`.
    pub fn sum_cols(self) -> Var<'t> {
        self.tape.unary(self.id, Op::SumCols(self.id), |a| {
            let c = a.cols();
            Tensor::column((0..a.rows()).map(|i| a.data()[i * c..(i + 1) * c].iter().sum()).collect())
        })
    }

    /// Elementwise clamp into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::Clamp(self.id, lo, hi), |a| a.map(|x| x.clamp(lo, hi)))
    }

    pub fn minimum(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(self.id, rhs.id, Op::Minimum(self.id, rhs.id), |a, b| {
            assert_eq!(a.shape(), b.shape(), "minimum: shapes differ");
            let d = a.data().iter().zip(b.data()).map(|(&x, &y)| x.min(y)).collect();
            Tensor::new(a.shape().to_vec(), d).unwrap()
        })
    }

    /// Row-wise `log_softmax`.
    pub fn log_softmax(self) -> Var<'t> {
        self.tape.unary(self.id, Op::LogSoftmaxRows(self.id), |a| {
            let c = a.cols();
            let mut d = Vec::with_capacity(a.len());
            for i in 0..a.rows() {
                let row = &a.data()[i * c..(i + 1) * c];
                let lse = crate::oracle::logsumexp(row);
                d.extend(row.iter().map(|x| x - lse));
            }
            Tensor::new(a.shape().to_vec(), d).unwrap()
        })
    }

    /// Selects `self[idx[i], :]` for every `i`.
    pub fn gather_rows(self, idx: &[usize]) -> Var<'t> {
        let op = Op::GatherRows(self.id, idx.to_vec());
        self.tape.unary(self.id, op, |a| {
            let c = a.cols();
            let mut d = Vec::with_capacity(idx.len() * c);
            for &r in idx {
                assert!(r < a.rows(), "gather_rows: row {r} out of {}", a.rows());
                d.extend_from_slice(&a.data()[r * c..(r + 1) * c]);
            }
            Tensor::matrix(idx.len(), c, d)
        })
    }

    /// Selects `self[i, idx[i]]` into a column.
    pub fn pick_cols(self, idx: &[usize]) -> Var<'t> {
        let op = Op::PickCols(self.id, idx.to_vec());
        self.tape.unary(self.id, op, |a| {
            assert_eq!(a.rows(), idx.len(), "pick_cols: one index per row");
            let c = a.cols();
            Tensor::column(
                idx.iter()
                    .enumerate()
                    .map(|(i, &j)| {
                        assert!(j < c, "pick_cols: column {j} out of {c}");
                        a.data()[i * c + j]
                    })
                    .collect(),
            )
        })
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[Var<'t>]) -> Var<'t> {
        let tape = parts[0].tape;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = {
            let inner = tape.inner.borrow();
            let rows = inner.nodes[ids[0]].value.rows();
            let total: usize = ids.iter().map(|&i| inner.nodes[i].value.cols()).sum();
            let mut d = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for &i in &ids {
                    let t = &inner.nodes[i].value;
                    assert_eq!(t.rows(), rows, "concat_cols: row counts differ");
                    d.extend_from_slice(t.row(r));
                }
            }
            Tensor::matrix(rows, total, d)
        };
        let tracked = tape.tracked(&ids);
        tape.push(value, Op::ConcatCols(ids), tracked)
    }
}

macro_rules! binop {
    ($tr:ident, $m:ident, $op:ident, $f:expr) => {
        impl<'t> $tr for Var<'t> {
            type Output = Var<'t>;
            fn $m(self, rhs: Var<'t>) -> Var<'t> {
                self.tape.binary(self.id, rhs.id, Op::$op(self.id, rhs.id), |a, b| {
                    bcast_binary(a, b, stringify!($m), $f)
                })
            }
        }
    };
}

binop!(Add, add, Add, |x, y| x + y);
binop!(Sub, sub, Sub, |x, y| x - y);
binop!(Mul, mul, Mul, |x, y| x * y);
binop!(Div, div, Div, |x, y| x / y);

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, s: f64) -> Var<'t> {
        self.scale(s)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, s: f64) -> Var<'t> {
        let c = self.tape.scalar(s);
        self + c
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, s: f64) -> Var<'t> {
        self + (-s)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}

/// Value and gradient of a scalar function of `params`.
pub fn grad<F>(params: &ParamSet, f: F) -> Result<(f64, ParamSet), NumericsError>
where
    F: for<'t> FnOnce(&'t Tape, &Bound<'t>) -> Var<'t>,
{
    let tape = Tape::new();
    let bound = tape.bind(params, true);
    let out = f(&tape, &bound);
    let grads = tape.backward(out)?;
    Ok((out.item(), bound.gradients(&grads)))
}

/// Evaluates a scalar function of `params` without recording gradients.
pub fn eval<F>(params: &ParamSet, f: F) -> Result<f64, NumericsError>
where
    F: for<'t> FnOnce(&'t Tape, &Bound<'t>) -> Var<'t>,
{
    let tape = Tape::new();
    let bound = tape.bind(params, false);
    let out = f(&tape, &bound);
    tape.check_finite()?;
    Ok(out.item())
}
