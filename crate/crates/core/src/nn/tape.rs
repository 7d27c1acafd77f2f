//! A small reverse-mode tape over `f64` matrices.
//!
//! All values are `Array2<f64>`; vectors are 1-row matrices. A [`Tape`] owns
//! the computation graph for one forward pass; [`Var`] is a copyable handle
//! into it. Nodes are appended in topological order, so backward is a single
//! reverse sweep. Reduction order is fixed everywhere, which keeps whole
//! training runs bit-reproducible.

use ndarray::{concatenate, s, Array2, Axis};
use std::cell::RefCell;

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Softplus(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize, usize),
    Row(usize, usize),
    SumAll(usize),
    SoftmaxRow(usize),
    LogSumExpRow(usize),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var { tape: self, idx: nodes.len() - 1 }
    }

    /// Gradient-tracked leaf (a parameter).
    pub fn leaf(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Untracked input data.
    pub fn constant(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_scalar(&self, value: f64) -> Var<'_> {
        self.constant(Array2::from_elem((1, 1), value))
    }

    fn value_of(&self, idx: usize) -> Array2<f64> {
        self.nodes.borrow()[idx].value.clone()
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes.borrow()[idx].needs_grad
    }

    /// Reverse sweep from `loss` (must be 1x1). Returns one gradient slot per
    /// node; untouched or untracked nodes are `None`.
    pub fn backward(&self, loss: Var<'_>) -> Vec<Option<Array2<f64>>> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.idx].value.dim(),
            (1, 1),
            "backward needs a scalar loss"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; nodes.len()];
        grads[loss.idx] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=loss.idx).rev() {
            if !nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if nodes[*a].needs_grad {
                        let d = g.dot(&nodes[*b].value.t());
                        accumulate(&mut grads, *a, d, &nodes);
                    }
                    if nodes[*b].needs_grad {
                        let d = nodes[*a].value.t().dot(&g);
                        accumulate(&mut grads, *b, d, &nodes);
                    }
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned(), &nodes),
                Op::Add(a, b) => {
                    if nodes[*a].needs_grad {
                        accumulate(&mut grads, *a, g.clone(), &nodes);
                    }
                    if nodes[*b].needs_grad {
                        accumulate(&mut grads, *b, g, &nodes);
                    }
                }
                Op::Sub(a, b) => {
                    if nodes[*a].needs_grad {
                        accumulate(&mut grads, *a, g.clone(), &nodes);
                    }
                    if nodes[*b].needs_grad {
                        accumulate(&mut grads, *b, -&g, &nodes);
                    }
                }
                Op::Mul(a, b) => {
                    if nodes[*a].needs_grad {
                        accumulate(&mut grads, *a, &g * &nodes[*b].value, &nodes);
                    }
                    if nodes[*b].needs_grad {
                        accumulate(&mut grads, *b, &g * &nodes[*a].value, &nodes);
                    }
                }
                Op::AddRow(a, b) => {
                    if nodes[*a].needs_grad {
                        accumulate(&mut grads, *a, g.clone(), &nodes);
                    }
                    if nodes[*b].needs_grad {
                        let summed = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *b, summed, &nodes);
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, &g * *c, &nodes),
                Op::Sigmoid(a) => {
                    let y = &nodes[i].value;
                    accumulate(&mut grads, *a, &g * &(y * &(1.0 - y)), &nodes);
                }
                Op::Tanh(a) => {
                    let y = &nodes[i].value;
                    accumulate(&mut grads, *a, &g * &(1.0 - y * y), &nodes);
                }
                Op::Exp(a) => {
                    accumulate(&mut grads, *a, &g * &nodes[i].value, &nodes);
                }
                Op::Softplus(a) => {
                    let x = &nodes[*a].value;
                    let sig = x.mapv(|v| 1.0 / (1.0 + (-v).exp()));
                    accumulate(&mut grads, *a, &g * &sig, &nodes);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = nodes[p].value.ncols();
                        if nodes[p].needs_grad {
                            let slice = g.slice(s![.., start..start + w]).to_owned();
                            accumulate(&mut grads, p, slice, &nodes);
                        }
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = nodes[p].value.nrows();
                        if nodes[p].needs_grad {
                            let slice = g.slice(s![start..start + h, ..]).to_owned();
                            accumulate(&mut grads, p, slice, &nodes);
                        }
                        start += h;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let mut d = Array2::zeros(nodes[*a].value.dim());
                    d.slice_mut(s![.., *start..*end]).assign(&g);
                    accumulate(&mut grads, *a, d, &nodes);
                }
                Op::Row(a, r) => {
                    let mut d = Array2::zeros(nodes[*a].value.dim());
                    d.slice_mut(s![*r..*r + 1, ..]).assign(&g);
                    accumulate(&mut grads, *a, d, &nodes);
                }
                Op::SumAll(a) => {
                    let d = Array2::from_elem(nodes[*a].value.dim(), g[[0, 0]]);
                    accumulate(&mut grads, *a, d, &nodes);
                }
                Op::SoftmaxRow(a) => {
                    // dL/dx = y * (g - <g, y>)
                    let y = &nodes[i].value;
                    let inner = (&g * y).sum();
                    accumulate(&mut grads, *a, y * &(&g - inner), &nodes);
                }
                Op::LogSumExpRow(a) => {
                    let x = &nodes[*a].value;
                    let m = x.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
                    let e = x.mapv(|v| (v - m).exp());
                    let z = e.sum();
                    accumulate(&mut grads, *a, &e * (g[[0, 0]] / z), &nodes);
                }
            }
        }
        grads
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], idx: usize, delta: Array2<f64>, nodes: &[Node]) {
    if !nodes[idx].needs_grad {
        return;
    }
    match &mut grads[idx] {
        Some(acc) => *acc += &delta,
        slot @ None => *slot = Some(delta),
    }
}

impl<'t> Var<'t> {
    pub fn idx(self) -> usize {
        self.idx
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    pub fn value(self) -> Array2<f64> {
        self.tape.value_of(self.idx)
    }

    pub fn shape(self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.idx].value.dim()
    }

    pub fn scalar(self) -> f64 {
        let v = self.tape.nodes.borrow();
        let val = &v[self.idx].value;
        assert_eq!(val.dim(), (1, 1), "scalar() on non-scalar var");
        val[[0, 0]]
    }

    fn unary(self, value: Array2<f64>, op: Op) -> Var<'t> {
        let needs = self.tape.needs(self.idx);
        self.tape.push(value, op, needs)
    }

    fn binary(self, other: Var<'t>, value: Array2<f64>, op: Op) -> Var<'t> {
        let needs = self.tape.needs(self.idx) || self.tape.needs(other.idx);
        self.tape.push(value, op, needs)
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.idx].value.dot(&nodes[other.idx].value)
        };
        self.binary(other, v, Op::MatMul(self.idx, other.idx))
    }

    pub fn t(self) -> Var<'t> {
        let v = self.value().t().to_owned();
        self.unary(v, Op::Transpose(self.idx))
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            &nodes[self.idx].value + &nodes[other.idx].value
        };
        self.binary(other, v, Op::Add(self.idx, other.idx))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            &nodes[self.idx].value - &nodes[other.idx].value
        };
        self.binary(other, v, Op::Sub(self.idx, other.idx))
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            &nodes[self.idx].value * &nodes[other.idx].value
        };
        self.binary(other, v, Op::Mul(self.idx, other.idx))
    }

    /// `self [n x m] + row [1 x m]`, broadcast over rows.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            &nodes[self.idx].value + &nodes[row.idx].value
        };
        self.binary(row, v, Op::AddRow(self.idx, row.idx))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.value() * c;
        self.unary(v, Op::Scale(self.idx, c))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.value().mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.unary(v, Op::Sigmoid(self.idx))
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.value().mapv(f64::tanh);
        self.unary(v, Op::Tanh(self.idx))
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().mapv(f64::exp);
        self.unary(v, Op::Exp(self.idx))
    }

    /// `ln(1 + e^x)`, stable at both tails.
    pub fn softplus(self) -> Var<'t> {
        let v = self.value().mapv(|x| {
            if x > 30.0 {
                x
            } else if x < -30.0 {
                x.exp()
            } else {
                x.exp().ln_1p()
            }
        });
        self.unary(v, Op::Softplus(self.idx))
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t> {
        let v = self.value().slice(s![.., start..end]).to_owned();
        self.unary(v, Op::SliceCols(self.idx, start, end))
    }

    pub fn row(self, r: usize) -> Var<'t> {
        let v = self.value().slice(s![r..r + 1, ..]).to_owned();
        self.unary(v, Op::Row(self.idx, r))
    }

    pub fn sum_all(self) -> Var<'t> {
        let v = Array2::from_elem((1, 1), self.value().sum());
        self.unary(v, Op::SumAll(self.idx))
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = {
            let (r, c) = self.shape();
            (r * c) as f64
        };
        self.sum_all().scale(1.0 / n)
    }

    /// Dot product of two equally shaped vars.
    pub fn dot(self, other: Var<'t>) -> Var<'t> {
        self.mul(other).sum_all()
    }

    /// Stable softmax of a 1-row var.
    pub fn softmax_row(self) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.nrows(), 1, "softmax_row needs a 1-row var");
        let m = x.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
        let e = x.mapv(|v| (v - m).exp());
        let z = e.sum();
        self.unary(e / z, Op::SoftmaxRow(self.idx))
    }

    /// Stable `ln sum exp` of a 1-row var, as a 1x1 var.
    pub fn logsumexp_row(self) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.nrows(), 1, "logsumexp_row needs a 1-row var");
        let m = x.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
        let z = x.mapv(|v| (v - m).exp()).sum();
        self.unary(Array2::from_elem((1, 1), m + z.ln()), Op::LogSumExpRow(self.idx))
    }
}

/// Concatenate 1-row (or equal-height) vars along columns.
pub fn concat_cols<'t>(tape: &'t Tape, parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty());
    let values: Vec<Array2<f64>> = parts.iter().map(|p| p.value()).collect();
    let views: Vec<_> = values.iter().map(|v| v.view()).collect();
    let out = concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
    let needs = parts.iter().any(|p| tape.needs(p.idx));
    tape.push(out, Op::ConcatCols(parts.iter().map(|p| p.idx).collect()), needs)
}

/// Stack equal-width vars along rows.
pub fn concat_rows<'t>(tape: &'t Tape, parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty());
    let values: Vec<Array2<f64>> = parts.iter().map(|p| p.value()).collect();
    let views: Vec<_> = values.iter().map(|v| v.view()).collect();
    let out = concatenate(Axis(0), &views).expect("concat_rows shape mismatch");
    let needs = parts.iter().any(|p| tape.needs(p.idx));
    tape.push(out, Op::ConcatRows(parts.iter().map(|p| p.idx).collect()), needs)
}

/// Mean of a list of scalar vars, reduced in index order.
pub fn mean_of<'t>(tape: &'t Tape, terms: &[Var<'t>]) -> Var<'t> {
    assert!(!terms.is_empty(), "mean_of on empty list");
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = acc.add(t);
    }
    let _ = tape;
    acc.scale(1.0 / terms.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use vln_oracles::fd::fd_gradient_central;
    use vln_oracles::max_rel_err;

    #[test]
    fn matmul_gradients_match_fd() {
        let a0 = array![[0.3, -1.2], [0.7, 0.4]];
        let b0 = array![[1.1, 0.2], [-0.5, 0.9]];
        let flat: Vec<f64> = a0.iter().chain(b0.iter()).cloned().collect();
        let mut f = |x: &[f64]| {
            let a = Array2::from_shape_vec((2, 2), x[..4].to_vec()).unwrap();
            let b = Array2::from_shape_vec((2, 2), x[4..].to_vec()).unwrap();
            let t = Tape::new();
            let va = t.leaf(a);
            let vb = t.leaf(b);
            va.matmul(vb).tanh().sum_all().scalar()
        };
        let fd = fd_gradient_central(&mut f, &flat, 1e-6);

        let t = Tape::new();
        let va = t.leaf(a0.clone());
        let vb = t.leaf(b0.clone());
        let loss = va.matmul(vb).tanh().sum_all();
        let grads = t.backward(loss);
        let mut analytic: Vec<f64> = grads[va.idx()].clone().unwrap().into_iter().collect();
        analytic.extend(grads[vb.idx()].clone().unwrap());
        assert!(max_rel_err(&analytic, &fd) < 1e-7);
    }

    #[test]
    fn softmax_and_logsumexp_gradients_match_fd() {
        let x0 = [0.2, -0.8, 1.5, 0.0];
        let mut f = |x: &[f64]| {
            let t = Tape::new();
            let v = t.leaf(Array2::from_shape_vec((1, 4), x.to_vec()).unwrap());
            let w = t.constant(array![[0.3, -0.1, 0.8, 0.2]]);
            // mix softmax and logsumexp paths
            let s = v.softmax_row().dot(w);
            let l = v.logsumexp_row();
            s.add(l).scalar()
        };
        let fd = fd_gradient_central(&mut f, &x0, 1e-6);

        let t = Tape::new();
        let v = t.leaf(Array2::from_shape_vec((1, 4), x0.to_vec()).unwrap());
        let w = t.constant(array![[0.3, -0.1, 0.8, 0.2]]);
        let loss = v.softmax_row().dot(w).add(v.logsumexp_row());
        let grads = t.backward(loss);
        let analytic: Vec<f64> = grads[v.idx()].clone().unwrap().into_iter().collect();
        assert!(max_rel_err(&analytic, &fd) < 1e-7);
    }

    #[test]
    fn slicing_and_concat_roundtrip_gradients() {
        let x0 = [0.5, -0.25, 2.0, 1.0, -1.0, 0.1];
        let mut f = |x: &[f64]| {
            let t = Tape::new();
            let v = t.leaf(Array2::from_shape_vec((1, 6), x.to_vec()).unwrap());
            let a = v.slice_cols(0, 2).sigmoid();
            let b = v.slice_cols(2, 6).tanh();
            concat_cols(&t, &[a, b]).mul(concat_cols(&t, &[a, b])).sum_all().scalar()
        };
        let fd = fd_gradient_central(&mut f, &x0, 1e-6);

        let t = Tape::new();
        let v = t.leaf(Array2::from_shape_vec((1, 6), x0.to_vec()).unwrap());
        let a = v.slice_cols(0, 2).sigmoid();
        let b = v.slice_cols(2, 6).tanh();
        let cat = concat_cols(&t, &[a, b]);
        let loss = cat.mul(cat).sum_all();
        let grads = t.backward(loss);
        let analytic: Vec<f64> = grads[v.idx()].clone().unwrap().into_iter().collect();
        assert!(max_rel_err(&analytic, &fd) < 1e-7);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let t = Tape::new();
        let c = t.constant(array![[2.0]]);
        let w = t.leaf(array![[3.0]]);
        let loss = c.mul(w).sum_all();
        let grads = t.backward(loss);
        assert!(grads[c.idx()].is_none());
        assert_eq!(grads[w.idx()].as_ref().unwrap()[[0, 0]], 2.0);
    }
}
