use std::cell::{Ref, RefCell};

use super::array::{gemm, Array};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Exp(usize),
    Log(usize),
    Powf(usize, f64),
    Abs(usize),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    Clamp(usize, f64, f64),
    Scale(usize, f64),
    Offset(usize),
    Sum(usize),
    Mean(usize),
    SumLast(usize),
    NormLast(usize),
    SelectRows(usize, Vec<usize>),
    SelectCols(usize, Vec<usize>),
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Records a computation graph for one forward pass.
///
/// A tape is built fresh for each training step and dropped afterwards.
/// Nodes are appended in evaluation order, so the node list is always a
/// topological order of the graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients of a scalar root with respect to the differentiable leaves.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// Gradient of the root with respect to `leaf`, `None` when the leaf
    /// does not influence the root or was created as a constant.
    pub fn get(&self, leaf: Var<'_>) -> Option<&Array> {
        self.grads.get(leaf.id).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but substitutes zeros of the leaf's shape.
    pub fn get_or_zeros(&self, leaf: Var<'_>) -> Array {
        match self.get(leaf) {
            Some(g) => g.clone(),
            None => Array::zeros(leaf.value_ref().shape()),
        }
    }
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

    /// A leaf that takes part in differentiation.
    pub fn param(&self, value: Array) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that is treated as a constant.
    pub fn constant(&self, value: Array) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Array, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Reverse sweep from a scalar root.
    ///
    /// Each call returns a fresh set of gradients; nothing is accumulated on
    /// the tape, so summing across steps is left to the caller.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if !root_node.value.is_scalar() {
            return Err(Error::invalid(format!(
                "backward needs a scalar root, got shape {:?}",
                root_node.value.shape()
            )));
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        let mut out: Vec<Option<Array>> = vec![None; nodes.len()];
        if !root_node.requires_grad {
            return Ok(Gradients { grads: out });
        }
        pending[root.id] = Some(vec![1.0]);

        for id in (0..=root.id).rev() {
            let Some(g) = pending[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let y = node.value.data();
            match &node.op {
                Op::Leaf => {
                    out[id] = Some(Array::new(node.value.shape().to_vec(), g)?);
                }
                &Op::Add(a, b) | &Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let la = nodes[a].value.len();
                    let lb = nodes[b].value.len();
                    if let Some(ga) = slot(&mut pending, &nodes, a, la) {
                        for chunk in g.chunks(la) {
                            for (dst, gi) in ga.iter_mut().zip(chunk) {
                                *dst += gi;
                            }
                        }
                    }
                    if let Some(gb) = slot(&mut pending, &nodes, b, lb) {
                        for chunk in g.chunks(lb) {
                            for (dst, gi) in gb.iter_mut().zip(chunk) {
                                *dst += sign * gi;
                            }
                        }
                    }
                }
                &Op::Mul(a, b) => {
                    let av = nodes[a].value.data();
                    let bv = nodes[b].value.data();
                    let (la, lb) = (av.len(), bv.len());
                    if let Some(ga) = slot(&mut pending, &nodes, a, la) {
                        for (i, ia, ib) in Cycle::new(g.len(), la, lb) {
                            ga[ia] += g[i] * bv[ib];
                        }
                    }
                    if let Some(gb) = slot(&mut pending, &nodes, b, lb) {
                        for (i, ia, ib) in Cycle::new(g.len(), la, lb) {
                            gb[ib] += g[i] * av[ia];
                        }
                    }
                }
                &Op::MatMul(a, b) => {
                    let (n, k) = nodes[a].value.dims2()?;
                    let (_, h) = nodes[b].value.dims2()?;
                    let av = nodes[a].value.data();
                    let bv = nodes[b].value.data();
                    if let Some(ga) = slot(&mut pending, &nodes, a, n * k) {
                        // dA = G · Bᵀ
                        gemm(n, h, k, &g, false, bv, true, ga, 1.0);
                    }
                    if let Some(gb) = slot(&mut pending, &nodes, b, k * h) {
                        // dB = Aᵀ · G
                        gemm(k, n, h, av, true, &g, false, gb, 1.0);
                    }
                }
                Op::Concat { inputs, axis } => {
                    let out_shape = node.value.shape();
                    let outer: usize = out_shape[..*axis].iter().product();
                    let tail: usize = out_shape[axis + 1..].iter().product();
                    let row = out_shape[*axis] * tail;
                    let mut offset = 0;
                    for &p in inputs {
                        let width = nodes[p].value.shape()[*axis] * tail;
                        if let Some(gp) = slot(&mut pending, &nodes, p, outer * width) {
                            for o in 0..outer {
                                let src = &g[o * row + offset..o * row + offset + width];
                                for (dst, s) in gp[o * width..(o + 1) * width].iter_mut().zip(src)
                                {
                                    *dst += s;
                                }
                            }
                        }
                        offset += width;
                    }
                }
                &Op::Exp(a) => unary(slot(&mut pending, &nodes, a, y.len()), &g, |i| y[i]),
                &Op::Log(a) => {
                    let x = nodes[a].value.data();
                    unary(slot(&mut pending, &nodes, a, x.len()), &g, |i| 1.0 / x[i])
                }
                &Op::Powf(a, p) => {
                    let x = nodes[a].value.data();
                    unary(slot(&mut pending, &nodes, a, x.len()), &g, |i| {
                        if x[i] == 0.0 && p < 1.0 {
                            0.0
                        } else {
                            p * x[i].powf(p - 1.0)
                        }
                    })
                }
                &Op::Abs(a) => {
                    let x = nodes[a].value.data();
                    unary(slot(&mut pending, &nodes, a, x.len()), &g, |i| {
                        if x[i] > 0.0 {
                            1.0
                        } else if x[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    })
                }
                &Op::LeakyRelu(a, slope) => {
                    let x = nodes[a].value.data();
                    unary(slot(&mut pending, &nodes, a, x.len()), &g, |i| if x[i] > 0.0 { 1.0 } else { slope })
                }
                &Op::Sigmoid(a) => unary(slot(&mut pending, &nodes, a, y.len()), &g, |i| y[i] * (1.0 - y[i])),
                &Op::Clamp(a, lo, hi) => {
                    let x = nodes[a].value.data();
                    unary(slot(&mut pending, &nodes, a, x.len()), &g, |i| {
                        if x[i] > lo && x[i] < hi {
                            1.0
                        } else {
                            0.0
                        }
                    })
                }
                &Op::Scale(a, c) => unary(slot(&mut pending, &nodes, a, y.len()), &g, |_| c),
                &Op::Offset(a) => unary(slot(&mut pending, &nodes, a, y.len()), &g, |_| 1.0),
                &Op::Sum(a) | &Op::Mean(a) => {
                    let n = nodes[a].value.len();
                    let scale = if matches!(node.op, Op::Mean(_)) {
                        1.0 / n as f64
                    } else {
                        1.0
                    };
                    if let Some(ga) = slot(&mut pending, &nodes, a, n) {
                        ga.iter_mut().for_each(|v| *v += g[0] * scale);
                    }
                }
                &Op::SumLast(a) => {
                    let x = &nodes[a].value;
                    let c = *x.shape().last().unwrap_or(&1);
                    if let Some(ga) = slot(&mut pending, &nodes, a, x.len()) {
                        for (i, v) in ga.iter_mut().enumerate() {
                            *v += g[i / c];
                        }
                    }
                }
                &Op::NormLast(a) => {
                    let x = nodes[a].value.data();
                    let c = *nodes[a].value.shape().last().unwrap_or(&1);
                    if let Some(ga) = slot(&mut pending, &nodes, a, x.len()) {
                        for (i, v) in ga.iter_mut().enumerate() {
                            let r = i / c;
                            // subgradient 0 at the origin
                            if y[r] > 0.0 {
                                *v += g[r] * x[i] / y[r];
                            }
                        }
                    }
                }
                Op::SelectRows(a, idx) => {
                    let x = &nodes[*a].value;
                    let width = x.len() / x.shape()[0].max(1);
                    if let Some(ga) = slot(&mut pending, &nodes, *a, x.len()) {
                        for (r, &src) in idx.iter().enumerate() {
                            let gr = &g[r * width..(r + 1) * width];
                            for (dst, s) in ga[src * width..(src + 1) * width].iter_mut().zip(gr) {
                                *dst += s;
                            }
                        }
                    }
                }
                Op::SelectCols(a, idx) => {
                    let x = &nodes[*a].value;
                    let (rows, cols) = x.dims2()?;
                    let k = idx.len();
                    if let Some(ga) = slot(&mut pending, &nodes, *a, x.len()) {
                        for r in 0..rows {
                            for (j, &c) in idx.iter().enumerate() {
                                ga[r * cols + c] += g[r * k + j];
                            }
                        }
                    }
                }
                &Op::Reshape(a) => {
                    if let Some(ga) = slot(&mut pending, &nodes, a, g.len()) {
                        for (dst, s) in ga.iter_mut().zip(&g) {
                            *dst += s;
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads: out })
    }
}

/// Indices `(i, i % la, i % lb)` for `i < n` without integer division.
struct Cycle {
    i: usize,
    n: usize,
    ia: usize,
    ib: usize,
    la: usize,
    lb: usize,
}

impl Cycle {
    fn new(n: usize, la: usize, lb: usize) -> Self {
        Self { i: 0, n, ia: 0, ib: 0, la, lb }
    }
}

impl Iterator for Cycle {
    type Item = (usize, usize, usize);

    fn next(&mut self) -> Option<Self::Item> {
        if self.i >= self.n {
            return None;
        }
        let out = (self.i, self.ia, self.ib);
        self.i += 1;
        self.ia += 1;
        if self.ia == self.la {
            self.ia = 0;
        }
        self.ib += 1;
        if self.ib == self.lb {
            self.ib = 0;
        }
        Some(out)
    }
}

fn slot<'a>(
    pending: &'a mut [Option<Vec<f64>>],
    nodes: &[Node],
    pid: usize,
    len: usize,
) -> Option<&'a mut Vec<f64>> {
    if nodes[pid].requires_grad {
        Some(pending[pid].get_or_insert_with(|| vec![0.0; len]))
    } else {
        None
    }
}

fn unary(target: Option<&mut Vec<f64>>, g: &[f64], deriv: impl Fn(usize) -> f64) {
    if let Some(ga) = target {
        for (i, (v, gi)) in ga.iter_mut().zip(g).enumerate() {
            *v += gi * deriv(i);
        }
    }
}

/// Output shape for elementwise ops: equal shapes, or one shape a suffix of
/// the other (the shorter operand repeats along the leading axes).
fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    if a.len() >= b.len() && a.ends_with(b) {
        return Ok(a.to_vec());
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Ok(b.to_vec());
    }
    Err(Error::shape(op, a, b))
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn value_ref(&self) -> Ref<'t, Array> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    /// Copy of the node's value.
    pub fn value(&self) -> Array {
        self.value_ref().clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Array) -> R) -> R {
        f(&self.value_ref())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value_ref().shape().to_vec()
    }

    /// Value of a single-element node.
    pub fn item(&self) -> f64 {
        self.value_ref().data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn emit(&self, value: Array, op: Op, parents: &[usize]) -> Var<'t> {
        let rg = self.tape.requires(parents);
        self.tape.push(value, op, rg)
    }

    fn map_unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let value = self.value_ref().map(f);
        self.emit(value, op, &[self.id])
    }

    fn zip(
        &self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let value = {
            let a = self.value_ref();
            let b = other.value_ref();
            let shape = broadcast(name, a.shape(), b.shape())?;
            let n: usize = shape.iter().product();
            let (ad, bd) = (a.data(), b.data());
            let (la, lb) = (ad.len(), bd.len());
            let data = if la == lb {
                ad.iter().zip(bd).map(|(x, y)| f(*x, *y)).collect()
            } else {
                Cycle::new(n, la, lb).map(|(_, ia, ib)| f(ad[ia], bd[ib])).collect()
            };
            Array::new(shape, data)?
        };
        Ok(self.emit(value, op, &[self.id, other.id]))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// Matrix product of `[n, k]` and `[k, h]`.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let a = self.value_ref();
            let b = other.value_ref();
            let (n, k, h) = match (a.shape(), b.shape()) {
                (&[n, k], &[k2, h]) if k == k2 => (n, k, h),
                _ => return Err(Error::shape("matmul", a.shape(), b.shape())),
            };
            let mut c = vec![0.0; n * h];
            gemm(n, k, h, a.data(), false, b.data(), false, &mut c, 0.0);
            Array::new(vec![n, h], c)?
        };
        Ok(self.emit(value, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    /// Concatenates `parts` along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero arrays"))?;
        let tape = first.tape;
        let value = {
            let vals: Vec<Ref<'t, Array>> = parts.iter().map(|p| p.value_ref()).collect();
            let base = vals[0].shape();
            if axis >= base.len() {
                return Err(Error::invalid(format!(
                    "concat axis {axis} out of range for shape {base:?}"
                )));
            }
            let mut out_shape = base.to_vec();
            out_shape[axis] = 0;
            for v in &vals {
                let s = v.shape();
                let compatible = s.len() == base.len()
                    && s.iter()
                        .zip(base)
                        .enumerate()
                        .all(|(i, (x, y))| i == axis || x == y);
                if !compatible {
                    return Err(Error::shape("concat", base, s));
                }
                out_shape[axis] += s[axis];
            }
            let outer: usize = base[..axis].iter().product();
            let tail: usize = base[axis + 1..].iter().product();
            let total: usize = out_shape.iter().product();
            let mut data = Vec::with_capacity(total);
            for o in 0..outer {
                for v in &vals {
                    let w = v.shape()[axis] * tail;
                    data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
                }
            }
            Array::new(out_shape, data)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = tape.requires(&ids);
        Ok(tape.push(value, Op::Concat { inputs: ids, axis }, rg))
    }

    pub fn exp(&self) -> Var<'t> {
        self.map_unary(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(&self) -> Var<'t> {
        self.map_unary(Op::Log(self.id), f64::ln)
    }

    /// Elementwise power with a constant exponent.
    ///
    /// At `x = 0` with exponent below one the derivative is taken as 0.
    pub fn powf(&self, p: f64) -> Var<'t> {
        self.map_unary(Op::Powf(self.id, p), |x| x.powf(p))
    }

    pub fn square(&self) -> Var<'t> {
        self.powf(2.0)
    }

    pub fn abs(&self) -> Var<'t> {
        self.map_unary(Op::Abs(self.id), f64::abs)
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t> {
        self.map_unary(Op::LeakyRelu(self.id, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.map_unary(Op::Sigmoid(self.id), |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.map_unary(Op::Clamp(self.id, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.map_unary(Op::Scale(self.id, c), |x| c * x)
    }

    pub fn offset(&self, c: f64) -> Var<'t> {
        self.map_unary(Op::Offset(self.id), |x| x + c)
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Var<'t> {
        let s = self.value_ref().sum();
        self.emit(Array::scalar(s), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Var<'t> {
        let s = {
            let v = self.value_ref();
            v.sum() / v.len() as f64
        };
        self.emit(Array::scalar(s), Op::Mean(self.id), &[self.id])
    }

    fn reduce_last(&self, op: Op, f: impl Fn(&[f64]) -> f64) -> Result<Var<'t>> {
        let value = {
            let x = self.value_ref();
            let Some((&c, lead)) = x.shape().split_last() else {
                return Err(Error::invalid("reduction over the last axis of a scalar"));
            };
            let data = if c == 0 {
                vec![f(&[]); lead.iter().product()]
            } else {
                x.data().chunks(c).map(&f).collect()
            };
            Array::new(lead.to_vec(), data)?
        };
        Ok(self.emit(value, op, &[self.id]))
    }

    pub fn sum_last(&self) -> Result<Var<'t>> {
        self.reduce_last(Op::SumLast(self.id), |r| r.iter().sum())
    }

    /// Euclidean norm along the last axis.
    pub fn norm_last(&self) -> Result<Var<'t>> {
        self.reduce_last(Op::NormLast(self.id), |r| {
            r.iter().map(|v| v * v).sum::<f64>().sqrt()
        })
    }

    /// Gathers rows (entries along axis 0); indices may repeat.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let value = {
            let x = self.value_ref();
            let Some((&rows, rest)) = x.shape().split_first() else {
                return Err(Error::invalid("select_rows on a scalar"));
            };
            let width: usize = rest.iter().product();
            let mut data = Vec::with_capacity(idx.len() * width);
            for &r in idx {
                if r >= rows {
                    return Err(Error::invalid(format!("row {r} out of range 0..{rows}")));
                }
                data.extend_from_slice(&x.data()[r * width..(r + 1) * width]);
            }
            let mut shape = x.shape().to_vec();
            shape[0] = idx.len();
            Array::new(shape, data)?
        };
        Ok(self.emit(value, Op::SelectRows(self.id, idx.to_vec()), &[self.id]))
    }

    /// Gathers columns of a 2-D array; indices may repeat.
    pub fn select_cols(&self, idx: &[usize]) -> Result<Var<'t>> {
        let value = {
            let x = self.value_ref();
            let (rows, cols) = x.dims2()?;
            if let Some(&bad) = idx.iter().find(|&&c| c >= cols) {
                return Err(Error::invalid(format!("column {bad} out of range 0..{cols}")));
            }
            let mut data = Vec::with_capacity(rows * idx.len());
            for r in 0..rows {
                let row = &x.data()[r * cols..(r + 1) * cols];
                data.extend(idx.iter().map(|&c| row[c]));
            }
            Array::matrix(rows, idx.len(), data)?
        };
        Ok(self.emit(value, Op::SelectCols(self.id, idx.to_vec()), &[self.id]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value_ref().clone().reshape(shape.to_vec())?;
        Ok(self.emit(value, Op::Reshape(self.id), &[self.id]))
    }
}
