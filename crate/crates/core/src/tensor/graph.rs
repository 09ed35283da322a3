//! Tape-based reverse-mode differentiation. Nodes are appended in execution
//! order, so reverse insertion order is a valid topological order.

use super::{gemm_acc, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Relu(Var),
    LeakyRelu(Var),
    Sigmoid(Var),
    Sin(Var),
    Cos(Var),
    Softmax(Var),
    MeanAxis { x: Var, outer: usize, n: usize, inner: usize },
    MaxAxis { x: Var, argmax: Vec<usize> },
    Gather { x: Var, index: Vec<usize> },
    RepeatRows { x: Var, times: usize },
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    SumLast(Var),
    Sum(Var),
    MeanAll(Var),
    Mse { pred: Var, target: Var },
    Attention(Box<AttentionSaved>),
}

#[derive(Debug)]
struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    batch: usize,
    tq: usize,
    tk: usize,
    heads: usize,
    /// `[batch, heads, tq, tk]` softmax weights.
    probs: Vec<f64>,
}

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Default)]
pub struct Graph {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
    params: Vec<(ParamId, Var)>,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::validation(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        Var(self.values.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.needs_grad[v.0])
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf not tied to a parameter store.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.params.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.push((id, v));
        v
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(ta.data(), m, k, false, tb.data(), k, n, false, &mut out);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let ta = &self.values[a.0];
        let data = ta.data().iter().zip(self.values[b.0].data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let ng = self.ng(&[a, b]);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Adds a `[cols]` (or `[1, cols]`) row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (&self.values[a.0], &self.values[row.0]);
        if tr.len() != ta.cols() {
            return Err(shape_err("add_row", ta.shape(), tr.shape()));
        }
        let c = ta.cols();
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (x, b) in chunk.iter_mut().zip(tr.data()) {
                *x += b;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(&[a, row]);
        Ok(self.push(t, Op::AddRow(a, row), ng))
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v * c, Op::Scale(x, c))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = &self.values[x.0];
        let data = t.data().iter().map(|v| f(*v)).collect();
        let t = Tensor::new(t.shape().to_vec(), data).unwrap();
        let ng = self.ng(&[x]);
        self.push(t, op, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v > 0.0 { v } else { LEAKY_SLOPE * v }, Op::LeakyRelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.map(x, f64::sin, Op::Sin(x))
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.map(x, f64::cos, Op::Cos(x))
    }

    /// Softmax over the last axis, shifted by the row maximum.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = &self.values[x.0];
        let c = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let t = Tensor::new(t.shape().to_vec(), data).unwrap();
        let ng = self.ng(&[x]);
        self.push(t, Op::Softmax(x), ng)
    }

    fn axis_split(&self, x: Var, axis: usize) -> Result<(usize, usize, usize, Vec<usize>)> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(Error::validation(format!("axis {axis} out of range for shape {s:?}")));
        }
        let outer = s[..axis].iter().product();
        let inner = s[axis + 1..].iter().product();
        let mut out_shape = s.to_vec();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok((outer, s[axis], inner, out_shape))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_pool(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner, shape) = self.axis_split(x, axis)?;
        if n == 0 {
            return Err(Error::validation("mean_pool over an empty axis"));
        }
        let src = self.values[x.0].data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MeanAxis { x, outer, n, inner }, ng))
    }

    /// Maximum over `axis`; ties resolve to the lowest index.
    pub fn max_pool(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner, shape) = self.axis_split(x, axis)?;
        if n == 0 {
            return Err(Error::validation("max_pool over an empty axis"));
        }
        let src = self.values[x.0].data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    let v = src[base + i];
                    if v > out[o * inner + i] || j == 0 {
                        out[o * inner + i] = v;
                        argmax[o * inner + i] = base + i;
                    }
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaxAxis { x, argmax }, ng))
    }

    /// Concatenates along the last axis; all inputs must agree on the rest.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::validation("concat of nothing"))?;
        let rows = self.values[first.0].rows();
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut total = 0;
        for x in xs {
            let s = self.shape(*x);
            if s[..s.len() - 1] != lead[..] {
                return Err(shape_err("concat_cols", self.shape(*first), s));
            }
            total += self.values[x.0].cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for x in xs {
                out.extend_from_slice(self.values[x.0].row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ng = self.ng(xs);
        Ok(self.push(Tensor::new(shape, out)?, Op::ConcatCols(xs.to_vec()), ng))
    }

    /// Stacks 2-D inputs with equal column counts.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::validation("concat of nothing"))?;
        let cols = self.values[first.0].cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for x in xs {
            let t = &self.values[x.0];
            if t.cols() != cols {
                return Err(shape_err("concat_rows", self.shape(*first), t.shape()));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let ng = self.ng(xs);
        Ok(self.push(Tensor::matrix(rows, cols, out)?, Op::ConcatRows(xs.to_vec()), ng))
    }

    /// Rows of `x` (viewed as `[rows, cols]`) selected by `index`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let t = &self.values[x.0];
        let (rows, c) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= rows {
                return Err(Error::validation(format!("gather index {i} out of {rows} rows")));
            }
            out.extend_from_slice(t.row(i));
        }
        let ng = self.ng(&[x]);
        Ok(self.push(
            Tensor::matrix(index.len(), c, out)?,
            Op::Gather { x, index: index.to_vec() },
            ng,
        ))
    }

    /// Repeats every row `times` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let t = &self.values[x.0];
        let (rows, c) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(rows * times * c);
        for r in 0..rows {
            for _ in 0..times {
                out.extend_from_slice(t.row(r));
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::matrix(rows * times, c, out)?, Op::RepeatRows { x, times }, ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = &self.values[x.0];
        let (rows, c) = (t.rows(), t.cols());
        if start > end || end > c {
            return Err(Error::validation(format!("column slice {start}..{end} of {c}")));
        }
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&t.row(r)[start..end]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::matrix(rows, end - start, out)?, Op::SliceCols { x, start }, ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = &self.values[x.0];
        let (rows, c) = (t.rows(), t.cols());
        if start > end || end > rows {
            return Err(Error::validation(format!("row slice {start}..{end} of {rows}")));
        }
        let out = t.data()[start * c..end * c].to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::matrix(end - start, c, out)?, Op::SliceRows { x, start }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.values[x.0].clone().reshape(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Sum over the last axis, keeping it with size 1.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let t = &self.values[x.0];
        let c = t.cols().max(1);
        let out: Vec<f64> = t.data().chunks(c).map(|r| r.iter().sum()).collect();
        let mut shape = t.shape().to_vec();
        if let Some(last) = shape.last_mut() {
            *last = 1;
        }
        let t = Tensor::new(shape, out).unwrap();
        let ng = self.ng(&[x]);
        self.push(t, Op::SumLast(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.values[x.0].data().iter().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = &self.values[x.0];
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::MeanAll(x), ng)
    }

    /// Mean squared error as a scalar.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (&self.values[pred.0], &self.values[target.0]);
        if p.len() != t.len() || p.is_empty() {
            return Err(shape_err("mse", p.shape(), t.shape()));
        }
        let s = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            / p.len() as f64;
        let ng = self.ng(&[pred, target]);
        Ok(self.push(Tensor::scalar(s), Op::Mse { pred, target }, ng))
    }

    /// Scaled dot-product multi-head attention over `batch` independent
    /// groups. `q` is `[batch·tq, d]`, `k` and `v` are `[batch·tk, d]`; heads
    /// split `d` into equal contiguous slices.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        tq: usize,
        tk: usize,
        heads: usize,
    ) -> Result<Var> {
        let (tqv, tkv, tvv) = (&self.values[q.0], &self.values[k.0], &self.values[v.0]);
        let d = tqv.cols();
        if tkv.cols() != d || tvv.cols() != d || heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", tqv.shape(), tkv.shape()));
        }
        if tqv.rows() != batch * tq || tkv.rows() != batch * tk || tvv.rows() != batch * tk || tk == 0 {
            return Err(Error::validation(format!(
                "attention: expected {batch}x{tq} queries and {batch}x{tk} keys/values, got {:?}, {:?}, {:?}",
                tqv.shape(),
                tkv.shape(),
                tvv.shape()
            )));
        }
        let dh = d / heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tqv.data(), tkv.data(), tvv.data());
        let mut probs = vec![0.0; batch * heads * tq * tk];
        let mut out = vec![0.0; batch * tq * d];
        let mut row = vec![0.0; tk];
        for b in 0..batch {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..tq {
                    let qi = &qd[(b * tq + i) * d + c0..(b * tq + i) * d + c0 + dh];
                    for (j, r) in row.iter_mut().enumerate() {
                        let kj = &kd[(b * tk + j) * d + c0..(b * tk + j) * d + c0 + dh];
                        *r = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * inv;
                    }
                    softmax_in_place(&mut row);
                    let p_off = ((b * heads + h) * tq + i) * tk;
                    probs[p_off..p_off + tk].copy_from_slice(&row);
                    let o = &mut out[(b * tq + i) * d + c0..(b * tq + i) * d + c0 + dh];
                    for (j, &p) in row.iter().enumerate() {
                        let vj = &vd[(b * tk + j) * d + c0..(b * tk + j) * d + c0 + dh];
                        for (oc, vc) in o.iter_mut().zip(vj) {
                            *oc += p * vc;
                        }
                    }
                }
            }
        }
        let ng = self.ng(&[q, k, v]);
        let saved = AttentionSaved { q, k, v, batch, tq, tk, heads, probs };
        Ok(self.push(Tensor::matrix(batch * tq, d, out)?, Op::Attention(Box::new(saved)), ng))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.values[loss.0].len() != 1 {
            return Err(Error::validation(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Tensor::new(self.shape(loss).to_vec(), vec![1.0])?);
        for id in (0..=loss.0).rev() {
            if !self.needs_grad[id] {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, params: self.params.clone() })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs_grad[v.0] {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.values[v.0].shape()));
        f(slot.data_mut());
    }

    fn backprop(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let out = &self.values[id];
        match &self.ops[id] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                self.acc(grads, *a, |ga| gemm_acc(gd, m, n, false, tb.data(), k, n, true, ga));
                self.acc(grads, *b, |gb| gemm_acc(ta.data(), m, k, true, gd, m, n, false, gb));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| add_to(ga, gd));
                self.acc(grads, *b, |gb| add_to(gb, gd));
            }
            Op::AddRow(a, r) => {
                self.acc(grads, *a, |ga| add_to(ga, gd));
                let c = out.cols();
                self.acc(grads, *r, |gr| {
                    for chunk in gd.chunks(c) {
                        add_to(gr, chunk);
                    }
                });
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| add_to(ga, gd));
                self.acc(grads, *b, |gb| gb.iter_mut().zip(gd).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.values[a.0].data(), self.values[b.0].data());
                self.acc(grads, *a, |ga| {
                    for ((x, gi), bi) in ga.iter_mut().zip(gd).zip(vb) {
                        *x += gi * bi;
                    }
                });
                self.acc(grads, *b, |gb| {
                    for ((x, gi), ai) in gb.iter_mut().zip(gd).zip(va) {
                        *x += gi * ai;
                    }
                });
            }
            Op::Scale(x, c) => self.acc(grads, *x, |gx| {
                gx.iter_mut().zip(gd).for_each(|(a, b)| *a += c * b)
            }),
            Op::ConcatCols(xs) => {
                let rows = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for x in xs {
                    let c = self.values[x.0].cols();
                    self.acc(grads, *x, |gx| {
                        for r in 0..rows {
                            add_to(&mut gx[r * c..(r + 1) * c], &gd[r * total + offset..r * total + offset + c]);
                        }
                    });
                    offset += c;
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for x in xs {
                    let n = self.values[x.0].len();
                    self.acc(grads, *x, |gx| add_to(gx, &gd[offset..offset + n]));
                    offset += n;
                }
            }
            Op::Relu(x) => {
                let xv = self.values[x.0].data();
                self.acc(grads, *x, |gx| {
                    for ((a, gi), xi) in gx.iter_mut().zip(gd).zip(xv) {
                        if *xi > 0.0 {
                            *a += gi;
                        }
                    }
                });
            }
            Op::LeakyRelu(x) => {
                let xv = self.values[x.0].data();
                self.acc(grads, *x, |gx| {
                    for ((a, gi), xi) in gx.iter_mut().zip(gd).zip(xv) {
                        *a += if *xi > 0.0 { *gi } else { LEAKY_SLOPE * gi };
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                self.acc(grads, *x, |gx| {
                    for ((a, gi), yi) in gx.iter_mut().zip(gd).zip(y) {
                        *a += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Sin(x) => {
                let xv = self.values[x.0].data();
                self.acc(grads, *x, |gx| {
                    for ((a, gi), xi) in gx.iter_mut().zip(gd).zip(xv) {
                        *a += gi * xi.cos();
                    }
                });
            }
            Op::Cos(x) => {
                let xv = self.values[x.0].data();
                self.acc(grads, *x, |gx| {
                    for ((a, gi), xi) in gx.iter_mut().zip(gd).zip(xv) {
                        *a -= gi * xi.sin();
                    }
                });
            }
            Op::Softmax(x) => {
                let c = out.cols().max(1);
                let y = out.data();
                self.acc(grads, *x, |gx| {
                    for ((gxr, gr), yr) in gx.chunks_mut(c).zip(gd.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((a, gi), yi) in gxr.iter_mut().zip(gr).zip(yr) {
                            *a += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::MeanAxis { x, outer, n, inner } => {
                let inv = 1.0 / *n as f64;
                self.acc(grads, *x, |gx| {
                    for o in 0..*outer {
                        for j in 0..*n {
                            let base = (o * n + j) * inner;
                            for i in 0..*inner {
                                gx[base + i] += gd[o * inner + i] * inv;
                            }
                        }
                    }
                });
            }
            Op::MaxAxis { x, argmax } => self.acc(grads, *x, |gx| {
                for (gi, &src) in gd.iter().zip(argmax) {
                    gx[src] += gi;
                }
            }),
            Op::Gather { x, index } => {
                let c = out.cols();
                self.acc(grads, *x, |gx| {
                    for (r, &i) in index.iter().enumerate() {
                        add_to(&mut gx[i * c..(i + 1) * c], &gd[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::RepeatRows { x, times } => {
                let c = out.cols();
                self.acc(grads, *x, |gx| {
                    for (r, chunk) in gd.chunks(c).enumerate() {
                        let src = r / times;
                        add_to(&mut gx[src * c..(src + 1) * c], chunk);
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let (c, w) = (self.values[x.0].cols(), out.cols());
                self.acc(grads, *x, |gx| {
                    for (r, chunk) in gd.chunks(w.max(1)).enumerate() {
                        add_to(&mut gx[r * c + start..r * c + start + w], chunk);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let c = out.cols();
                self.acc(grads, *x, |gx| add_to(&mut gx[start * c..start * c + gd.len()], gd));
            }
            Op::Reshape(x) => self.acc(grads, *x, |gx| add_to(gx, gd)),
            Op::SumLast(x) => {
                let c = self.values[x.0].cols().max(1);
                self.acc(grads, *x, |gx| {
                    for (chunk, gi) in gx.chunks_mut(c).zip(gd) {
                        chunk.iter_mut().for_each(|a| *a += gi);
                    }
                });
            }
            Op::Sum(x) => self.acc(grads, *x, |gx| gx.iter_mut().for_each(|a| *a += gd[0])),
            Op::MeanAll(x) => {
                let s = gd[0] / self.values[x.0].len() as f64;
                self.acc(grads, *x, |gx| gx.iter_mut().for_each(|a| *a += s));
            }
            Op::Mse { pred, target } => {
                let (p, t) = (self.values[pred.0].data(), self.values[target.0].data());
                let s = 2.0 * gd[0] / p.len() as f64;
                self.acc(grads, *pred, |gp| {
                    for ((a, pi), ti) in gp.iter_mut().zip(p).zip(t) {
                        *a += s * (pi - ti);
                    }
                });
                self.acc(grads, *target, |gt| {
                    for ((a, pi), ti) in gt.iter_mut().zip(p).zip(t) {
                        *a -= s * (pi - ti);
                    }
                });
            }
            Op::Attention(saved) => self.attention_backward(saved, gd, grads),
        }
    }

    fn attention_backward(&self, s: &AttentionSaved, gd: &[f64], grads: &mut [Option<Tensor>]) {
        let AttentionSaved { q, k, v, batch, tq, tk, heads, ref probs } = *s;
        let d = self.values[q.0].cols();
        let dh = d / heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.values[q.0].data(), self.values[k.0].data(), self.values[v.0].data());
        let mut gq = vec![0.0; qd.len()];
        let mut gk = vec![0.0; kd.len()];
        let mut gv = vec![0.0; vd.len()];
        let mut dp = vec![0.0; tk];
        for b in 0..batch {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..tq {
                    let qo = (b * tq + i) * d + c0;
                    let gi = &gd[qo..qo + dh];
                    let p = &probs[((b * heads + h) * tq + i) * tk..][..tk];
                    for j in 0..tk {
                        let vo = (b * tk + j) * d + c0;
                        dp[j] = gi.iter().zip(&vd[vo..vo + dh]).map(|(x, y)| x * y).sum();
                        for (a, gc) in gv[vo..vo + dh].iter_mut().zip(gi) {
                            *a += p[j] * gc;
                        }
                    }
                    let dot: f64 = dp.iter().zip(p).map(|(x, y)| x * y).sum();
                    for j in 0..tk {
                        let ds = p[j] * (dp[j] - dot) * inv;
                        if ds == 0.0 {
                            continue;
                        }
                        let ko = (b * tk + j) * d + c0;
                        for c in 0..dh {
                            gq[qo + c] += ds * kd[ko + c];
                            gk[ko + c] += ds * qd[qo + c];
                        }
                    }
                }
            }
        }
        self.acc(grads, q, |g| add_to(g, &gq));
        self.acc(grads, k, |g| add_to(g, &gk));
        self.acc(grads, v, |g| add_to(g, &gv));
    }
}

fn add_to(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// One gradient per parameter in `store` order; parameters the loss did
    /// not touch get zeros.
    pub fn for_params(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        for (id, var) in &self.params {
            if let Some(g) = &self.grads[var.0] {
                out[id.index()] = g.clone();
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap());
        let s = g.softmax(a);
        for v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let b = g.constant(Tensor::matrix(1, 2, vec![1000.0, 1000.0]).unwrap());
        let s = g.softmax(b);
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
        let a_t = Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let a = g.constant(a_t.clone());
        let y = g.matmul(i, a).unwrap();
        assert_eq!(g.value(y), &a_t);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 2]));
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn unused_parameter_gets_zero() {
        let mut store = ParamStore::new();
        let used = store.add("used", Tensor::scalar(2.0)).unwrap();
        store.add("unused", Tensor::scalar(5.0)).unwrap();
        let mut g = Graph::new();
        let u = g.param(&store, used);
        let y = g.mul(u, u).unwrap();
        let grads = g.backward(y).unwrap().for_params(&store);
        assert_eq!(grads[0].item(), 4.0);
        assert_eq!(grads[1].item(), 0.0);
    }

    #[test]
    fn max_pool_ties_lowest_index() {
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(3, 1, vec![1.0, 1.0, 0.0]).unwrap());
        let m = g.max_pool(x, 0).unwrap();
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }
}
