use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Abs(Var),
    Log(Var),
    ClampMin(Var, f64),
    SegmentSoftmax(Var, Vec<usize>),
    Concat(Vec<Var>),
    Extract(Var, usize),
    ZeroMask(Var, usize, usize),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run tape. Nodes are appended in evaluation order, so index order
/// is a topological order and the reverse pass walks it backwards once.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`; exactly zero if `var` did not reach the loss.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

/// How a binary elementwise op pairs its operands.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Pairing {
    Same,
    /// rhs is a vector broadcast over the rows of lhs.
    RowBroadcast,
}

fn pairing(op: &str, a: &Tensor, b: &Tensor) -> Result<Pairing> {
    if a.shape() == b.shape() {
        return Ok(Pairing::Same);
    }
    if a.rank() == 2 && b.rank() == 1 && a.cols() == b.cols() {
        return Ok(Pairing::RowBroadcast);
    }
    Err(Error::config(format!(
        "{op}: incompatible shapes {:?} and {:?}",
        a.shape(),
        b.shape()
    )))
}

fn with_cols(t: &Tensor, cols: usize) -> Vec<usize> {
    if t.rank() == 2 {
        vec![t.rows(), cols]
    } else {
        vec![cols]
    }
}

fn check_range(op: &str, t: &Tensor, start: usize, len: usize) -> Result<()> {
    if len == 0 || start + len > t.cols() {
        return Err(Error::config(format!(
            "{op}: column range {start}..{} outside width {}",
            start + len,
            t.cols()
        )));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops every node so the graph can be reused for a new pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A constant input: never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::numeric(name, "non-finite value in result"));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
            }
            Op::Concat(parts) => parts.iter().any(|p| self.nodes[p.0].requires_grad),
            Op::Transpose(a)
            | Op::Relu(a)
            | Op::Abs(a)
            | Op::Log(a)
            | Op::ClampMin(a, _)
            | Op::SegmentSoftmax(a, _)
            | Op::Extract(a, _)
            | Op::ZeroMask(a, _, _)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sum(a)
            | Op::Mean(a) => self.nodes[a.0].requires_grad,
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(Error::config(format!(
                "matmul: incompatible shapes {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.rank() != 2 {
            return Err(Error::config(format!("transpose: need a matrix, got {:?}", t.shape())));
        }
        let (r, c) = (t.rows(), t.cols());
        let out = transposed(t.data(), r, c);
        self.push("transpose", Tensor::new(vec![c, r], out)?, Op::Transpose(a))
    }

    /// Elementwise sum; `b` may be a vector broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b))
    }

    fn binary(&self, name: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = match pairing(name, ta, tb)? {
            Pairing::Same => ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
            Pairing::RowBroadcast => {
                let c = ta.cols();
                ta.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, tb.data()[i % c]))
                    .collect()
            }
        };
        Ok(ta.same_layout(data))
    }

    fn unary(&mut self, name: &str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let out = t.same_layout(t.data().iter().map(|&x| f(x)).collect());
        self.push(name, out, op)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, Op::Abs(a), f64::abs)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, Op::Log(a), f64::ln)
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.unary("clamp_min", a, Op::ClampMin(a, floor), |x| x.max(floor))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, Op::AddScalar(a), |x| x + c)
    }

    /// Softmax applied independently to consecutive column segments of the
    /// given widths, row by row. `segments` must cover the trailing extent.
    pub fn segment_softmax(&mut self, a: Var, segments: &[usize]) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if segments.contains(&0) || segments.iter().sum::<usize>() != t.cols() {
            return Err(Error::config(format!(
                "segment_softmax: segments {segments:?} do not cover width {}",
                t.cols()
            )));
        }
        let c = t.cols();
        let mut out = vec![0.0; t.len()];
        for r in 0..t.rows() {
            let row = &t.data()[r * c..(r + 1) * c];
            let dst = &mut out[r * c..(r + 1) * c];
            let mut start = 0;
            for &w in segments {
                softmax_into(&row[start..start + w], &mut dst[start..start + w]);
                start += w;
            }
        }
        let out = t.same_layout(out);
        self.push("segment_softmax", out, Op::SegmentSoftmax(a, segments.to_vec()))
    }

    /// Softmax over the whole trailing extent.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let c = self.nodes[a.0].value.cols();
        self.segment_softmax(a, &[c])
    }

    /// Concatenates along the trailing axis. All parts share rank and row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .map(|p| &self.nodes[p.0].value)
            .ok_or_else(|| Error::config("concat: no parts"))?;
        let (rank, rows) = (first.rank(), first.rows());
        let mut total = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.rank() != rank || t.rows() != rows || rank == 0 {
                return Err(Error::config(format!(
                    "concat: part shape {:?} does not match {:?}",
                    t.shape(),
                    first.shape()
                )));
            }
            total += t.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let shape = if rank == 2 { vec![rows, total] } else { vec![total] };
        self.push("concat", Tensor::new(shape, out)?, Op::Concat(parts.to_vec()))
    }

    /// Columns `start..start+len` of every row.
    pub fn extract(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        check_range("extract", t, start, len)?;
        let mut out = Vec::with_capacity(t.rows() * len);
        for r in 0..t.rows() {
            out.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let out = Tensor::new(with_cols(t, len), out)?;
        self.push("extract", out, Op::Extract(a, start))
    }

    /// Copy of `a` with columns `start..start+len` set to zero in every row.
    pub fn zero_mask(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        check_range("zero_mask", t, start, len)?;
        let mut out = t.clone();
        let c = t.cols();
        for r in 0..t.rows() {
            out.data_mut()[r * c + start..r * c + start + len].fill(0.0);
        }
        self.push("zero_mask", out, Op::ZeroMask(a, start, len))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a))
    }

    /// Reverse pass from a one-element `loss`. Allowed once per recording;
    /// call [`Graph::reset`] before recording the next pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::usage("backward already ran on this graph; reset it first"));
        }
        let lt = &self.nodes[loss.0].value;
        if lt.len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        self.backward_done = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(lt.same_layout(vec![1.0]));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if wants(*a) {
                    // dA = G * B^T
                    let bt = transposed(tb.data(), k, n);
                    let mut da = vec![0.0; m * k];
                    matmul_into(gd, &bt, &mut da, m, n, k);
                    accumulate(grads, *a, ta.same_layout(da));
                }
                if wants(*b) {
                    // dB = A^T * G
                    let at = transposed(ta.data(), m, k);
                    let mut db = vec![0.0; k * n];
                    matmul_into(&at, gd, &mut db, k, m, n);
                    accumulate(grads, *b, tb.same_layout(db));
                }
            }
            Op::Transpose(a) => {
                let ta = val(*a);
                let d = transposed(gd, ta.cols(), ta.rows());
                accumulate(grads, *a, ta.same_layout(d));
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if wants(*b) {
                    let tb = val(*b);
                    let db = reduce_to(gd, val(*a), tb, |x| sign * x);
                    accumulate(grads, *b, tb.same_layout(db));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let c = ta.cols();
                let broadcast = ta.shape() != tb.shape();
                if wants(*a) {
                    let da = gd
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| gi * tb.data()[if broadcast { i % c } else { i }])
                        .collect();
                    accumulate(grads, *a, ta.same_layout(da));
                }
                if wants(*b) {
                    let prod: Vec<f64> = gd.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    let db = reduce_to(&prod, ta, tb, |x| x);
                    accumulate(grads, *b, tb.same_layout(db));
                }
            }
            Op::Relu(a) => {
                let ta = val(*a);
                let d = gd
                    .iter()
                    .zip(ta.data())
                    .map(|(&gi, &x)| if x > 0.0 { gi } else { 0.0 })
                    .collect();
                accumulate(grads, *a, ta.same_layout(d));
            }
            Op::Abs(a) => {
                let ta = val(*a);
                let d = gd
                    .iter()
                    .zip(ta.data())
                    .map(|(&gi, &x)| {
                        if x > 0.0 {
                            gi
                        } else if x < 0.0 {
                            -gi
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accumulate(grads, *a, ta.same_layout(d));
            }
            Op::Log(a) => {
                let ta = val(*a);
                let d = gd.iter().zip(ta.data()).map(|(&gi, &x)| gi / x).collect();
                accumulate(grads, *a, ta.same_layout(d));
            }
            Op::ClampMin(a, floor) => {
                let ta = val(*a);
                let d = gd
                    .iter()
                    .zip(ta.data())
                    .map(|(&gi, &x)| if x > *floor { gi } else { 0.0 })
                    .collect();
                accumulate(grads, *a, ta.same_layout(d));
            }
            Op::SegmentSoftmax(a, segments) => {
                let y = &node.value;
                let c = y.cols();
                let mut d = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let mut start = r * c;
                    for &w in segments {
                        let ys = &y.data()[start..start + w];
                        let gs = &gd[start..start + w];
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for j in 0..w {
                            d[start + j] = ys[j] * (gs[j] - dot);
                        }
                        start += w;
                    }
                }
                accumulate(grads, *a, val(*a).same_layout(d));
            }
            Op::Concat(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for p in parts {
                    let tp = val(*p);
                    let w = tp.cols();
                    if wants(*p) {
                        let mut d = Vec::with_capacity(tp.len());
                        for r in 0..tp.rows() {
                            d.extend_from_slice(&gd[r * c + offset..r * c + offset + w]);
                        }
                        accumulate(grads, *p, tp.same_layout(d));
                    }
                    offset += w;
                }
            }
            Op::Extract(a, start) => {
                let ta = val(*a);
                let (c, w) = (ta.cols(), g.cols());
                let mut d = vec![0.0; ta.len()];
                for r in 0..ta.rows() {
                    d[r * c + start..r * c + start + w].copy_from_slice(&gd[r * w..(r + 1) * w]);
                }
                accumulate(grads, *a, ta.same_layout(d));
            }
            Op::ZeroMask(a, start, len) => {
                let ta = val(*a);
                let c = ta.cols();
                let mut d = gd.to_vec();
                for r in 0..ta.rows() {
                    d[r * c + start..r * c + start + len].fill(0.0);
                }
                accumulate(grads, *a, ta.same_layout(d));
            }
            Op::Scale(a, s) => {
                let d = gd.iter().map(|x| x * s).collect();
                accumulate(grads, *a, g.same_layout(d));
            }
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::Sum(a) => {
                let ta = val(*a);
                accumulate(grads, *a, Tensor::full(ta.shape(), gd[0]));
            }
            Op::Mean(a) => {
                let ta = val(*a);
                accumulate(grads, *a, Tensor::full(ta.shape(), gd[0] / ta.len() as f64));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, d: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

/// Reduces a gradient laid out like `a` down to the layout of `b`
/// (identity, or column sums for row broadcast).
fn reduce_to(gd: &[f64], a: &Tensor, b: &Tensor, f: impl Fn(f64) -> f64) -> Vec<f64> {
    if a.shape() == b.shape() {
        return gd.iter().map(|&x| f(x)).collect();
    }
    let c = a.cols();
    let mut out = vec![0.0; c];
    for row in gd.chunks(c) {
        for (o, &x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
    out.into_iter().map(f).collect()
}

fn transposed(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// Max-shifted softmax of one segment.
pub(crate) fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}
