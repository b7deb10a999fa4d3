//! Minimal reverse-mode tape.
//!
//! Every forward pass (training *and* inference) is recorded as a flat list
//! of nodes; `backward` walks the list once in reverse and accumulates
//! gradients for whichever leaves need them. Parents always precede children,
//! so a single reverse sweep suffices. The op set is exactly what the model
//! needs — nothing speculative.

use std::cell::{Ref, RefCell};

use super::tensor::Tensor;

/// Handle to a node on a [`Tape`]. Plain index; cheap to copy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

struct Node {
    value: Tensor,
    op: Op,
}

enum Op {
    Leaf { trainable: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Ln(Var),
    ClampMin(Var, f64),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    /// Adds a rank-1 bias to every row of a matrix.
    AddRow(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    /// Row gather; indices may repeat.
    SelectRows(Var, Vec<usize>),
    Reshape(Var),
    /// 1-D convolution over rows (frames) with replicate padding.
    /// x: [t, c_in], w: [k, c_in, c_out], b: [c_out].
    Conv1dSame { x: Var, w: Var, b: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    /// Mean-pools rows into a fixed number of chunks (repeating rows when
    /// there are fewer rows than chunks).
    ChunkMeanRows(Var, usize),
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.index()).and_then(|g| g.as_ref())
    }
}

impl Var {
    fn index(self) -> usize {
        self.0
    }
}

/// Recording tape. One tape per forward pass; build nodes through the op
/// methods, then call [`Tape::backward`] on a scalar loss.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    /// Borrow a node's value. Drop the borrow before recording new ops.
    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.index()].value)
    }

    pub fn value_clone(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.index()].value.clone()
    }

    /// Scalar value of a 1-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.index()].value.item()
    }

    /// Trainable leaf: receives a gradient slot the optimizer will read.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { trainable: true })
    }

    /// Non-trainable input: participates in forward math, still receives a
    /// gradient (needed when checking input sensitivities) but is skipped by
    /// parameter collection.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { trainable: false })
    }

    pub fn is_trainable(&self, v: Var) -> bool {
        matches!(self.nodes.borrow()[v.index()].op, Op::Leaf { trainable: true })
    }

    // ───────────────────────── elementwise ─────────────────────────

    pub fn add(&self, a: Var, b: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            n[a.index()].value.zip_map(&n[b.index()].value, |x, y| x + y)
        };
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            n[a.index()].value.zip_map(&n[b.index()].value, |x, y| x - y)
        };
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            n[a.index()].value.zip_map(&n[b.index()].value, |x, y| x * y)
        };
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let v = self.nodes.borrow()[a.index()].value.map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let v = self.nodes.borrow()[a.index()].value.map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        let v = self.nodes.borrow()[a.index()].value.map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let v = self.nodes.borrow()[a.index()].value.map(stable_sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn ln(&self, a: Var) -> Var {
        let v = self.nodes.borrow()[a.index()].value.map(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn clamp_min(&self, a: Var, floor: f64) -> Var {
        let v = self.nodes.borrow()[a.index()].value.map(|x| x.max(floor));
        self.push(v, Op::ClampMin(a, floor))
    }

    pub fn abs(&self, a: Var) -> Var {
        let v = self.nodes.borrow()[a.index()].value.map(f64::abs);
        self.push(v, Op::Abs(a))
    }

    // ───────────────────────── linear algebra ─────────────────────────

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            n[a.index()].value.matmul(&n[b.index()].value)
        };
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let v = self.nodes.borrow()[a.index()].value.transposed();
        self.push(v, Op::Transpose(a))
    }

    /// `x + b` where `b` is broadcast over the rows of `x`.
    pub fn add_row(&self, x: Var, b: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            let xv = &n[x.index()].value;
            let bv = &n[b.index()].value;
            assert_eq!(bv.rank(), 1, "row bias must be rank 1");
            assert_eq!(xv.cols(), bv.shape()[0], "bias width mismatch");
            let mut out = xv.clone();
            for r in 0..xv.rows() {
                for (o, &add) in out.row_mut(r).iter_mut().zip(bv.data()) {
                    *o += add;
                }
            }
            out
        };
        self.push(v, Op::AddRow(x, b))
    }

    // ───────────────────────── reductions, softmax ─────────────────────────

    pub fn sum(&self, a: Var) -> Var {
        let v = self.nodes.borrow()[a.index()].value.data().iter().sum();
        self.push(Tensor::scalar(v), Op::Sum(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.nodes.borrow();
        let t = &n[a.index()].value;
        let v = t.data().iter().sum::<f64>() / t.numel() as f64;
        drop(n);
        self.push(Tensor::scalar(v), Op::Mean(a))
    }

    /// Numerically stable softmax along each row of a matrix.
    pub fn softmax_rows(&self, a: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            let x = &n[a.index()].value;
            let mut out = x.clone();
            for r in 0..x.rows() {
                softmax_in_place(out.row_mut(r));
            }
            out
        };
        self.push(v, Op::SoftmaxRows(a))
    }

    // ───────────────────────── shape plumbing ─────────────────────────

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let v = {
            let n = self.nodes.borrow();
            let rows = n[parts[0].index()].value.rows();
            let total: usize = parts.iter().map(|p| n[p.index()].value.cols()).sum();
            let mut out = Tensor::zeros(vec![rows, total]);
            let mut off = 0;
            for p in parts {
                let t = &n[p.index()].value;
                assert_eq!(t.rows(), rows, "concat_cols row mismatch");
                for r in 0..rows {
                    out.row_mut(r)[off..off + t.cols()].copy_from_slice(t.row(r));
                }
                off += t.cols();
            }
            out
        };
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let v = {
            let n = self.nodes.borrow();
            let cols = n[parts[0].index()].value.cols();
            let total: usize = parts.iter().map(|p| n[p.index()].value.rows()).sum();
            let mut out = Tensor::zeros(vec![total, cols]);
            let mut off = 0;
            for p in parts {
                let t = &n[p.index()].value;
                assert_eq!(t.cols(), cols, "concat_rows col mismatch");
                for r in 0..t.rows() {
                    out.row_mut(off + r).copy_from_slice(t.row(r));
                }
                off += t.rows();
            }
            out
        };
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Var {
        let v = {
            let n = self.nodes.borrow();
            let t = &n[x.index()].value;
            assert!(start + len <= t.cols(), "slice_cols out of range");
            let mut out = Tensor::zeros(vec![t.rows(), len]);
            for r in 0..t.rows() {
                out.row_mut(r).copy_from_slice(&t.row(r)[start..start + len]);
            }
            out
        };
        self.push(v, Op::SliceCols(x, start, len))
    }

    pub fn slice_rows(&self, x: Var, start: usize, len: usize) -> Var {
        let v = {
            let n = self.nodes.borrow();
            let t = &n[x.index()].value;
            assert!(start + len <= t.rows(), "slice_rows out of range");
            let mut out = Tensor::zeros(vec![len, t.cols()]);
            for r in 0..len {
                out.row_mut(r).copy_from_slice(t.row(start + r));
            }
            out
        };
        self.push(v, Op::SliceRows(x, start, len))
    }

    pub fn select_rows(&self, x: Var, indices: &[usize]) -> Var {
        let v = {
            let n = self.nodes.borrow();
            let t = &n[x.index()].value;
            let mut out = Tensor::zeros(vec![indices.len(), t.cols()]);
            for (r, &i) in indices.iter().enumerate() {
                out.row_mut(r).copy_from_slice(t.row(i));
            }
            out
        };
        self.push(v, Op::SelectRows(x, indices.to_vec()))
    }

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Var {
        let v = self.nodes.borrow()[x.index()].value.reshaped(shape);
        self.push(v, Op::Reshape(x))
    }

    // ───────────────────────── fused layers ─────────────────────────

    pub fn conv1d_same(&self, x: Var, w: Var, b: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            conv1d_forward(&n[x.index()].value, &n[w.index()].value, &n[b.index()].value)
        };
        self.push(v, Op::Conv1dSame { x, w, b })
    }

    /// Layer normalization over the feature (last) axis of each row.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let v = {
            let n = self.nodes.borrow();
            let xv = &n[x.index()].value;
            let g = &n[gain.index()].value;
            let bv = &n[bias.index()].value;
            assert_eq!(g.shape(), [xv.cols()], "layer_norm gain width");
            assert_eq!(bv.shape(), [xv.cols()], "layer_norm bias width");
            let mut out = xv.clone();
            for r in 0..xv.rows() {
                let row = out.row_mut(r);
                let (mu, sd) = row_moments(row, eps);
                for (j, v) in row.iter_mut().enumerate() {
                    *v = g.data()[j] * (*v - mu) / sd + bv.data()[j];
                }
            }
            out
        };
        self.push(v, Op::LayerNorm { x, gain, bias, eps })
    }

    pub fn chunk_mean_rows(&self, x: Var, chunks: usize) -> Var {
        assert!(chunks > 0);
        let v = {
            let n = self.nodes.borrow();
            let t = &n[x.index()].value;
            let mut out = Tensor::zeros(vec![chunks, t.cols()]);
            for (c, (s, e)) in chunk_bounds(t.rows(), chunks).into_iter().enumerate() {
                let inv = 1.0 / (e - s) as f64;
                for r in s..e {
                    for (o, &xv) in out.row_mut(c).iter_mut().zip(t.row(r)) {
                        *o += xv * inv;
                    }
                }
            }
            out
        };
        self.push(v, Op::ChunkMeanRows(x, chunks))
    }

    // ───────────────────────── loss helpers ─────────────────────────

    /// Mean binary cross-entropy against a constant target, with the usual
    /// 1e-12 log guard.
    pub fn bce_mean(&self, pred: Var, target: &Tensor) -> Var {
        let t = self.constant(target.clone());
        let one_minus_t = self.constant(target.map(|x| 1.0 - x));
        let p = self.clamp_min(pred, 1e-12);
        let neg = self.scale(pred, -1.0);
        let q = self.add_scalar(neg, 1.0);
        let q = self.clamp_min(q, 1e-12);
        let lp = self.ln(p);
        let lq = self.ln(q);
        let a = self.mul(t, lp);
        let b = self.mul(one_minus_t, lq);
        let s = self.add(a, b);
        let m = self.mean(s);
        self.scale(m, -1.0)
    }

    /// Mean absolute error against a constant target.
    pub fn l1_mean(&self, pred: Var, target: &Tensor) -> Var {
        let t = self.constant(target.clone());
        let d = self.sub(pred, t);
        let a = self.abs(d);
        self.mean(a)
    }

    // ───────────────────────── backward ─────────────────────────

    /// Reverse sweep from a scalar loss. Returns gradients for every node
    /// reached; leaves not on the loss's path get `None`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.index()].value.numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.index()] = Some(Tensor::full(nodes[loss.index()].value.shape().to_vec(), 1.0));

        for i in (0..nodes.len()).rev() {
            if grads[i].is_none() {
                continue;
            }
            let (before, rest) = grads.split_at_mut(i);
            let g = rest[0].as_ref().unwrap();
            let node = &nodes[i];
            let val = |v: Var| &nodes[v.index()].value;
            fn slot<'a>(nodes: &[Node], gr: &'a mut [Option<Tensor>], v: Var) -> &'a mut Tensor {
                let shape = nodes[v.index()].value.shape().to_vec();
                gr[v.index()].get_or_insert_with(move || Tensor::zeros(shape))
            }

            match &node.op {
                Op::Leaf { .. } => {}
                Op::Add(a, b) => {
                    slot(&nodes, before, *a).add_assign(g);
                    slot(&nodes, before, *b).add_assign(g);
                }
                Op::Sub(a, b) => {
                    slot(&nodes, before, *a).add_assign(g);
                    let neg = g.map(|x| -x);
                    slot(&nodes, before, *b).add_assign(&neg);
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(val(*b), |gv, bv| gv * bv);
                    let db = g.zip_map(val(*a), |gv, av| gv * av);
                    slot(&nodes, before, *a).add_assign(&da);
                    slot(&nodes, before, *b).add_assign(&db);
                }
                Op::Scale(a, c) => {
                    let da = g.map(|x| x * c);
                    slot(&nodes, before, *a).add_assign(&da);
                }
                Op::AddScalar(a) => {
                    slot(&nodes, before, *a).add_assign(g);
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul(&val(*b).transposed());
                    let db = val(*a).transposed().matmul(g);
                    slot(&nodes, before, *a).add_assign(&da);
                    slot(&nodes, before, *b).add_assign(&db);
                }
                Op::Transpose(a) => {
                    let da = g.transposed();
                    slot(&nodes, before, *a).add_assign(&da);
                }
                Op::Relu(a) => {
                    let da = g.zip_map(val(*a), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                    slot(&nodes, before, *a).add_assign(&da);
                }
                Op::Sigmoid(a) => {
                    let da = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y));
                    slot(&nodes, before, *a).add_assign(&da);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut da = Tensor::zeros(y.shape().to_vec());
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(gv, yv)| gv * yv).sum();
                        for j in 0..y.cols() {
                            da.set2(r, j, y.at2(r, j) * (g.at2(r, j) - dot));
                        }
                    }
                    slot(&nodes, before, *a).add_assign(&da);
                }
                Op::Ln(a) => {
                    let da = g.zip_map(val(*a), |gv, xv| gv / xv);
                    slot(&nodes, before, *a).add_assign(&da);
                }
                Op::ClampMin(a, floor) => {
                    let da = g.zip_map(val(*a), |gv, xv| if xv > *floor { gv } else { 0.0 });
                    slot(&nodes, before, *a).add_assign(&da);
                }
                Op::Abs(a) => {
                    let da = g.zip_map(val(*a), |gv, xv| gv * xv.signum() * if xv == 0.0 { 0.0 } else { 1.0 });
                    slot(&nodes, before, *a).add_assign(&da);
                }
                Op::Sum(a) => {
                    let da = Tensor::full(val(*a).shape().to_vec(), g.item());
                    slot(&nodes, before, *a).add_assign(&da);
                }
                Op::Mean(a) => {
                    let n = val(*a).numel() as f64;
                    let da = Tensor::full(val(*a).shape().to_vec(), g.item() / n);
                    slot(&nodes, before, *a).add_assign(&da);
                }
                Op::AddRow(x, b) => {
                    slot(&nodes, before, *x).add_assign(g);
                    let db = slot(&nodes, before, *b);
                    for r in 0..g.rows() {
                        for (d, &gv) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += gv;
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = val(*p).cols();
                        let dp = slot(&nodes, before, *p);
                        for r in 0..g.rows() {
                            for (d, &gv) in dp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                *d += gv;
                            }
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = val(*p).rows();
                        let dp = slot(&nodes, before, *p);
                        for r in 0..h {
                            for (d, &gv) in dp.row_mut(r).iter_mut().zip(g.row(off + r)) {
                                *d += gv;
                            }
                        }
                        off += h;
                    }
                }
                Op::SliceCols(x, start, len) => {
                    let dx = slot(&nodes, before, *x);
                    for r in 0..g.rows() {
                        for (d, &gv) in dx.row_mut(r)[*start..*start + *len].iter_mut().zip(g.row(r)) {
                            *d += gv;
                        }
                    }
                }
                Op::SliceRows(x, start, _len) => {
                    let dx = slot(&nodes, before, *x);
                    for r in 0..g.rows() {
                        for (d, &gv) in dx.row_mut(start + r).iter_mut().zip(g.row(r)) {
                            *d += gv;
                        }
                    }
                }
                Op::SelectRows(x, indices) => {
                    let dx = slot(&nodes, before, *x);
                    for (r, &i) in indices.iter().enumerate() {
                        for (d, &gv) in dx.row_mut(i).iter_mut().zip(g.row(r)) {
                            *d += gv;
                        }
                    }
                }
                Op::Reshape(x) => {
                    let da = g.reshaped(val(*x).shape().to_vec());
                    slot(&nodes, before, *x).add_assign(&da);
                }
                Op::Conv1dSame { x, w, b } => {
                    let (dx, dw, db) = conv1d_backward(val(*x), val(*w), g);
                    slot(&nodes, before, *x).add_assign(&dx);
                    slot(&nodes, before, *w).add_assign(&dw);
                    slot(&nodes, before, *b).add_assign(&db);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (dx, dg, db) = layer_norm_backward(val(*x), val(*gain), g, *eps);
                    slot(&nodes, before, *x).add_assign(&dx);
                    slot(&nodes, before, *gain).add_assign(&dg);
                    slot(&nodes, before, *bias).add_assign(&db);
                }
                Op::ChunkMeanRows(x, chunks) => {
                    let xv = val(*x);
                    let mut dx = Tensor::zeros(xv.shape().to_vec());
                    for (c, (s, e)) in chunk_bounds(xv.rows(), *chunks).into_iter().enumerate() {
                        let inv = 1.0 / (e - s) as f64;
                        for r in s..e {
                            for (d, &gv) in dx.row_mut(r).iter_mut().zip(g.row(c)) {
                                *d += gv * inv;
                            }
                        }
                    }
                    slot(&nodes, before, *x).add_assign(&dx);
                }
            }
        }

        Gradients { grads }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, (var + eps).sqrt())
}

/// Chunk boundaries for mean pooling: `chunks` half-open row ranges. For
/// inputs shorter than `chunks` some ranges repeat a row, so every chunk is
/// non-empty.
pub(crate) fn chunk_bounds(rows: usize, chunks: usize) -> Vec<(usize, usize)> {
    assert!(rows > 0, "chunk_bounds on empty input");
    (0..chunks)
        .map(|c| {
            let s = c * rows / chunks;
            let e = (c + 1) * rows / chunks;
            if e <= s {
                (s, s + 1)
            } else {
                (s, e)
            }
        })
        .collect()
}

fn conv1d_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(w.rank(), 3, "conv weights must be [k, c_in, c_out]");
    let (t_len, c_in) = (x.rows(), x.cols());
    let (k, w_in, c_out) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    assert_eq!(c_in, w_in, "conv channel mismatch");
    assert_eq!(b.shape(), [c_out], "conv bias width");
    assert!(k % 2 == 1, "conv kernel must be odd for same padding");
    let half = (k / 2) as isize;
    let mut out = Tensor::zeros(vec![t_len, c_out]);
    for t in 0..t_len {
        let row = out.row_mut(t);
        row.copy_from_slice(b.data());
        for dk in 0..k {
            let src = (t as isize + dk as isize - half).clamp(0, t_len as isize - 1) as usize;
            let x_row = x.row(src);
            for (i, &xv) in x_row.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let w_off = (dk * c_in + i) * c_out;
                for (o, &wv) in row.iter_mut().zip(&w.data()[w_off..w_off + c_out]) {
                    *o += xv * wv;
                }
            }
        }
    }
    out
}

fn conv1d_backward(x: &Tensor, w: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (t_len, c_in) = (x.rows(), x.cols());
    let (k, _, c_out) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let half = (k / 2) as isize;
    let mut dx = Tensor::zeros(vec![t_len, c_in]);
    let mut dw = Tensor::zeros(w.shape().to_vec());
    let mut db = Tensor::zeros(vec![c_out]);
    for t in 0..t_len {
        let g_row = g.row(t);
        for (d, &gv) in db.data_mut().iter_mut().zip(g_row) {
            *d += gv;
        }
        for dk in 0..k {
            let src = (t as isize + dk as isize - half).clamp(0, t_len as isize - 1) as usize;
            for i in 0..c_in {
                let w_off = (dk * c_in + i) * c_out;
                let mut acc = 0.0;
                for (o, &gv) in g_row.iter().enumerate() {
                    acc += gv * w.data()[w_off + o];
                    dw.data_mut()[w_off + o] += x.at2(src, i) * gv;
                }
                dx.data_mut()[src * c_in + i] += acc;
            }
        }
    }
    (dx, dw, db)
}

fn layer_norm_backward(x: &Tensor, gain: &Tensor, g: &Tensor, eps: f64) -> (Tensor, Tensor, Tensor) {
    let (rows, cols) = (x.rows(), x.cols());
    let n = cols as f64;
    let mut dx = Tensor::zeros(vec![rows, cols]);
    let mut dgain = Tensor::zeros(vec![cols]);
    let mut dbias = Tensor::zeros(vec![cols]);
    for r in 0..rows {
        let (mu, sd) = row_moments(x.row(r), eps);
        let xhat: Vec<f64> = x.row(r).iter().map(|&v| (v - mu) / sd).collect();
        let dxhat: Vec<f64> = g.row(r).iter().zip(gain.data()).map(|(&gv, &ga)| gv * ga).collect();
        let mean_dxhat = dxhat.iter().sum::<f64>() / n;
        let mean_dxhat_xhat = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
        for j in 0..cols {
            dgain.data_mut()[j] += g.at2(r, j) * xhat[j];
            dbias.data_mut()[j] += g.at2(r, j);
            dx.set2(r, j, (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat) / sd);
        }
    }
    (dx, dgain, dbias)
}
