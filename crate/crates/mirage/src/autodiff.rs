//! Minimal reverse-mode automatic differentiation over `Array2<f64>`.
//!
//! A [`Tape`] records a computation as a flat list of nodes; values are
//! computed eagerly on push, and [`Tape::backward`] walks the list in
//! reverse to accumulate exact gradients. The op set is exactly what
//! the denoiser and its losses need; gradients flow to every leaf, and
//! the caller decides which leaves are parameters.
//!
//! Scalars are represented as 1x1 arrays. Construction order is the
//! topological order, so a single reverse sweep suffices.

use ndarray::{Array2, Axis};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TapeError {
    #[error("backward requires a scalar (1x1) loss node, got {rows}x{cols}")]
    LossNotScalar { rows: usize, cols: usize },
}

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise product.
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Elementwise addition of a constant scalar.
    AddConst(NodeId),
    /// Broadcast-add a 1xC row to every row of an NxC matrix.
    AddRow(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Silu(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    /// Row-wise log-softmax.
    LogSoftmax(NodeId),
    /// Select rows by index, with repetition allowed.
    GatherRows(NodeId, Vec<usize>),
    /// Scatter rows into segments and average; empty segments yield
    /// zero rows. The vec maps each input row to its segment.
    SegmentMean(NodeId, Vec<usize>, usize),
    /// Column-wise mean over rows, producing 1xC.
    MeanRows(NodeId),
    /// Sum along each row, producing Nx1.
    RowSum(NodeId),
    ConcatCols(Vec<NodeId>),
    /// Sum of all entries, producing 1x1.
    SumAll(NodeId),
    /// Row-major reinterpretation to a new shape of equal size.
    Reshape(NodeId),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients of one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient for `id`, or `None` when the loss does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads[id.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.dim(), (1, 1), "scalar() on a non-scalar node");
        v[(0, 0)]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Constant scalar as a 1x1 leaf.
    pub fn scalar_leaf(&mut self, v: f64) -> NodeId {
        self.leaf(Array2::from_elem((1, 1), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x + c);
        self.push(v, Op::AddConst(a))
    }

    /// `a` is NxC, `row` is 1xC; the row is added to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "bias must be a single row");
        assert_eq!(r.ncols(), self.value(a).ncols(), "bias width mismatch");
        let v = self.value(a) + r;
        self.push(v, Op::AddRow(a, row))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&e| (e - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|e| e - lse);
        }
        self.push(v, Op::LogSoftmax(a))
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: Vec<usize>) -> NodeId {
        let x = self.value(a);
        let mut v = Array2::zeros((indices.len(), x.ncols()));
        for (out, &i) in indices.iter().enumerate() {
            v.row_mut(out).assign(&x.row(i));
        }
        self.push(v, Op::GatherRows(a, indices))
    }

    pub fn segment_mean(&mut self, a: NodeId, segments: Vec<usize>, n_segments: usize) -> NodeId {
        let x = self.value(a);
        assert_eq!(segments.len(), x.nrows(), "one segment id per row");
        let mut v = Array2::zeros((n_segments, x.ncols()));
        let counts = segment_counts(&segments, n_segments);
        for (row, &s) in segments.iter().enumerate() {
            assert!(s < n_segments, "segment id {s} out of range");
            let mut target = v.row_mut(s);
            target += &x.row(row);
        }
        for (s, &c) in counts.iter().enumerate() {
            if c > 0 {
                let mut row = v.row_mut(s);
                row.mapv_inplace(|e| e / c as f64);
            }
        }
        self.push(v, Op::SegmentMean(a, segments, n_segments))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let v = x
            .mean_axis(Axis(0))
            .expect("mean over zero rows")
            .insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let v = x.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::RowSum(a))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).nrows();
        let total: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut v = Array2::zeros((rows, total));
        let mut col = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.nrows(), rows, "row count mismatch in column concat");
            v.slice_mut(ndarray::s![.., col..col + x.ncols()]).assign(x);
            col += x.ncols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let x = self.value(a);
        assert_eq!(x.len(), rows * cols, "reshape must preserve size");
        let v = Array2::from_shape_vec((rows, cols), x.iter().cloned().collect())
            .expect("shape already validated");
        self.push(v, Op::Reshape(a))
    }

    /// Reverse sweep from a scalar loss node. Returns the gradient of
    /// the loss with respect to every node it depends on.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TapeError> {
        let dim = self.value(loss).dim();
        if dim != (1, 1) {
            return Err(TapeError::LossNotScalar {
                rows: dim.0,
                cols: dim.1,
            });
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            // Clone rather than take: the entry must stay available to
            // the caller after the sweep.
            let Some(g) = grads[idx].clone() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g.mapv(|x| -x));
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, &g.mapv(|x| x * c));
                }
                Op::AddConst(a) => {
                    accumulate(&mut grads, *a, &g);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, *a, &g);
                    let col_sum = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *row, &col_sum);
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Silu(a) => {
                    let x = self.value(*a);
                    let dg = x.mapv(|v| {
                        let s = sigmoid(v);
                        s * (1.0 + v * (1.0 - s))
                    });
                    accumulate(&mut grads, *a, &(&g * &dg));
                }
                Op::Exp(a) => {
                    // d exp(x) = exp(x), already computed as this value.
                    let ga = &g * &self.nodes[idx].value;
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Ln(a) => {
                    let ga = &g / self.value(*a);
                    accumulate(&mut grads, *a, &ga);
                }
                Op::LogSoftmax(a) => {
                    // dx = g - softmax(x) * rowsum(g).
                    let soft = self.nodes[idx].value.mapv(f64::exp);
                    let row_g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = &g - &(&soft * &row_g);
                    accumulate(&mut grads, *a, &ga);
                }
                Op::GatherRows(a, indices) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    for (out, &i) in indices.iter().enumerate() {
                        let mut row = ga.row_mut(i);
                        row += &g.row(out);
                    }
                    accumulate(&mut grads, *a, &ga);
                }
                Op::SegmentMean(a, segments, n_segments) => {
                    let counts = segment_counts(segments, *n_segments);
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    for (row, &s) in segments.iter().enumerate() {
                        let scale = 1.0 / counts[s] as f64;
                        let mut target = ga.row_mut(row);
                        target += &g.row(s).mapv(|x| x * scale);
                    }
                    accumulate(&mut grads, *a, &ga);
                }
                Op::MeanRows(a) => {
                    let n = self.value(*a).nrows();
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    let per_row = g.row(0).mapv(|x| x / n as f64);
                    for mut row in ga.rows_mut() {
                        row += &per_row;
                    }
                    accumulate(&mut grads, *a, &ga);
                }
                Op::RowSum(a) => {
                    let dim = self.value(*a).dim();
                    let mut ga = Array2::zeros(dim);
                    for (i, mut row) in ga.rows_mut().into_iter().enumerate() {
                        row.fill(g[(i, 0)]);
                    }
                    accumulate(&mut grads, *a, &ga);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        let slice = g.slice(ndarray::s![.., col..col + w]).to_owned();
                        accumulate(&mut grads, p, &slice);
                        col += w;
                    }
                }
                Op::SumAll(a) => {
                    let ga = Array2::from_elem(self.value(*a).dim(), g[(0, 0)]);
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Reshape(a) => {
                    let dim = self.value(*a).dim();
                    let ga = Array2::from_shape_vec(dim, g.iter().cloned().collect())
                        .expect("gradient has the source size");
                    accumulate(&mut grads, *a, &ga);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], id: NodeId, g: &Array2<f64>) {
    match &mut grads[id.0] {
        Some(existing) => *existing += g,
        slot => *slot = Some(g.clone()),
    }
}

fn segment_counts(segments: &[usize], n_segments: usize) -> Vec<usize> {
    let mut counts = vec![0usize; n_segments];
    for &s in segments {
        counts[s] += 1;
    }
    counts
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
