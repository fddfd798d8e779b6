//! Dense 64-bit matrices with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to [`Tensor`] handles together
//! with enough information to run the chain rule backwards. Values are
//! immutable once recorded. A tape created with [`Tape::no_grad`] evaluates
//! the same operations without keeping backward rules, which is what
//! inference and the monitoring solvers use.
//!
//! Sparsity lives outside the tensor type: graph structure enters through
//! constant [`SparseMatrix`] operators and [`RowSegments`] that describe
//! stacked per-neighbourhood blocks.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use ndarray::{Array2, Axis};
use rand::Rng;

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Tensor {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Tensor {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

/// Partition of the rows of a stacked matrix into consecutive segments.
///
/// Segment `s` owns rows `offsets[s]..offsets[s + 1]` and `width` companion
/// rows `s * width .. (s + 1) * width` in the matching centroid matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct RowSegments {
    offsets: Vec<usize>,
    row_segment: Vec<usize>,
    width: usize,
}

impl RowSegments {
    pub fn from_sizes(sizes: &[usize], width: usize) -> Self {
        let mut offsets = Vec::with_capacity(sizes.len() + 1);
        let mut row_segment = Vec::with_capacity(sizes.iter().sum());
        offsets.push(0);
        for (s, &len) in sizes.iter().enumerate() {
            row_segment.extend(std::iter::repeat_n(s, len));
            offsets.push(offsets[s] + len);
        }
        Self {
            offsets,
            row_segment,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total_rows(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn range(&self, s: usize) -> std::ops::Range<usize> {
        self.offsets[s]..self.offsets[s + 1]
    }

    pub fn segment_of(&self, row: usize) -> usize {
        self.row_segment[row]
    }
}

/// Constant sparse operator in CSR form; keeps its transpose for backward.
#[derive(Clone, Debug)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    forward: Csr,
    transposed: Csr,
}

#[derive(Clone, Debug)]
struct Csr {
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl Csr {
    fn from_triplets(rows: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; rows + 1];
        for &(r, _, _) in triplets {
            counts[r + 1] += 1;
        }
        for r in 0..rows {
            counts[r + 1] += counts[r];
        }
        let mut next = counts.clone();
        let mut indices = vec![0; triplets.len()];
        let mut values = vec![0.0; triplets.len()];
        for &(r, c, v) in triplets {
            indices[next[r]] = c;
            values[next[r]] = v;
            next[r] += 1;
        }
        Csr {
            indptr: counts,
            indices,
            values,
        }
    }

    fn apply(&self, rows: usize, x: &Matrix) -> Matrix {
        let d = x.ncols();
        let mut out = Matrix::zeros((rows, d));
        let xs = x.as_slice().expect("standard layout");
        let os = out.as_slice_mut().expect("standard layout");
        for r in 0..rows {
            let dst = &mut os[r * d..(r + 1) * d];
            for k in self.indptr[r]..self.indptr[r + 1] {
                let c = self.indices[k];
                let w = self.values[k];
                let src = &xs[c * d..(c + 1) * d];
                for (o, s) in dst.iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
        out
    }
}

impl SparseMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed on use.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        for &(r, c, _) in triplets {
            if r >= rows {
                return Err(Error::IndexOutOfRange { index: r, len: rows });
            }
            if c >= cols {
                return Err(Error::IndexOutOfRange { index: c, len: cols });
            }
        }
        let flipped: Vec<_> = triplets.iter().map(|&(r, c, v)| (c, r, v)).collect();
        Ok(Self {
            rows,
            cols,
            forward: Csr::from_triplets(rows, triplets),
            transposed: Csr::from_triplets(cols, &flipped),
        })
    }

    /// Row selection matrix: output row `k` equals input row `index[k]`.
    pub fn gather(index: &[usize], n: usize) -> Result<Self> {
        let t: Vec<_> = index.iter().enumerate().map(|(k, &i)| (k, i, 1.0)).collect();
        Self::from_triplets(index.len(), n, &t)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn nnz(&self) -> usize {
        self.forward.values.len()
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        self.forward.apply(self.rows, x)
    }

    pub fn apply_transposed(&self, x: &Matrix) -> Matrix {
        self.transposed.apply(self.cols, x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Exp,
    Log,
    Tanh,
    Relu,
    Neg,
}

enum Op {
    Leaf,
    MatMul(Tensor, Tensor),
    Transpose(Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Hadamard(Tensor, Tensor),
    AddRow(Tensor, Tensor),
    ScaleRows(Tensor, Rc<Vec<f64>>),
    MulScalar(Tensor, Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    Unary(Tensor, Unary),
    Powf(Tensor, f64),
    ClampMin(Tensor, f64),
    Sum(Tensor),
    PairwiseSqDist(Tensor, Tensor),
    RowNormalize(Tensor, Rc<Vec<f64>>),
    SegmentColNormalize(Tensor, Arc<RowSegments>, Rc<Vec<f64>>),
    SegmentMaxNormalize(Tensor, Arc<RowSegments>),
    SegmentSqDist(Tensor, Tensor, Arc<RowSegments>),
    SegmentPool(Tensor, Tensor, Arc<RowSegments>),
    SegmentSpread(Tensor, Tensor, Arc<RowSegments>),
    SpMM(Arc<SparseMatrix>, Tensor),
    RowL2Normalize(Tensor),
    BlockMax(Tensor, Rc<Vec<usize>>),
    ContrastRows(Tensor, Rc<Vec<usize>>),
    CrossEntropy(Tensor, Rc<Vec<usize>>, Rc<Vec<usize>>),
    LayerNormRows(Tensor, f64),
}

struct Node {
    value: Rc<Matrix>,
    op: Op,
    requires_grad: bool,
}

/// Recording of tensor operations in evaluation order.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to the `requires_grad` leaves.
#[derive(Debug, Default)]
pub struct GradientMap {
    grads: HashMap<usize, Matrix>,
}

impl GradientMap {
    pub fn get(&self, t: &Tensor) -> Option<&Matrix> {
        self.grads.get(&t.id)
    }

    /// Gradient for `t`, or zeros of its shape if nothing reached it.
    pub fn get_or_zeros(&self, t: &Tensor) -> Matrix {
        self.grads
            .get(&t.id)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(t.shape()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn standard(m: Matrix) -> Matrix {
    if m.is_standard_layout() {
        m
    } else {
        m.as_standard_layout().into_owned()
    }
}

fn check_same(op: &'static str, a: Tensor, b: Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// Tape that only evaluates; nothing on it ever receives a gradient.
    pub fn no_grad() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix, op: Op, requires_grad: bool) -> Tensor {
        let value = standard(value);
        let (rows, cols) = value.dim();
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let (op, requires_grad) = if self.recording && requires_grad {
            (op, true)
        } else {
            (Op::Leaf, false)
        };
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Tensor { id, rows, cols }
    }

    fn needs(&self, ts: &[Tensor]) -> bool {
        let nodes = self.nodes.borrow();
        ts.iter().any(|t| nodes[t.id].requires_grad)
    }

    pub fn value(&self, t: Tensor) -> Rc<Matrix> {
        Rc::clone(&self.nodes.borrow()[t.id].value)
    }

    pub fn scalar(&self, t: Tensor) -> f64 {
        self.nodes.borrow()[t.id].value[[0, 0]]
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes.borrow()[t.id].requires_grad
    }

    pub fn leaf(&self, value: Matrix, requires_grad: bool) -> Tensor {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Matrix) -> Tensor {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Matrix) -> Tensor {
        self.leaf(value, false)
    }

    /// Copy of `t` that gradients do not flow through.
    pub fn detach(&self, t: Tensor) -> Tensor {
        let v = (*self.value(t)).clone();
        self.constant(v)
    }

    pub fn matmul(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if a.cols != b.rows {
            return Err(Error::Shape {
                op: "matmul",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let v = self.value(a).dot(&*self.value(b));
        Ok(self.push(v, Op::MatMul(a, b), self.needs(&[a, b])))
    }

    pub fn transpose(&self, a: Tensor) -> Tensor {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a), self.needs(&[a]))
    }

    pub fn add(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        check_same("add", a, b)?;
        let v = &*self.value(a) + &*self.value(b);
        Ok(self.push(v, Op::Add(a, b), self.needs(&[a, b])))
    }

    pub fn sub(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        check_same("sub", a, b)?;
        let v = &*self.value(a) - &*self.value(b);
        Ok(self.push(v, Op::Sub(a, b), self.needs(&[a, b])))
    }

    pub fn hadamard(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        check_same("hadamard", a, b)?;
        let v = &*self.value(a) * &*self.value(b);
        Ok(self.push(v, Op::Hadamard(a, b), self.needs(&[a, b])))
    }

    /// `a + 1 bᵀ` for a `1×k` row `b` (bias add).
    pub fn add_row(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if b.rows != 1 || b.cols != a.cols {
            return Err(Error::Shape {
                op: "add_row",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let bv = self.value(b);
        let v = &*self.value(a) + &bv.row(0);
        Ok(self.push(v, Op::AddRow(a, b), self.needs(&[a, b])))
    }

    /// Multiplies row `i` by the constant `factors[i]`.
    pub fn scale_rows(&self, a: Tensor, factors: Vec<f64>) -> Result<Tensor> {
        if factors.len() != a.rows {
            return Err(Error::Shape {
                op: "scale_rows",
                lhs: a.shape(),
                rhs: (factors.len(), 1),
            });
        }
        let mut v = (*self.value(a)).clone();
        for (mut row, f) in v.rows_mut().into_iter().zip(&factors) {
            row *= *f;
        }
        Ok(self.push(v, Op::ScaleRows(a, Rc::new(factors)), self.needs(&[a])))
    }

    /// `a` times a `1×1` tensor.
    pub fn mul_scalar(&self, a: Tensor, s: Tensor) -> Result<Tensor> {
        if s.shape() != (1, 1) {
            return Err(Error::Shape {
                op: "mul_scalar",
                lhs: a.shape(),
                rhs: s.shape(),
            });
        }
        let sv = self.scalar(s);
        let v = &*self.value(a) * sv;
        Ok(self.push(v, Op::MulScalar(a, s), self.needs(&[a, s])))
    }

    pub fn scale(&self, a: Tensor, s: f64) -> Tensor {
        let v = &*self.value(a) * s;
        self.push(v, Op::Scale(a, s), self.needs(&[a]))
    }

    pub fn add_scalar(&self, a: Tensor, s: f64) -> Tensor {
        let v = &*self.value(a) + s;
        self.push(v, Op::AddScalar(a), self.needs(&[a]))
    }

    fn unary(&self, a: Tensor, u: Unary) -> Tensor {
        let f: fn(f64) -> f64 = match u {
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Tanh => f64::tanh,
            Unary::Relu => |x| x.max(0.0),
            Unary::Neg => |x| -x,
        };
        let v = self.value(a).mapv(f);
        self.push(v, Op::Unary(a, u), self.needs(&[a]))
    }

    pub fn exp(&self, a: Tensor) -> Tensor {
        self.unary(a, Unary::Exp)
    }

    pub fn tanh(&self, a: Tensor) -> Tensor {
        self.unary(a, Unary::Tanh)
    }

    pub fn relu(&self, a: Tensor) -> Tensor {
        self.unary(a, Unary::Relu)
    }

    pub fn neg(&self, a: Tensor) -> Tensor {
        self.unary(a, Unary::Neg)
    }

    pub fn log(&self, a: Tensor) -> Result<Tensor> {
        if let Some(bad) = self.value(a).iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive entry {bad}"),
            });
        }
        Ok(self.unary(a, Unary::Log))
    }

    /// Entrywise power; `sqrt` is `powf(a, 0.5)`.
    pub fn powf(&self, a: Tensor, p: f64) -> Result<Tensor> {
        if p.fract() != 0.0 && self.value(a).iter().any(|&x| x < 0.0) {
            return Err(Error::Domain {
                op: "powf",
                detail: format!("negative base with fractional exponent {p}"),
            });
        }
        let v = self.value(a).mapv(|x| x.powf(p));
        Ok(self.push(v, Op::Powf(a, p), self.needs(&[a])))
    }

    pub fn clamp_min(&self, a: Tensor, floor: f64) -> Tensor {
        let v = self.value(a).mapv(|x| x.max(floor));
        self.push(v, Op::ClampMin(a, floor), self.needs(&[a]))
    }

    /// Sum of all entries as a `1×1` tensor.
    pub fn sum(&self, a: Tensor) -> Tensor {
        let v = Matrix::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a), self.needs(&[a]))
    }

    /// Squared Euclidean distances between the rows of `z` and `c`.
    pub fn pairwise_sq_dist(&self, z: Tensor, c: Tensor) -> Result<Tensor> {
        if z.cols != c.cols {
            return Err(Error::Shape {
                op: "pairwise_sq_dist",
                lhs: z.shape(),
                rhs: c.shape(),
            });
        }
        let zv = self.value(z);
        let cv = self.value(c);
        let mut v = Matrix::zeros((z.rows, c.rows));
        for (i, zi) in zv.rows().into_iter().enumerate() {
            for (j, cj) in cv.rows().into_iter().enumerate() {
                v[[i, j]] = zi.iter().zip(cj.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            }
        }
        Ok(self.push(v, Op::PairwiseSqDist(z, c), self.needs(&[z, c])))
    }

    /// Scales each row so that it sums to `targets[i]`.
    pub fn row_normalize(&self, t: Tensor, targets: &[f64]) -> Result<Tensor> {
        if targets.len() != t.rows {
            return Err(Error::Shape {
                op: "row_normalize",
                lhs: t.shape(),
                rhs: (targets.len(), 1),
            });
        }
        let mut v = (*self.value(t)).clone();
        for (i, mut row) in v.rows_mut().into_iter().enumerate() {
            let s: f64 = row.sum();
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::Degenerate {
                    op: "row_normalize",
                    detail: format!("row {i} sums to {s}"),
                });
            }
            row *= targets[i] / s;
        }
        Ok(self.push(v, Op::RowNormalize(t, Rc::new(targets.to_vec())), self.needs(&[t])))
    }

    /// Scales each column so that it sums to `targets[j]`.
    pub fn col_normalize(&self, t: Tensor, targets: &[f64]) -> Result<Tensor> {
        if targets.len() != t.cols {
            return Err(Error::Shape {
                op: "col_normalize",
                lhs: t.shape(),
                rhs: (1, targets.len()),
            });
        }
        let seg = Arc::new(RowSegments::from_sizes(&[t.rows], t.cols));
        self.segment_col_normalize(t, &seg, targets)
    }

    /// Column normalisation within each row segment; `targets` has
    /// `segments * cols` entries, segment-major.
    pub fn segment_col_normalize(&self, t: Tensor, seg: &Arc<RowSegments>, targets: &[f64]) -> Result<Tensor> {
        let k = t.cols;
        if seg.total_rows() != t.rows || targets.len() != seg.len() * k {
            return Err(Error::Shape {
                op: "segment_col_normalize",
                lhs: t.shape(),
                rhs: (seg.total_rows(), targets.len()),
            });
        }
        let mut v = (*self.value(t)).clone();
        let sums = segment_col_sums(&v, seg);
        for s in 0..seg.len() {
            for j in 0..k {
                let cs = sums[s * k + j];
                if !(cs > 0.0) || !cs.is_finite() {
                    return Err(Error::Degenerate {
                        op: "col_normalize",
                        detail: format!("segment {s} column {j} sums to {cs}"),
                    });
                }
            }
            for r in seg.range(s) {
                for j in 0..k {
                    v[[r, j]] *= targets[s * k + j] / sums[s * k + j];
                }
            }
        }
        Ok(self.push(
            v,
            Op::SegmentColNormalize(t, Arc::clone(seg), Rc::new(targets.to_vec())),
            self.needs(&[t]),
        ))
    }

    /// Divides every entry of a segment by the segment's largest entry
    /// (segments whose maximum is not positive pass through unchanged).
    pub fn segment_max_normalize(&self, t: Tensor, seg: &Arc<RowSegments>) -> Result<Tensor> {
        if seg.total_rows() != t.rows {
            return Err(Error::Shape {
                op: "segment_max_normalize",
                lhs: t.shape(),
                rhs: (seg.total_rows(), t.cols),
            });
        }
        let mut v = (*self.value(t)).clone();
        for s in 0..seg.len() {
            let r = seg.range(s);
            let m = segment_max(&v, r.clone()).map(|(m, _)| m).unwrap_or(0.0);
            if m > 0.0 {
                v.slice_mut(ndarray::s![r, ..]).mapv_inplace(|x| x / m);
            }
        }
        Ok(self.push(v, Op::SegmentMaxNormalize(t, Arc::clone(seg)), self.needs(&[t])))
    }

    /// Entry `(r, j)` is `‖z_r − c_{s(r)·w + j}‖²` where `s(r)` is the
    /// segment of row `r` and `w` the segment width.
    pub fn segment_sq_dist(&self, z: Tensor, c: Tensor, seg: &Arc<RowSegments>) -> Result<Tensor> {
        let w = seg.width();
        if seg.total_rows() != z.rows || c.rows != seg.len() * w || z.cols != c.cols {
            return Err(Error::Shape {
                op: "segment_sq_dist",
                lhs: z.shape(),
                rhs: c.shape(),
            });
        }
        let zv = self.value(z);
        let cv = self.value(c);
        let d = z.cols;
        let zs = zv.as_slice().unwrap();
        let cs = cv.as_slice().unwrap();
        let mut v = Matrix::zeros((z.rows, w));
        for r in 0..z.rows {
            let s = seg.segment_of(r);
            let zr = &zs[r * d..(r + 1) * d];
            for j in 0..w {
                let cj = &cs[(s * w + j) * d..(s * w + j + 1) * d];
                v[[r, j]] = zr.iter().zip(cj).map(|(a, b)| (a - b) * (a - b)).sum();
            }
        }
        Ok(self.push(v, Op::SegmentSqDist(z, c, Arc::clone(seg)), self.needs(&[z, c])))
    }

    /// Row `s·w + j` of the output is `Σ_{r ∈ s} p_{rj} z_r`.
    pub fn segment_pool(&self, p: Tensor, z: Tensor, seg: &Arc<RowSegments>) -> Result<Tensor> {
        let w = seg.width();
        if seg.total_rows() != p.rows || p.cols != w || z.rows != p.rows {
            return Err(Error::Shape {
                op: "segment_pool",
                lhs: p.shape(),
                rhs: z.shape(),
            });
        }
        let pv = self.value(p);
        let zv = self.value(z);
        let d = z.cols;
        let zs = zv.as_slice().unwrap();
        let mut v = Matrix::zeros((seg.len() * w, d));
        {
            let os = v.as_slice_mut().unwrap();
            for r in 0..p.rows {
                let s = seg.segment_of(r);
                let zr = &zs[r * d..(r + 1) * d];
                for j in 0..w {
                    let pj = pv[[r, j]];
                    let dst = &mut os[(s * w + j) * d..(s * w + j + 1) * d];
                    for (o, x) in dst.iter_mut().zip(zr) {
                        *o += pj * x;
                    }
                }
            }
        }
        Ok(self.push(v, Op::SegmentPool(p, z, Arc::clone(seg)), self.needs(&[p, z])))
    }

    /// Row `r` of the output is `Σ_j p_{rj} c_{s(r)·w + j}`.
    pub fn segment_spread(&self, p: Tensor, c: Tensor, seg: &Arc<RowSegments>) -> Result<Tensor> {
        let w = seg.width();
        if seg.total_rows() != p.rows || p.cols != w || c.rows != seg.len() * w {
            return Err(Error::Shape {
                op: "segment_spread",
                lhs: p.shape(),
                rhs: c.shape(),
            });
        }
        let pv = self.value(p);
        let cv = self.value(c);
        let d = c.cols;
        let cs = cv.as_slice().unwrap();
        let mut v = Matrix::zeros((p.rows, d));
        {
            let os = v.as_slice_mut().unwrap();
            for r in 0..p.rows {
                let s = seg.segment_of(r);
                let dst = &mut os[r * d..(r + 1) * d];
                for j in 0..w {
                    let pj = pv[[r, j]];
                    let src = &cs[(s * w + j) * d..(s * w + j + 1) * d];
                    for (o, x) in dst.iter_mut().zip(src) {
                        *o += pj * x;
                    }
                }
            }
        }
        Ok(self.push(v, Op::SegmentSpread(p, c, Arc::clone(seg)), self.needs(&[p, c])))
    }

    /// Constant sparse operator applied on the left.
    pub fn spmm(&self, a: &Arc<SparseMatrix>, x: Tensor) -> Result<Tensor> {
        if a.cols != x.rows {
            return Err(Error::Shape {
                op: "spmm",
                lhs: a.shape(),
                rhs: x.shape(),
            });
        }
        let v = a.apply(&self.value(x));
        Ok(self.push(v, Op::SpMM(Arc::clone(a), x), self.needs(&[x])))
    }

    /// Rows scaled to unit ℓ₂ norm; rows with norm below `1e-12` map to zero.
    pub fn row_l2_normalize(&self, a: Tensor) -> Tensor {
        let mut v = (*self.value(a)).clone();
        for mut row in v.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n < NORM_GUARD {
                row.fill(0.0);
            } else {
                row /= n;
            }
        }
        self.push(v, Op::RowL2Normalize(a), self.needs(&[a]))
    }

    /// Maximum over consecutive column blocks of width `block`.
    pub fn block_max(&self, a: Tensor, block: usize) -> Result<Tensor> {
        if block == 0 || !a.cols.is_multiple_of(block) {
            return Err(Error::InvalidArgument(format!(
                "block width {block} does not divide {} columns",
                a.cols
            )));
        }
        let nb = a.cols / block;
        let av = self.value(a);
        let mut v = Matrix::zeros((a.rows, nb));
        let mut arg = Vec::with_capacity(a.rows * nb);
        for i in 0..a.rows {
            for b in 0..nb {
                let mut best = b * block;
                for j in b * block..(b + 1) * block {
                    if av[[i, j]] > av[[i, best]] {
                        best = j;
                    }
                }
                v[[i, b]] = av[[i, best]];
                arg.push(best);
            }
        }
        Ok(self.push(v, Op::BlockMax(a, Rc::new(arg)), self.needs(&[a])))
    }

    /// Per row: `s_{i,τ} + log Σ_{τ'≠τ} exp(−s_{i,τ'})` with `τ = labels[i]`.
    pub fn contrast_rows(&self, s: Tensor, labels: &[usize]) -> Result<Tensor> {
        if labels.len() != s.rows {
            return Err(Error::Shape {
                op: "contrast_rows",
                lhs: s.shape(),
                rhs: (labels.len(), 1),
            });
        }
        if s.cols < 2 {
            return Err(Error::InvalidArgument("contrast over fewer than two classes".into()));
        }
        let sv = self.value(s);
        let mut v = Matrix::zeros((s.rows, 1));
        for (i, &tau) in labels.iter().enumerate() {
            if tau >= s.cols {
                return Err(Error::IndexOutOfRange {
                    index: tau,
                    len: s.cols,
                });
            }
            let (lse, _) = neg_lse_excluding(sv.row(i).as_slice().unwrap(), tau);
            v[[i, 0]] = sv[[i, tau]] + lse;
        }
        Ok(self.push(v, Op::ContrastRows(s, Rc::new(labels.to_vec())), self.needs(&[s])))
    }

    /// Mean over `rows` of `−log softmax(logits_i)[labels_i]`.
    pub fn cross_entropy(&self, logits: Tensor, labels: &[usize], rows: &[usize]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("cross_entropy over an empty mask".into()));
        }
        if labels.len() != rows.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: (rows.len(), 1),
                rhs: (labels.len(), 1),
            });
        }
        let lv = self.value(logits);
        let mut total = 0.0;
        for (&r, &y) in rows.iter().zip(labels) {
            if r >= logits.rows {
                return Err(Error::IndexOutOfRange {
                    index: r,
                    len: logits.rows,
                });
            }
            if y >= logits.cols {
                return Err(Error::IndexOutOfRange {
                    index: y,
                    len: logits.cols,
                });
            }
            let row = lv.row(r);
            total += log_sum_exp(row.as_slice().unwrap()) - row[y];
        }
        let v = Matrix::from_elem((1, 1), total / rows.len() as f64);
        Ok(self.push(
            v,
            Op::CrossEntropy(logits, Rc::new(labels.to_vec()), Rc::new(rows.to_vec())),
            self.needs(&[logits]),
        ))
    }

    /// Row-wise standardisation without affine parameters.
    pub fn layer_norm_rows(&self, a: Tensor, eps: f64) -> Tensor {
        let mut v = (*self.value(a)).clone();
        for mut row in v.rows_mut() {
            let (mu, sigma) = row_stats(row.as_slice().unwrap(), eps);
            row.mapv_inplace(|x| (x - mu) / sigma);
        }
        self.push(v, Op::LayerNormRows(a, eps), self.needs(&[a]))
    }

    /// Inverted dropout: a recorded multiply by a random 0/(1−p)⁻¹ mask.
    pub fn dropout<R: Rng + ?Sized>(&self, a: Tensor, rate: f64, rng: &mut R) -> Result<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate}")));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask = Matrix::from_shape_fn(a.shape(), |_| if rng.random::<f64>() < rate { 0.0 } else { keep });
        let m = self.constant(mask);
        self.hadamard(a, m)
    }

    /// Reverse pass from a `1×1` tensor.
    pub fn backward(&self, loss: Tensor) -> Result<GradientMap> {
        if loss.shape() != (1, 1) {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar, got {:?}",
                loss.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(loss.id + 1);
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(Matrix::ones((1, 1)));
        let mut out = GradientMap::default();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                out.grads.insert(id, g);
                continue;
            }
            let val = |t: Tensor| Rc::clone(&nodes[t.id].value);
            let wants = |t: Tensor| nodes[t.id].requires_grad;
            let mut acc = |t: Tensor, d: Matrix| {
                if !nodes[t.id].requires_grad {
                    return;
                }
                let d = standard(d);
                match &mut grads[t.id] {
                    Some(e) => *e += &d,
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if wants(*a) {
                        acc(*a, g.dot(&val(*b).t()));
                    }
                    if wants(*b) {
                        acc(*b, val(*a).t().dot(&g));
                    }
                }
                Op::Transpose(a) => acc(*a, g.t().to_owned()),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, -g);
                }
                Op::Hadamard(a, b) => {
                    if wants(*a) {
                        acc(*a, &g * &*val(*b));
                    }
                    if wants(*b) {
                        acc(*b, &g * &*val(*a));
                    }
                }
                Op::AddRow(a, b) => {
                    if wants(*b) {
                        acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    acc(*a, g);
                }
                Op::ScaleRows(a, f) => {
                    let mut d = g;
                    for (mut row, fi) in d.rows_mut().into_iter().zip(f.iter()) {
                        row *= *fi;
                    }
                    acc(*a, d);
                }
                Op::MulScalar(a, s) => {
                    if wants(*s) {
                        let ds = (&g * &*val(*a)).sum();
                        acc(*s, Matrix::from_elem((1, 1), ds));
                    }
                    if wants(*a) {
                        let sv = val(*s)[[0, 0]];
                        acc(*a, g * sv);
                    }
                }
                Op::Scale(a, s) => acc(*a, g * *s),
                Op::AddScalar(a) => acc(*a, g),
                Op::Unary(a, u) => {
                    let d = match u {
                        Unary::Exp => &g * &*node.value,
                        Unary::Log => &g / &*val(*a),
                        Unary::Tanh => &g * &node.value.mapv(|y| 1.0 - y * y),
                        Unary::Relu => &g * &val(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }),
                        Unary::Neg => -g,
                    };
                    acc(*a, d);
                }
                Op::Powf(a, p) => {
                    let d = &g * &val(*a).mapv(|x| p * x.powf(p - 1.0));
                    acc(*a, d);
                }
                Op::ClampMin(a, floor) => {
                    let d = &g * &val(*a).mapv(|x| if x > *floor { 1.0 } else { 0.0 });
                    acc(*a, d);
                }
                Op::Sum(a) => acc(*a, Matrix::from_elem(a.shape(), g[[0, 0]])),
                Op::PairwiseSqDist(z, c) => {
                    let zv = val(*z);
                    let cv = val(*c);
                    if wants(*z) {
                        let rs = g.sum_axis(Axis(1));
                        let mut dz = g.dot(&*cv) * -2.0;
                        for (i, mut row) in dz.rows_mut().into_iter().enumerate() {
                            row.scaled_add(2.0 * rs[i], &zv.row(i));
                        }
                        acc(*z, dz);
                    }
                    if wants(*c) {
                        let cs = g.sum_axis(Axis(0));
                        let mut dc = g.t().dot(&*zv) * -2.0;
                        for (j, mut row) in dc.rows_mut().into_iter().enumerate() {
                            row.scaled_add(2.0 * cs[j], &cv.row(j));
                        }
                        acc(*c, dc);
                    }
                }
                Op::RowNormalize(t, targets) => {
                    let tv = val(*t);
                    let y = &node.value;
                    let mut d = Matrix::zeros(t.shape());
                    for i in 0..t.rows {
                        let s: f64 = tv.row(i).sum();
                        let q: f64 = g.row(i).dot(&y.row(i));
                        for j in 0..t.cols {
                            d[[i, j]] = (targets[i] * g[[i, j]] - q) / s;
                        }
                    }
                    acc(*t, d);
                }
                Op::SegmentColNormalize(t, seg, targets) => {
                    let tv = val(*t);
                    let y = &node.value;
                    let k = t.cols;
                    let sums = segment_col_sums(&tv, seg);
                    let mut q = vec![0.0; seg.len() * k];
                    for r in 0..t.rows {
                        let s = seg.segment_of(r);
                        for j in 0..k {
                            q[s * k + j] += g[[r, j]] * y[[r, j]];
                        }
                    }
                    let mut d = Matrix::zeros(t.shape());
                    for r in 0..t.rows {
                        let s = seg.segment_of(r);
                        for j in 0..k {
                            let idx = s * k + j;
                            d[[r, j]] = (targets[idx] * g[[r, j]] - q[idx]) / sums[idx];
                        }
                    }
                    acc(*t, d);
                }
                Op::SegmentMaxNormalize(t, seg) => {
                    let tv = val(*t);
                    let mut d = g.clone();
                    let k = t.cols;
                    for s in 0..seg.len() {
                        let r = seg.range(s);
                        let Some((m, (ar, ac))) = segment_max(&tv, r.clone()) else {
                            continue;
                        };
                        if m <= 0.0 {
                            continue;
                        }
                        let mut gt = 0.0;
                        for i in r.clone() {
                            for j in 0..k {
                                gt += g[[i, j]] * tv[[i, j]];
                                d[[i, j]] /= m;
                            }
                        }
                        d[[ar, ac]] -= gt / (m * m);
                    }
                    acc(*t, d);
                }
                Op::SegmentSqDist(z, c, seg) => {
                    let zv = val(*z);
                    let cv = val(*c);
                    let w = seg.width();
                    let dim = z.cols;
                    let mut dz = Matrix::zeros(z.shape());
                    let mut dc = Matrix::zeros(c.shape());
                    for r in 0..z.rows {
                        let s = seg.segment_of(r);
                        for j in 0..w {
                            let gj = 2.0 * g[[r, j]];
                            if gj == 0.0 {
                                continue;
                            }
                            let cr = s * w + j;
                            for l in 0..dim {
                                let diff = zv[[r, l]] - cv[[cr, l]];
                                dz[[r, l]] += gj * diff;
                                dc[[cr, l]] -= gj * diff;
                            }
                        }
                    }
                    if wants(*z) {
                        acc(*z, dz);
                    }
                    if wants(*c) {
                        acc(*c, dc);
                    }
                }
                Op::SegmentPool(p, z, seg) => {
                    let pv = val(*p);
                    let zv = val(*z);
                    let w = seg.width();
                    let mut dp = Matrix::zeros(p.shape());
                    let mut dz = Matrix::zeros(z.shape());
                    for r in 0..p.rows {
                        let s = seg.segment_of(r);
                        for j in 0..w {
                            let gr = g.row(s * w + j);
                            dp[[r, j]] = gr.dot(&zv.row(r));
                            dz.row_mut(r).scaled_add(pv[[r, j]], &gr);
                        }
                    }
                    if wants(*p) {
                        acc(*p, dp);
                    }
                    if wants(*z) {
                        acc(*z, dz);
                    }
                }
                Op::SegmentSpread(p, c, seg) => {
                    let pv = val(*p);
                    let cv = val(*c);
                    let w = seg.width();
                    let mut dp = Matrix::zeros(p.shape());
                    let mut dc = Matrix::zeros(c.shape());
                    for r in 0..p.rows {
                        let s = seg.segment_of(r);
                        let gr = g.row(r);
                        for j in 0..w {
                            dp[[r, j]] = gr.dot(&cv.row(s * w + j));
                            dc.row_mut(s * w + j).scaled_add(pv[[r, j]], &gr);
                        }
                    }
                    if wants(*p) {
                        acc(*p, dp);
                    }
                    if wants(*c) {
                        acc(*c, dc);
                    }
                }
                Op::SpMM(a, x) => acc(*x, a.apply_transposed(&g)),
                Op::RowL2Normalize(a) => {
                    let av = val(*a);
                    let y = &node.value;
                    let mut d = Matrix::zeros(a.shape());
                    for i in 0..a.rows {
                        let n = av.row(i).dot(&av.row(i)).sqrt();
                        if n < NORM_GUARD {
                            continue;
                        }
                        let yg = y.row(i).dot(&g.row(i));
                        for j in 0..a.cols {
                            d[[i, j]] = (g[[i, j]] - y[[i, j]] * yg) / n;
                        }
                    }
                    acc(*a, d);
                }
                Op::BlockMax(a, arg) => {
                    let nb = node.value.ncols();
                    let mut d = Matrix::zeros(a.shape());
                    for i in 0..a.rows {
                        for b in 0..nb {
                            d[[i, arg[i * nb + b]]] += g[[i, b]];
                        }
                    }
                    acc(*a, d);
                }
                Op::ContrastRows(s, labels) => {
                    let sv = val(*s);
                    let mut d = Matrix::zeros(s.shape());
                    for (i, &tau) in labels.iter().enumerate() {
                        let gi = g[[i, 0]];
                        let (_, weights) = neg_lse_excluding(sv.row(i).as_slice().unwrap(), tau);
                        d[[i, tau]] += gi;
                        for (j, wj) in weights.iter().enumerate() {
                            if j != tau {
                                d[[i, j]] -= gi * wj;
                            }
                        }
                    }
                    acc(*s, d);
                }
                Op::CrossEntropy(logits, labels, rows) => {
                    let lv = val(*logits);
                    let scale = g[[0, 0]] / rows.len() as f64;
                    let mut d = Matrix::zeros(logits.shape());
                    for (&r, &y) in rows.iter().zip(labels.iter()) {
                        let row = lv.row(r);
                        let lse = log_sum_exp(row.as_slice().unwrap());
                        for j in 0..logits.cols {
                            d[[r, j]] += scale * (row[j] - lse).exp();
                        }
                        d[[r, y]] -= scale;
                    }
                    acc(*logits, d);
                }
                Op::LayerNormRows(a, eps) => {
                    let av = val(*a);
                    let y = &node.value;
                    let k = a.cols as f64;
                    let mut d = Matrix::zeros(a.shape());
                    for i in 0..a.rows {
                        let (_, sigma) = row_stats(av.row(i).as_slice().unwrap(), *eps);
                        let gm = g.row(i).sum() / k;
                        let gy = g.row(i).dot(&y.row(i)) / k;
                        for j in 0..a.cols {
                            d[[i, j]] = (g[[i, j]] - gm - y[[i, j]] * gy) / sigma;
                        }
                    }
                    acc(*a, d);
                }
            }
        }
        Ok(out)
    }
}

const NORM_GUARD: f64 = 1e-12;

fn segment_col_sums(v: &Matrix, seg: &RowSegments) -> Vec<f64> {
    let k = v.ncols();
    let mut sums = vec![0.0; seg.len() * k];
    for r in 0..v.nrows() {
        let s = seg.segment_of(r);
        for j in 0..k {
            sums[s * k + j] += v[[r, j]];
        }
    }
    sums
}

fn segment_max(v: &Matrix, rows: std::ops::Range<usize>) -> Option<(f64, (usize, usize))> {
    let mut best: Option<(f64, (usize, usize))> = None;
    for i in rows {
        for j in 0..v.ncols() {
            let x = v[[i, j]];
            if best.is_none_or(|(b, _)| x > b) {
                best = Some((x, (i, j)));
            }
        }
    }
    best
}

/// Numerically stable `log Σ exp(x)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `log Σ_{j≠skip} exp(−x_j)` and the matching softmax weights (zero at `skip`).
fn neg_lse_excluding(xs: &[f64], skip: usize) -> (f64, Vec<f64>) {
    let m = xs
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != skip)
        .map(|(_, &x)| -x)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = xs
        .iter()
        .enumerate()
        .map(|(j, &x)| if j == skip { 0.0 } else { (-x - m).exp() })
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    (m + total.ln(), w)
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let k = row.len() as f64;
    let mu = row.iter().sum::<f64>() / k;
    let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / k;
    (mu, (var + eps).sqrt())
}

/// Central-difference gradient of a scalar function of a matrix.
pub fn finite_diff_grad<F>(f: F, x: &Matrix, h: f64) -> Result<Matrix>
where
    F: Fn(&Matrix) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step {h} must be positive")));
    }
    let mut grad = Matrix::zeros(x.dim());
    let mut probe = x.clone();
    for idx in ndarray::indices(x.dim()) {
        let orig = probe[idx];
        probe[idx] = orig + h;
        let up = f(&probe)?;
        probe[idx] = orig - h;
        let down = f(&probe)?;
        probe[idx] = orig;
        grad[idx] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Largest entrywise relative error `|a−b| / max(|a|, |b|, floor)`.
pub fn max_rel_error(a: &Matrix, b: &Matrix, floor: f64) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
