//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Tape`] records every operation as it is evaluated. Forward values are
//! produced by the same [`Mat`] kernels used by non-differentiated code, so a
//! taped evaluation is bit-identical to an untaped one. Calling
//! [`Tape::backward`] on a scalar node replays the tape in reverse and
//! accumulates gradients for every node that transitively depends on a
//! [`Tape::param`] leaf. Constants never receive gradients.

use std::sync::Arc;

use crate::tensor::{Mat, SparseMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Silu(Var),
    Exp(Var),
    Square(Var),
    SoftmaxRows(Var),
    LseRows(Var),
    LseCols(Var),
    SumAll(Var),
    ColSlice(Var, usize),
    Concat(Vec<Var>),
    Im2Col3 { x: Var, h: usize, w: usize },
    AvgPool2 { x: Var, h: usize, w: usize },
    Upsample2 { x: Var, h: usize, w: usize },
    Sparse(Var, Arc<SparseMap>),
    Reshape(Var),
    MinMax {
        x: Var,
        argmin: usize,
        argmax: usize,
        range: f64,
    },
    Clamp { x: Var, lo: f64, hi: f64 },
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Mat::zeros(shape.0, shape.1))
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Leaf => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        self.push(v, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b), &[a, b])
    }

    /// Broadcasts a `1 × cols` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a).add_row(self.value(row));
        self.push(v, Op::AddRow(a, row), &[a, row])
    }

    /// Broadcasts a `rows × 1` column over every column of `a`.
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let v = self.value(a).add_col(self.value(col));
        self.push(v, Op::AddCol(a, col), &[a, col])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::Offset(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).softmax_rows();
        self.push(v, Op::SoftmaxRows(a), &[a])
    }

    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).logsumexp_rows();
        self.push(v, Op::LseRows(a), &[a])
    }

    pub fn logsumexp_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).logsumexp_cols();
        self.push(v, Op::LseCols(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a), &[a])
    }

    pub fn col_slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).col_slice(start, len);
        self.push(v, Op::ColSlice(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Mat::concat_cols(&mats);
        self.push(v, Op::Concat(parts.to_vec()), parts)
    }

    /// Gathers zero-padded 3×3 neighbourhoods of an `(h·w) × c` feature map
    /// into an `(h·w) × 9c` patch matrix, tap-major.
    pub fn im2col3(&mut self, x: Var, h: usize, w: usize) -> Var {
        let v = im2col3(self.value(x), h, w);
        self.push(v, Op::Im2Col3 { x, h, w }, &[x])
    }

    pub fn avg_pool2(&mut self, x: Var, h: usize, w: usize) -> Var {
        let v = avg_pool2(self.value(x), h, w);
        self.push(v, Op::AvgPool2 { x, h, w }, &[x])
    }

    pub fn upsample2(&mut self, x: Var, h: usize, w: usize) -> Var {
        let v = upsample2(self.value(x), h, w);
        self.push(v, Op::Upsample2 { x, h, w }, &[x])
    }

    pub fn sparse(&mut self, x: Var, map: Arc<SparseMap>) -> Var {
        let v = map.apply(self.value(x));
        self.push(v, Op::Sparse(x, map), &[x])
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(x).clone().reshaped(rows, cols);
        self.push(v, Op::Reshape(x), &[x])
    }

    /// Min-max rescaling to `[0, 1]`. A constant input maps to all `0.5` and
    /// is cut from the graph; the returned flag reports that case.
    pub fn min_max(&mut self, x: Var) -> (Var, bool) {
        let value = self.value(x);
        let (mut argmin, mut argmax) = (0, 0);
        for (i, &v) in value.data().iter().enumerate() {
            if v < value.data()[argmin] {
                argmin = i;
            }
            if v > value.data()[argmax] {
                argmax = i;
            }
        }
        let (lo, hi) = (value.data()[argmin], value.data()[argmax]);
        let range = hi - lo;
        if !(range > 0.0) || !range.is_finite() {
            let v = Mat::filled(value.rows(), value.cols(), 0.5);
            return (self.constant(v), true);
        }
        let v = value.map(|m| (m - lo) / range);
        let var = self.push(
            v,
            Op::MinMax {
                x,
                argmin,
                argmax,
                range,
            },
            &[x],
        );
        (var, false)
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(x).map(|m| m.clamp(lo, hi));
        self.push(v, Op::Clamp { x, lo, hi }, &[x])
    }

    /// Reverse pass from a `1 × 1` root.
    pub fn backward(&self, root: Var) -> Grads {
        let (r, c) = self.value(root).shape();
        self.backward_with(root, Mat::filled(r, c, 1.0))
    }

    /// Reverse pass seeded with an explicit cotangent for `root`.
    pub fn backward_with(&self, root: Var, seed: Mat) -> Grads {
        assert_eq!(self.value(root).shape(), seed.shape(), "seed shape");
        let mut grads: Vec<Option<Mat>> = vec![None; root.0 + 1];
        if !self.nodes[root.0].needs_grad && !matches!(self.nodes[root.0].op, Op::Leaf) {
            return Grads { grads };
        }
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    self.accumulate(grads, *a, g.matmul_nt(val(*b)));
                }
                if wants(*b) {
                    self.accumulate(grads, *b, val(*a).matmul_tn(g));
                }
            }
            Op::MatMulNt(a, b) => {
                if wants(*a) {
                    self.accumulate(grads, *a, g.matmul(val(*b)));
                }
                if wants(*b) {
                    self.accumulate(grads, *b, g.matmul_tn(val(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(val(*b), |x, y| x * y));
                }
                if wants(*b) {
                    self.accumulate(grads, *b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                if wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(val(*b), |x, y| x / y));
                }
                if wants(*b) {
                    let gb = g
                        .zip_map(&node.value, |x, q| x * q)
                        .zip_map(val(*b), |x, y| -x / y);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if wants(*row) {
                    self.accumulate(grads, *row, g.col_sums());
                }
            }
            Op::AddCol(a, col) => {
                self.accumulate(grads, *a, g.clone());
                if wants(*col) {
                    self.accumulate(grads, *col, g.row_sums());
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::Offset(a) | Op::Reshape(a) => {
                let (r, c) = val(*a).shape();
                self.accumulate(grads, *a, g.clone().reshaped(r, c));
            }
            Op::Silu(a) => {
                let ga = g.zip_map(val(*a), |gy, x| {
                    let s = sigmoid(x);
                    gy * s * (1.0 + x * (1.0 - s))
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(&node.value, |x, y| x * y)),
            Op::Square(a) => {
                self.accumulate(grads, *a, g.zip_map(val(*a), |x, y| 2.0 * x * y))
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for c in 0..y.cols() {
                        ga.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LseRows(a) => {
                let x = val(*a);
                let ga = Mat::from_fn(x.rows(), x.cols(), |r, c| {
                    g.get(r, 0) * (x.get(r, c) - node.value.get(r, 0)).exp()
                });
                self.accumulate(grads, *a, ga);
            }
            Op::LseCols(a) => {
                let x = val(*a);
                let ga = Mat::from_fn(x.rows(), x.cols(), |r, c| {
                    g.get(0, c) * (x.get(r, c) - node.value.get(0, c)).exp()
                });
                self.accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let (r, c) = val(*a).shape();
                self.accumulate(grads, *a, Mat::filled(r, c, g.item()));
            }
            Op::ColSlice(a, start) => {
                let (r, c) = val(*a).shape();
                let mut ga = Mat::zeros(r, c);
                for row in 0..r {
                    for (j, &x) in g.row(row).iter().enumerate() {
                        ga.set(row, start + j, x);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let width = val(p).cols();
                    if wants(p) {
                        self.accumulate(grads, p, g.col_slice(start, width));
                    }
                    start += width;
                }
            }
            Op::Im2Col3 { x, h, w } => {
                let ga = im2col3_adjoint(g, *h, *w, val(*x).cols());
                self.accumulate(grads, *x, ga);
            }
            Op::AvgPool2 { x, h, w } => {
                let ga = avg_pool2_adjoint(g, *h, *w);
                self.accumulate(grads, *x, ga);
            }
            Op::Upsample2 { x, h, w } => {
                let ga = upsample2_adjoint(g, *h, *w);
                self.accumulate(grads, *x, ga);
            }
            Op::Sparse(x, map) => self.accumulate(grads, *x, map.apply_transpose(g)),
            Op::MinMax {
                x,
                argmin,
                argmax,
                range,
            } => {
                let out = &node.value;
                let mut ga = g.scale(1.0 / range);
                let mut to_min = 0.0;
                let mut to_max = 0.0;
                for (&gi, &oi) in g.data().iter().zip(out.data()) {
                    to_min += gi * (oi - 1.0) / range;
                    to_max -= gi * oi / range;
                }
                ga.data_mut()[*argmin] += to_min;
                ga.data_mut()[*argmax] += to_max;
                self.accumulate(grads, *x, ga);
            }
            Op::Clamp { x, lo, hi } => {
                let ga = g.zip_map(val(*x), |gy, v| if v >= *lo && v <= *hi { gy } else { 0.0 });
                self.accumulate(grads, *x, ga);
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const TAPS: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

fn im2col3(x: &Mat, h: usize, w: usize) -> Mat {
    let c = x.cols();
    assert_eq!(x.rows(), h * w, "im2col input rows");
    let mut out = Mat::zeros(h * w, 9 * c);
    let od = out.data_mut();
    for y in 0..h {
        for xx in 0..w {
            let base = (y * w + xx) * 9 * c;
            for (k, (dy, dx)) in TAPS.iter().enumerate() {
                let (sy, sx) = (y as isize + dy, xx as isize + dx);
                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                    continue;
                }
                let src = (sy as usize * w + sx as usize) * c;
                od[base + k * c..base + (k + 1) * c].copy_from_slice(&x.data()[src..src + c]);
            }
        }
    }
    out
}

fn im2col3_adjoint(g: &Mat, h: usize, w: usize, c: usize) -> Mat {
    let mut out = Mat::zeros(h * w, c);
    let od = out.data_mut();
    for y in 0..h {
        for xx in 0..w {
            let base = (y * w + xx) * 9 * c;
            for (k, (dy, dx)) in TAPS.iter().enumerate() {
                let (sy, sx) = (y as isize + dy, xx as isize + dx);
                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                    continue;
                }
                let dst = (sy as usize * w + sx as usize) * c;
                for j in 0..c {
                    od[dst + j] += g.data()[base + k * c + j];
                }
            }
        }
    }
    out
}

fn avg_pool2(x: &Mat, h: usize, w: usize) -> Mat {
    let c = x.cols();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Mat::zeros(oh * ow, c);
    for y in 0..oh {
        for xx in 0..ow {
            for j in 0..c {
                let s = x.get((2 * y) * w + 2 * xx, j)
                    + x.get((2 * y) * w + 2 * xx + 1, j)
                    + x.get((2 * y + 1) * w + 2 * xx, j)
                    + x.get((2 * y + 1) * w + 2 * xx + 1, j);
                out.set(y * ow + xx, j, 0.25 * s);
            }
        }
    }
    out
}

fn avg_pool2_adjoint(g: &Mat, h: usize, w: usize) -> Mat {
    let c = g.cols();
    let ow = w / 2;
    Mat::from_fn(h * w, c, |r, j| {
        let (y, xx) = (r / w, r % w);
        0.25 * g.get((y / 2) * ow + xx / 2, j)
    })
}

/// Nearest-neighbour 2× upsampling of an `(h·w) × c` map.
fn upsample2(x: &Mat, h: usize, w: usize) -> Mat {
    let c = x.cols();
    let ow = 2 * w;
    Mat::from_fn(4 * h * w, c, |r, j| {
        let (y, xx) = (r / ow, r % ow);
        x.get((y / 2) * w + xx / 2, j)
    })
}

fn upsample2_adjoint(g: &Mat, h: usize, w: usize) -> Mat {
    let c = g.cols();
    let ow = 2 * w;
    let mut out = Mat::zeros(h * w, c);
    for r in 0..g.rows() {
        let (y, xx) = (r / ow, r % ow);
        let dst = (y / 2) * w + xx / 2;
        for j in 0..c {
            let v = out.get(dst, j) + g.get(r, j);
            out.set(dst, j, v);
        }
    }
    out
}
