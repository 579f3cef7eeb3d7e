//! Dense row-major `f64` matrices.
//!
//! Every activation in the toy denoiser is a `pixels × channels` matrix, so a
//! two-dimensional container is all the network and the autodiff tape need.
//! Spatial maps are stored as `(height·width) × 1` columns, row-major over
//! pixels.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Mat {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            rows * cols,
            data.len(),
            "matrix {rows}x{cols} needs {} values",
            rows * cols
        );
        Mat { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn scalar(value: f64) -> Self {
        Mat::from_vec(1, 1, vec![value])
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// First (and for scalars, only) element.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshaped(mut self, rows: usize, cols: usize) -> Mat {
        assert_eq!(rows * cols, self.data.len());
        self.rows = rows;
        self.cols = cols;
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        assert_eq!(self.shape(), other.shape(), "elementwise shape mismatch");
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.shape(), other.shape(), "elementwise shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f64) -> Mat {
        self.map(|x| x * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul inner dimension mismatch");
        let (n, m) = (self.rows, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Mat::from_vec(n, m, out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "matmul_nt inner dimension mismatch");
        let (n, m) = (self.rows, other.rows);
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let a = self.row(i);
            for j in 0..m {
                out.push(a.iter().zip(other.row(j)).map(|(x, y)| x * y).sum());
            }
        }
        Mat::from_vec(n, m, out)
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "matmul_tn inner dimension mismatch");
        let (n, m) = (self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for k in 0..self.rows {
            let b = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &bv) in out[i * m..(i + 1) * m].iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Mat::from_vec(n, m, out)
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn col_slice(&self, start: usize, len: usize) -> Mat {
        assert!(start + len <= self.cols, "column slice out of range");
        let mut data = Vec::with_capacity(self.rows * len);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + len]);
        }
        Mat::from_vec(self.rows, len, data)
    }

    pub fn concat_cols(parts: &[&Mat]) -> Mat {
        let rows = parts[0].rows;
        assert!(parts.iter().all(|p| p.rows == rows), "concat row mismatch");
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Mat::from_vec(rows, cols, data)
    }

    /// Row-wise softmax, max-shifted.
    pub fn softmax_rows(&self) -> Mat {
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = &mut out.data[r * self.cols..(r + 1) * self.cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        out
    }

    /// `rows × 1` log-sum-exp of each row.
    pub fn logsumexp_rows(&self) -> Mat {
        let data = (0..self.rows).map(|r| logsumexp(self.row(r))).collect();
        Mat::from_vec(self.rows, 1, data)
    }

    /// `1 × cols` log-sum-exp down each column.
    pub fn logsumexp_cols(&self) -> Mat {
        let mut maxes = vec![f64::NEG_INFINITY; self.cols];
        for r in 0..self.rows {
            for (m, &x) in maxes.iter_mut().zip(self.row(r)) {
                *m = m.max(x);
            }
        }
        let mut sums = vec![0.0; self.cols];
        for r in 0..self.rows {
            for ((s, &x), &m) in sums.iter_mut().zip(self.row(r)).zip(&maxes) {
                *s += (x - m).exp();
            }
        }
        let data = sums
            .iter()
            .zip(&maxes)
            .map(|(s, m)| if m.is_finite() { m + s.ln() } else { *m })
            .collect();
        Mat::from_vec(1, self.cols, data)
    }

    pub fn col_sums(&self) -> Mat {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, &x) in out.iter_mut().zip(self.row(r)) {
                *o += x;
            }
        }
        Mat::from_vec(1, self.cols, out)
    }

    pub fn row_sums(&self) -> Mat {
        let data = (0..self.rows).map(|r| self.row(r).iter().sum()).collect();
        Mat::from_vec(self.rows, 1, data)
    }

    /// Adds a `1 × cols` row to every row.
    pub fn add_row(&self, row: &Mat) -> Mat {
        assert_eq!((1, self.cols), row.shape(), "row broadcast mismatch");
        let mut out = self.clone();
        for r in 0..self.rows {
            for (o, &b) in out.data[r * self.cols..(r + 1) * self.cols]
                .iter_mut()
                .zip(&row.data)
            {
                *o += b;
            }
        }
        out
    }

    /// Adds a `rows × 1` column to every column.
    pub fn add_col(&self, col: &Mat) -> Mat {
        assert_eq!((self.rows, 1), col.shape(), "column broadcast mismatch");
        let mut out = self.clone();
        for r in 0..self.rows {
            let b = col.data[r];
            for o in &mut out.data[r * self.cols..(r + 1) * self.cols] {
                *o += b;
            }
        }
        out
    }
}


/// A fixed linear map between row spaces: output row `d` is
/// `Σ weight · input[src]` over the listed entries. Applied column-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMap {
    src_rows: usize,
    entries: Vec<Vec<(usize, f64)>>,
}

impl SparseMap {
    pub fn new(src_rows: usize, entries: Vec<Vec<(usize, f64)>>) -> Self {
        assert!(entries.iter().flatten().all(|&(s, _)| s < src_rows));
        SparseMap { src_rows, entries }
    }

    pub fn src_rows(&self) -> usize {
        self.src_rows
    }

    pub fn dst_rows(&self) -> usize {
        self.entries.len()
    }

    pub fn apply(&self, input: &Mat) -> Mat {
        assert_eq!(input.rows(), self.src_rows, "sparse map input rows");
        let cols = input.cols();
        let mut out = Mat::zeros(self.entries.len(), cols);
        for (d, row) in self.entries.iter().enumerate() {
            for &(s, w) in row {
                for c in 0..cols {
                    out.data[d * cols + c] += w * input.data[s * cols + c];
                }
            }
        }
        out
    }

    /// Adjoint application, used for backpropagation.
    pub fn apply_transpose(&self, grad: &Mat) -> Mat {
        let cols = grad.cols();
        let mut out = Mat::zeros(self.src_rows, cols);
        for (d, row) in self.entries.iter().enumerate() {
            for &(s, w) in row {
                for c in 0..cols {
                    out.data[s * cols + c] += w * grad.data[d * cols + c];
                }
            }
        }
        out
    }
}

pub(crate) fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
