//! Dense linear algebra used to build and check dictionaries.
//!
//! Everything here runs in `f64`. Matrices are row-major.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

use crate::{rng, Error, Result};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from a function of `(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
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
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::invalid(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for (k, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (d, &b) in dst.iter_mut().zip(other.row(k)) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `out = M v` without dimension checks beyond debug assertions.
    pub(crate) fn matvec_into(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o = dot(row, v);
        }
    }

    /// `out = Mᵀ v` without materializing the transpose.
    pub(crate) fn matvec_transpose_into(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        out.fill(0.0);
        for (&s, row) in v.iter().zip(self.data.chunks_exact(self.cols)) {
            if s == 0.0 {
                continue;
            }
            for (o, &m) in out.iter_mut().zip(row) {
                *o += s * m;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    const LANES: usize = 8;
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().sum::<f64>() + tail
}

#[cfg(test)]
pub(crate) fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// `M v`.
pub fn matvec(m: &DenseMatrix, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != m.cols {
        return Err(Error::invalid(format!(
            "matvec: vector of length {} against {}x{} matrix",
            v.len(),
            m.rows,
            m.cols
        )));
    }
    let mut out = vec![0.0; m.rows];
    m.matvec_into(v, &mut out);
    Ok(out)
}

/// `Mᵀ v`, computed without forming `Mᵀ`.
pub fn matvec_transpose(m: &DenseMatrix, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != m.rows {
        return Err(Error::invalid(format!(
            "matvec_transpose: vector of length {} against {}x{} matrix",
            v.len(),
            m.rows,
            m.cols
        )));
    }
    let mut out = vec![0.0; m.cols];
    m.matvec_transpose_into(v, &mut out);
    Ok(out)
}

/// Max-norm deviation of `MᵀM` from the identity. `None` for non-square input.
pub fn orthonormality_error(m: &DenseMatrix) -> Option<f64> {
    if !m.is_square() {
        return None;
    }
    let n = m.cols;
    let t = m.transpose();
    let mut worst = 0.0f64;
    for i in 0..n {
        let ci = t.row(i);
        for j in i..n {
            let g = dot(ci, t.row(j));
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g - target).abs());
        }
    }
    Some(worst)
}

/// True iff `m` is square and `‖MᵀM − I‖_max ≤ tol`.
pub fn verify_orthonormal(m: &DenseMatrix, tol: f64) -> bool {
    orthonormality_error(m).is_some_and(|e| e <= tol)
}

/// A square matrix with orthonormal columns.
#[derive(Clone, Debug, PartialEq)]
pub struct OrthonormalBlock {
    matrix: DenseMatrix,
}

impl OrthonormalBlock {
    /// Tolerance used when accepting externally supplied blocks.
    pub const CONSTRUCTION_TOL: f64 = 1e-10;

    pub fn new(matrix: DenseMatrix) -> Result<Self> {
        match orthonormality_error(&matrix) {
            None => Err(Error::invalid(format!(
                "orthonormal block must be square, got {}x{}",
                matrix.rows, matrix.cols
            ))),
            Some(e) if e > Self::CONSTRUCTION_TOL => Err(Error::invalid(format!(
                "matrix is not orthonormal (max deviation {e:.3e})"
            ))),
            Some(_) => Ok(Self { matrix }),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            matrix: DenseMatrix::identity(dim),
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.matrix.rows
    }

    #[inline]
    pub fn matrix(&self) -> &DenseMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> DenseMatrix {
        self.matrix
    }

    pub fn verify(&self, tol: f64) -> bool {
        verify_orthonormal(&self.matrix, tol)
    }

    /// Coefficients to vector: `out = Q a`.
    #[inline]
    pub(crate) fn forward_into(&self, a: &[f64], out: &mut [f64]) {
        self.matrix.matvec_into(a, out);
    }

    /// Vector to coefficients: `out = Qᵀ w`.
    #[inline]
    pub(crate) fn adjoint_into(&self, w: &[f64], out: &mut [f64]) {
        self.matrix.matvec_transpose_into(w, out);
    }
}

/// Haar-distributed random orthogonal matrix.
///
/// Draws a seeded standard-Gaussian matrix, takes its QR decomposition and
/// flips each column of `Q` whose matching diagonal entry of `R` is negative.
pub fn random_orthogonal(dim: usize, seed: u64) -> Result<OrthonormalBlock> {
    if dim == 0 {
        return Err(Error::invalid("random_orthogonal: dim must be at least 1"));
    }
    let mut rng = rng::seeded(seed);
    let gaussian: Vec<f64> = (0..dim * dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let g = DMatrix::from_row_slice(dim, dim, &gaussian);
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let matrix = DenseMatrix::from_fn(dim, dim, |i, j| q[(i, j)]);
    Ok(OrthonormalBlock { matrix })
}

/// Orthonormal 1-D DCT-II matrix `C[x][p] = α_p cos(π(2x+1)p / 2n)`.
///
/// Columns are frequencies, rows are sample positions.
pub fn dct_matrix(n: usize) -> Result<DenseMatrix> {
    if n == 0 {
        return Err(Error::invalid("DCT size must be at least 1"));
    }
    let nf = n as f64;
    Ok(DenseMatrix::from_fn(n, n, |x, p| {
        let alpha = if p == 0 {
            (1.0 / nf).sqrt()
        } else {
            (2.0 / nf).sqrt()
        };
        alpha * (PI * (2 * x + 1) as f64 * p as f64 / (2.0 * nf)).cos()
    }))
}

/// Orthonormal 2-D DCT-II basis of `side × side` images.
///
/// Row `x * side + y` is pixel `(x, y)`; column `p * side + q` is the
/// frequency pair `(p, q)`. The entry is `C[x][p] · C[y][q]`.
pub fn dct_basis(side: usize) -> Result<OrthonormalBlock> {
    let c = dct_matrix(side)?;
    let n = side * side;
    let matrix = DenseMatrix::from_fn(n, n, |pix, freq| {
        let (x, y) = (pix / side, pix % side);
        let (p, q) = (freq / side, freq % side);
        c.get(x, p) * c.get(y, q)
    });
    Ok(OrthonormalBlock { matrix })
}

/// Separable 2-D DCT of one `side × side` image against the 1-D matrix `c`.
///
/// `inverse = false` maps pixels to coefficients (`A = Cᵀ X C`),
/// `inverse = true` maps coefficients to pixels (`X = C A Cᵀ`).
pub(crate) fn dct2_apply(c: &DenseMatrix, input: &[f64], out: &mut [f64], inverse: bool) {
    let n = c.rows();
    debug_assert_eq!(input.len(), n * n);
    debug_assert_eq!(out.len(), n * n);
    // tmp = Cᵀ X (forward) or C A (inverse), then right-multiply.
    let mut tmp = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let coef = if inverse { c.get(i, k) } else { c.get(k, i) };
            if coef == 0.0 {
                continue;
            }
            let src = &input[k * n..(k + 1) * n];
            let dst = &mut tmp[i * n..(i + 1) * n];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += coef * s;
            }
        }
    }
    for i in 0..n {
        let row = &tmp[i * n..(i + 1) * n];
        for j in 0..n {
            let mut acc = 0.0;
            for (k, &t) in row.iter().enumerate() {
                acc += t * if inverse { c.get(j, k) } else { c.get(k, j) };
            }
            out[i * n + j] = acc;
        }
    }
}
