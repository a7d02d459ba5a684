//! Dense row-major matrices, the thin SVD, and the small set of matrix
//! operators (symmetric part, diagonal part, Frobenius inner product) that
//! the subspace losses and their gradients are written in.

use std::fmt;
use std::ops::{Index, IndexMut};

use thiserror::Error;

/// Errors raised by matrix construction and decompositions.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op} requires a square matrix, got {rows}x{cols}")]
    NotSquare {
        op: &'static str,
        rows: usize,
        cols: usize,
    },
    #[error("matrix dimensions must be positive, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },
    #[error("data length {len} does not match {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error(
        "SVD did not converge after {sweeps} sweeps on a {rows}x{cols} matrix \
         (||F||_F = {frobenius_norm:e}, column-norm condition estimate = {condition_estimate:e}, \
         residual off-diagonal = {off_diagonal:e})"
    )]
    NoConvergence {
        sweeps: usize,
        rows: usize,
        cols: usize,
        frobenius_norm: f64,
        condition_estimate: f64,
        off_diagonal: f64,
    },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Dense real matrix stored row-major.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let shown: Vec<String> = row.iter().take(8).map(|v| format!("{v:.6}")).collect();
            writeln!(f, "  {}", shown.join(", "))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
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

    /// Builds a matrix from external data, validating the shape and that
    /// every entry is finite.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(LinalgError::EmptyShape { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(LinalgError::DataLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite {
                row: pos / cols,
                col: pos % cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Unchecked constructor for internally produced buffers.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    /// Builds a matrix from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
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
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.data[r * self.cols + c]).collect()
    }

    pub fn set_col(&mut self, c: usize, values: &[f64]) {
        assert_eq!(values.len(), self.rows);
        for (r, &v) in values.iter().enumerate() {
            self.data[r * self.cols + c] = v;
        }
    }

    /// Copies the listed columns, in order, into a new matrix.
    pub fn select_columns(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(self.rows, idx.len());
        for r in 0..self.rows {
            let src = self.row(r);
            let dst = &mut out.data[r * idx.len()..(r + 1) * idx.len()];
            for (k, &c) in idx.iter().enumerate() {
                dst[k] = src[c];
            }
        }
        out
    }

    /// Copies the contiguous column range `[start, end)`.
    pub fn column_range(&self, start: usize, end: usize) -> Matrix {
        let idx: Vec<usize> = (start..end).collect();
        self.select_columns(&idx)
    }

    /// Copies rows `[start, end)`.
    pub fn row_range(&self, start: usize, end: usize) -> Matrix {
        Matrix::from_raw(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    fn check_same(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(LinalgError::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same(other, "add")?;
        Ok(self.zip_with(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same(other, "sub")?;
        Ok(self.zip_with(other, |a, b| a - b))
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same(other, "hadamard")?;
        Ok(self.zip_with(other, |a, b| a * b))
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &Matrix) -> Result<()> {
        self.check_same(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        Matrix::from_raw(
            self.rows,
            self.cols,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(LinalgError::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(
            self.rows,
            self.cols,
            other.cols,
            Operand::plain(self),
            Operand::plain(other),
            &mut out,
            0.0,
        );
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(LinalgError::ShapeMismatch {
                op: "t_matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm(
            self.cols,
            self.rows,
            other.cols,
            Operand::transposed(self),
            Operand::plain(other),
            &mut out,
            0.0,
        );
        Ok(out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(LinalgError::ShapeMismatch {
                op: "matmul_t",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm(
            self.rows,
            self.cols,
            other.rows,
            Operand::plain(self),
            Operand::transposed(other),
            &mut out,
            0.0,
        );
        Ok(out)
    }

    /// `self += aᵀ · b`, used to accumulate weight gradients.
    pub fn add_t_matmul(&mut self, a: &Matrix, b: &Matrix) -> Result<()> {
        if a.rows != b.rows || self.shape() != (a.cols, b.cols) {
            return Err(LinalgError::ShapeMismatch {
                op: "add_t_matmul",
                left: a.shape(),
                right: b.shape(),
            });
        }
        gemm(
            a.cols,
            a.rows,
            b.cols,
            Operand::transposed(a),
            Operand::plain(b),
            self,
            1.0,
        );
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm_sq(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols))
            .map(|i| self.data[i * self.cols + i])
            .sum()
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

struct Operand<'a> {
    data: &'a [f64],
    row_stride: isize,
    col_stride: isize,
}

impl<'a> Operand<'a> {
    fn plain(m: &'a Matrix) -> Self {
        Self {
            data: &m.data,
            row_stride: m.cols as isize,
            col_stride: 1,
        }
    }

    fn transposed(m: &'a Matrix) -> Self {
        Self {
            data: &m.data,
            row_stride: 1,
            col_stride: m.cols as isize,
        }
    }
}

/// `out = beta·out + a·b` where `a` is m×k and `b` is k×n.
fn gemm(m: usize, k: usize, n: usize, a: Operand<'_>, b: Operand<'_>, out: &mut Matrix, beta: f64) {
    debug_assert_eq!(out.shape(), (m, n));
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.scale_in_place(beta);
        return;
    }
    // SAFETY: strides and extents describe exactly the borrowed buffers, and
    // `out` does not alias either operand.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `½(aᵀ + a)`.
pub fn sym_part(a: &Matrix) -> Result<Matrix> {
    if a.rows != a.cols {
        return Err(LinalgError::NotSquare {
            op: "sym_part",
            rows: a.rows,
            cols: a.cols,
        });
    }
    let n = a.rows;
    Ok(Matrix::from_fn(n, n, |i, j| 0.5 * (a[(j, i)] + a[(i, j)])))
}

/// Keeps entries `(i, i)` and zeroes everything else; any shape.
pub fn diag_part(a: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows, a.cols, |i, j| if i == j { a[(i, j)] } else { 0.0 })
}

/// Colon product `a : b = Tr(aᵀb) = Σ aᵢⱼbᵢⱼ`.
pub fn frobenius_inner(a: &Matrix, b: &Matrix) -> Result<f64> {
    a.check_same(b, "frobenius_inner")?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum())
}

pub fn frobenius_norm_sq(a: &Matrix) -> f64 {
    a.data.iter().map(|v| v * v).sum()
}

/// Thin singular value decomposition `F = U·diag(s)·Vᵀ` with
/// `r = min(d, p)` singular triplets.
#[derive(Debug, Clone, PartialEq)]
pub struct ThinSvd {
    /// d×r, orthonormal columns.
    pub u: Matrix,
    /// r values, non-increasing and non-negative.
    pub s: Vec<f64>,
    /// p×r, orthonormal columns.
    pub v: Matrix,
}

impl ThinSvd {
    pub fn rank_bound(&self) -> usize {
        self.s.len()
    }

    /// Number of singular values above `rel_tol · s[0]`.
    pub fn numerical_rank(&self, rel_tol: f64) -> usize {
        let top = self.s.first().copied().unwrap_or(0.0);
        if top <= 0.0 {
            return 0;
        }
        self.s.iter().take_while(|&&v| v > rel_tol * top).count()
    }

    /// `u·diag(s)·vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for r in 0..us.rows {
            for (c, s) in self.s.iter().enumerate() {
                us[(r, c)] *= s;
            }
        }
        us.matmul_t(&self.v).expect("conformable by construction")
    }
}

const MAX_SWEEPS: usize = 100;
/// Singular values below this fraction of `s[0]` get their left vector from
/// basis completion instead of normalization.
const ZERO_SV_TOL: f64 = 1e-12;

/// Thin SVD by one-sided (Hestenes) Jacobi rotations.
///
/// For `d ≥ p` the columns of `f` are rotated until mutually orthogonal,
/// which diagonalizes `fᵀf` implicitly; the accumulated rotations give `v`
/// and the normalized columns give `u`. For `d < p` the same is done on
/// `fᵀ`. Each left singular vector is sign-fixed so its largest-magnitude
/// entry is positive (first such entry on ties).
pub fn thin_svd(f: &Matrix) -> Result<ThinSvd> {
    if f.rows == 0 || f.cols == 0 {
        return Err(LinalgError::EmptyShape {
            rows: f.rows,
            cols: f.cols,
        });
    }
    if let Some(pos) = f.data.iter().position(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite {
            row: pos / f.cols,
            col: pos % f.cols,
        });
    }
    if f.rows >= f.cols {
        let (cols, v, s) = jacobi_columns(f, false)?;
        let u = left_vectors(&cols, &s, f.rows);
        Ok(canonicalize(u, s, v))
    } else {
        // fᵀ = U'ΣV'ᵀ  ⇒  f = V'ΣU'ᵀ.
        let (cols, v_t, s) = jacobi_columns(f, true)?;
        let u_t = left_vectors(&cols, &s, f.cols);
        Ok(canonicalize(v_t, s, u_t))
    }
}

/// Runs one-sided Jacobi on the columns of `f` (or of `fᵀ` when
/// `transpose`). Returns the rotated columns sorted by descending norm, the
/// matching accumulated rotation matrix, and the column norms.
fn jacobi_columns(f: &Matrix, transpose: bool) -> Result<(Vec<Vec<f64>>, Matrix, Vec<f64>)> {
    let n = if transpose { f.rows } else { f.cols };
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            if transpose {
                f.row(j).to_vec()
            } else {
                f.col(j)
            }
        })
        .collect();
    let mut rot: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let fro = f.frobenius_norm();
    let abs_floor = (1e-12 * fro).powi(2);
    // Pairs whose normalized inner product is within the rounding bound of
    // a dot product of this length count as orthogonal.
    let len = if transpose { f.cols } else { f.rows };
    let rotation_tol = f64::EPSILON * len.max(1) as f64;
    let mut converged = n == 1;
    let mut sweeps = 0;
    let mut worst = 0.0f64;
    while !converged && sweeps < MAX_SWEEPS {
        sweeps += 1;
        let mut rotated = false;
        worst = 0.0;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (a, b) = (&cols[p], &cols[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for (x, y) in a.iter().zip(b) {
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                    (alpha, beta, gamma)
                };
                let scale = (alpha * beta).sqrt();
                if scale > 0.0 {
                    worst = worst.max(gamma.abs() / scale);
                }
                if gamma.abs() <= rotation_tol * scale || gamma.abs() <= abs_floor {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut cols, p, q, c, s);
                rotate_pair(&mut rot, p, q, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        let norms: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
        let max = norms.iter().cloned().fold(0.0, f64::max);
        let min = norms.iter().cloned().fold(f64::INFINITY, f64::min);
        return Err(LinalgError::NoConvergence {
            sweeps,
            rows: f.rows,
            cols: f.cols,
            frobenius_norm: fro,
            condition_estimate: if min > 0.0 { max / min } else { f64::INFINITY },
            off_diagonal: worst,
        });
    }

    let norms: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps ties in original column order.
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).expect("finite norms"));
    let sorted_cols: Vec<Vec<f64>> = order.iter().map(|&j| cols[j].clone()).collect();
    let s: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let mut v = Matrix::zeros(n, n);
    for (k, &j) in order.iter().enumerate() {
        v.set_col(k, &rot[j]);
    }
    Ok((sorted_cols, v, s))
}

#[inline]
fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let (a, b) = (&mut head[p], &mut tail[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Normalizes rotated columns into left singular vectors; columns whose
/// singular value is numerically zero are completed by Gram-Schmidt
/// against the vectors already recovered.
fn left_vectors(cols: &[Vec<f64>], s: &[f64], len: usize) -> Matrix {
    let r = cols.len();
    let top = s.first().copied().unwrap_or(0.0);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(r);
    let mut pending = Vec::new();
    for (k, col) in cols.iter().enumerate() {
        if s[k] > ZERO_SV_TOL * top && s[k] > 0.0 {
            basis.push(col.iter().map(|x| x / s[k]).collect());
        } else {
            basis.push(Vec::new());
            pending.push(k);
        }
    }
    for k in pending {
        let filled: Vec<&Vec<f64>> = basis.iter().filter(|b| !b.is_empty()).collect();
        basis[k] = complete_direction(&filled, len);
    }
    let mut u = Matrix::zeros(len, r);
    for (k, b) in basis.iter().enumerate() {
        u.set_col(k, b);
    }
    u
}

/// Picks the standard basis vector with the largest residual after
/// projecting out the orthonormal `existing` (residual norm² of `e_i` is
/// `1 − Σ_b b_i²`), and returns its normalized residual.
fn complete_direction(existing: &[&Vec<f64>], len: usize) -> Vec<f64> {
    let mut best = (f64::NEG_INFINITY, 0);
    for e in 0..len {
        let res = 1.0 - existing.iter().map(|b| b[e] * b[e]).sum::<f64>();
        if res > best.0 + 1e-12 {
            best = (res, e);
        }
    }
    let mut v = vec![0.0; len];
    v[best.1] = 1.0;
    // Two passes of modified Gram-Schmidt for stability.
    for _ in 0..2 {
        for b in existing {
            let dot: f64 = v.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b.iter()) {
                *x -= dot * y;
            }
        }
    }
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    v
}

fn canonicalize(mut u: Matrix, s: Vec<f64>, mut v: Matrix) -> ThinSvd {
    let r = s.len();
    for k in 0..r {
        let mut best = 0usize;
        let mut best_abs = -1.0;
        for i in 0..u.rows {
            let a = u[(i, k)].abs();
            if a > best_abs + 1e-14 {
                best_abs = a;
                best = i;
            }
        }
        if u[(best, k)] < 0.0 {
            for i in 0..u.rows {
                u[(i, k)] = -u[(i, k)];
            }
            for i in 0..v.rows {
                v[(i, k)] = -v[(i, k)];
            }
        }
    }
    ThinSvd { u, s, v }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn orth_err(m: &Matrix) -> f64 {
        let g = m.t_matmul(m).unwrap();
        g.sub(&Matrix::identity(m.cols())).unwrap().frobenius_norm()
    }

    fn check_invariants(f: &Matrix, svd: &ThinSvd) {
        assert!(svd.s.windows(2).all(|w| w[0] >= w[1]));
        assert!(svd.s.iter().all(|&v| v >= 0.0));
        assert!(orth_err(&svd.u) < 1e-10, "u not orthonormal");
        assert!(orth_err(&svd.v) < 1e-10, "v not orthonormal");
        let err = svd.reconstruct().sub(f).unwrap().frobenius_norm();
        assert!(err < 1e-8 * f.frobenius_norm().max(1.0), "reconstruction {err}");
    }

    #[test]
    fn identity_svd() {
        let svd = thin_svd(&Matrix::identity(3)).unwrap();
        assert_eq!(svd.s, vec![1.0, 1.0, 1.0]);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((svd.u[(i, j)].abs() - expect).abs() < 1e-15);
                assert!((svd.v[(i, j)].abs() - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn diagonal_svd() {
        let svd = thin_svd(&Matrix::diag(&[2.0, 1.0])).unwrap();
        assert_eq!(svd.s, vec![2.0, 1.0]);
        assert_eq!(svd.u, Matrix::identity(2));
        assert_eq!(svd.v, Matrix::identity(2));
    }

    #[test]
    fn diagonal_out_of_order_is_sorted() {
        let svd = thin_svd(&Matrix::diag(&[1.0, 3.0, 2.0])).unwrap();
        assert_eq!(svd.s, vec![3.0, 2.0, 1.0]);
        check_invariants(&Matrix::diag(&[1.0, 3.0, 2.0]), &svd);
    }

    #[test]
    fn random_tall_reconstructs() {
        let f = random(20, 8, 1);
        let svd = thin_svd(&f).unwrap();
        assert_eq!(svd.u.shape(), (20, 8));
        assert_eq!(svd.v.shape(), (8, 8));
        check_invariants(&f, &svd);
    }

    #[test]
    fn random_wide_reconstructs() {
        let f = random(5, 13, 2);
        let svd = thin_svd(&f).unwrap();
        assert_eq!(svd.u.shape(), (5, 5));
        assert_eq!(svd.v.shape(), (13, 5));
        check_invariants(&f, &svd);
    }

    #[test]
    fn rank_deficient_completes_basis() {
        // Duplicate and zero columns.
        let mut f = random(10, 4, 3);
        let c0 = f.col(0);
        f.set_col(2, &c0);
        f.set_col(3, &[0.0; 10]);
        let svd = thin_svd(&f).unwrap();
        check_invariants(&f, &svd);
        assert!(svd.s[2] < 1e-12 && svd.s[3] < 1e-12);
        assert_eq!(svd.numerical_rank(1e-10), 2);
    }

    #[test]
    fn zero_matrix() {
        let f = Matrix::zeros(4, 3);
        let svd = thin_svd(&f).unwrap();
        assert_eq!(svd.s, vec![0.0; 3]);
        assert!(orth_err(&svd.u) < 1e-12);
    }

    #[test]
    fn single_column_and_row() {
        let col = Matrix::from_rows(&[vec![3.0], vec![-4.0]]);
        let svd = thin_svd(&col).unwrap();
        assert!((svd.s[0] - 5.0).abs() < 1e-15);
        assert!(svd.u[(1, 0)] > 0.0, "largest-magnitude entry made positive");
        check_invariants(&col, &svd);
        let row = col.transpose();
        check_invariants(&row, &thin_svd(&row).unwrap());
    }

    #[test]
    fn non_finite_rejected() {
        let mut f = Matrix::zeros(2, 2);
        f[(1, 0)] = f64::NAN;
        assert_eq!(
            thin_svd(&f).unwrap_err(),
            LinalgError::NonFinite { row: 1, col: 0 }
        );
        assert!(Matrix::from_vec(1, 2, vec![1.0, f64::INFINITY]).is_err());
        assert!(Matrix::from_vec(2, 2, vec![1.0]).is_err());
    }

    #[test]
    fn deterministic_bitwise() {
        let f = random(17, 6, 9);
        assert_eq!(thin_svd(&f).unwrap(), thin_svd(&f).unwrap());
    }

    #[test]
    fn scaling_scales_singular_values() {
        let f = random(12, 5, 4);
        let a = thin_svd(&f).unwrap();
        let b = thin_svd(&f.scale(3.5)).unwrap();
        for (x, y) in a.s.iter().zip(&b.s) {
            assert!((3.5 * x - y).abs() < 1e-12 * y.max(1.0));
        }
        let diff = a.u.sub(&b.u).unwrap().max_abs();
        assert!(diff < 1e-10, "left vectors identical after sign fixing: {diff}");
    }

    #[test]
    fn sym_part_examples() {
        assert_eq!(sym_part(&Matrix::identity(3)).unwrap(), Matrix::identity(3));
        let a = Matrix::from_rows(&[vec![0.0, 2.0], vec![0.0, 0.0]]);
        assert_eq!(
            sym_part(&a).unwrap(),
            Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]])
        );
        let skew = Matrix::from_rows(&[vec![0.0, 1.5], vec![-1.5, 0.0]]);
        assert_eq!(sym_part(&skew).unwrap(), Matrix::zeros(2, 2));
        assert!(matches!(
            sym_part(&Matrix::zeros(2, 3)),
            Err(LinalgError::NotSquare { .. })
        ));
    }

    #[test]
    fn diag_part_examples() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(
            diag_part(&a),
            Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 4.0]])
        );
        let d = Matrix::diag(&[5.0, -1.0]);
        assert_eq!(diag_part(&d), d);
        let r = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        assert_eq!(
            diag_part(&r),
            Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 5.0, 0.0]])
        );
    }

    #[test]
    fn frobenius_examples() {
        let i2 = Matrix::identity(2);
        assert_eq!(frobenius_inner(&i2, &i2).unwrap(), 2.0);
        let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let b = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(frobenius_inner(&a, &b).unwrap(), 0.0);
        let x = random(4, 3, 5);
        let y = random(4, 3, 6);
        let trace = x.t_matmul(&y).unwrap().trace();
        assert!((frobenius_inner(&x, &y).unwrap() - trace).abs() < 1e-12);
        assert!((frobenius_norm_sq(&x) - frobenius_inner(&x, &x).unwrap()).abs() < 1e-14);
        assert!(frobenius_inner(&x, &i2).is_err());
    }

    #[test]
    fn matmul_variants_agree() {
        let a = random(5, 7, 10);
        let b = random(7, 3, 11);
        let c = random(5, 3, 12);
        let direct = a.matmul(&b).unwrap();
        let via_t = a.transpose().t_matmul(&b).unwrap();
        let via_mt = a.matmul_t(&b.transpose()).unwrap();
        assert!(direct.sub(&via_t).unwrap().max_abs() < 1e-14);
        assert!(direct.sub(&via_mt).unwrap().max_abs() < 1e-14);
        let mut acc = Matrix::zeros(7, 3);
        acc.add_t_matmul(&a, &c).unwrap();
        acc.add_t_matmul(&a, &c).unwrap();
        let expect = a.t_matmul(&c).unwrap().scale(2.0);
        assert!(acc.sub(&expect).unwrap().max_abs() < 1e-13);
        assert!(a.matmul(&c).is_err());
    }
}
