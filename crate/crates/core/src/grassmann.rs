//! Subspaces of `R^d` represented by orthonormal bases, the projection
//! metric between them, and its gradient with respect to a basis.
//!
//! The squared projection distance between two `m`-dimensional subspaces is
//! `‖P₁P₁ᵀ − P₂P₂ᵀ‖²_F = 2m − 2‖P₁ᵀP₂‖²_F`; it only depends on the spans, so
//! any orthogonal change of basis `P ↦ PR` leaves it unchanged.

use log::warn;
use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix, ThinSvd};

/// Spectral gaps below this flag a degenerate truncation.
pub const DEGENERATE_GAP: f64 = 1e-10;
const ORTHONORMAL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GrassmannError {
    #[error("subspace dimension {m} is invalid for a {rows}x{cols} feature matrix")]
    Dimension { m: usize, rows: usize, cols: usize },
    #[error("subspaces differ in shape: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("basis columns are not orthonormal (‖PᵀP − I‖_F = {error:e})")]
    NotOrthonormal { error: f64 },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// An `m`-dimensional subspace of `R^d` held as a d×m basis with
/// orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Subspace {
    basis: Matrix,
}

impl Subspace {
    /// Wraps a basis after checking `1 ≤ m ≤ d` and `‖PᵀP − I‖_F < 1e-8`.
    pub fn from_basis(basis: Matrix) -> Result<Self, GrassmannError> {
        let (d, m) = basis.shape();
        if m == 0 || m > d {
            return Err(GrassmannError::Dimension { m, rows: d, cols: m });
        }
        let gram = basis.t_matmul(&basis)?;
        let error = gram.sub(&Matrix::identity(m))?.frobenius_norm();
        if error.is_nan() || error >= ORTHONORMAL_TOL {
            return Err(GrassmannError::NotOrthonormal { error });
        }
        Ok(Self { basis })
    }

    pub fn basis(&self) -> &Matrix {
        &self.basis
    }

    pub fn into_basis(self) -> Matrix {
        self.basis
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.rows()
    }

    pub fn dim(&self) -> usize {
        self.basis.cols()
    }

    /// Orthogonal projector `PPᵀ` (d×d).
    pub fn projector(&self) -> Matrix {
        self.basis
            .matmul_t(&self.basis)
            .expect("conformable by construction")
    }
}

/// Result of truncating a feature matrix to its leading left singular
/// vectors.
#[derive(Debug, Clone)]
pub struct Truncation {
    pub subspace: Subspace,
    /// The full thin SVD the subspace was read from.
    pub svd: ThinSvd,
    /// Set when `s[m−1] − s[m] < DEGENERATE_GAP`: the truncated span is then
    /// not uniquely defined and the returned basis is only the canonical-sign
    /// choice.
    pub degenerate: bool,
}

/// Span of the top `m` left singular vectors of `f` (d×p).
pub fn top_m_subspace(f: &Matrix, m: usize) -> Result<Truncation, GrassmannError> {
    let (d, p) = f.shape();
    if m == 0 || m > d.min(p) {
        return Err(GrassmannError::Dimension { m, rows: d, cols: p });
    }
    let svd = linalg::thin_svd(f)?;
    truncate(svd, m)
}

/// Same as [`top_m_subspace`] for an already computed SVD.
pub fn truncate(svd: ThinSvd, m: usize) -> Result<Truncation, GrassmannError> {
    let (d, r) = svd.u.shape();
    if m == 0 || m > r {
        return Err(GrassmannError::Dimension { m, rows: d, cols: r });
    }
    let degenerate = m < r && svd.s[m - 1] - svd.s[m] < DEGENERATE_GAP;
    if degenerate {
        warn!(
            "degenerate truncation at m = {m}: s[m-1] = {:e}, s[m] = {:e}",
            svd.s[m - 1],
            svd.s[m]
        );
    }
    let basis = svd.u.column_range(0, m);
    Ok(Truncation {
        subspace: Subspace { basis },
        svd,
        degenerate,
    })
}

fn check_pair(p1: &Subspace, p2: &Subspace) -> Result<(), GrassmannError> {
    if p1.basis.shape() != p2.basis.shape() {
        return Err(GrassmannError::ShapeMismatch {
            left: p1.basis.shape(),
            right: p2.basis.shape(),
        });
    }
    Ok(())
}

/// Squared projection metric `2m − 2‖P₁ᵀP₂‖²_F`, always within `[0, 2m]`.
pub fn projection_distance_sq(p1: &Subspace, p2: &Subspace) -> Result<f64, GrassmannError> {
    check_pair(p1, p2)?;
    let m = p1.dim() as f64;
    let cross = p1.basis.t_matmul(&p2.basis)?;
    let overlap = linalg::frobenius_norm_sq(&cross);
    Ok((2.0 * m - 2.0 * overlap).clamp(0.0, 2.0 * m))
}

/// Gradient of [`projection_distance_sq`] with respect to `p_new`'s basis,
/// treated as an unconstrained d×m matrix: `−4·P_old·P_oldᵀ·P_new`.
pub fn grad_wrt_basis(p_new: &Subspace, p_old: &Subspace) -> Result<Matrix, GrassmannError> {
    check_pair(p_new, p_old)?;
    let overlap = p_old.basis.t_matmul(&p_new.basis)?;
    Ok(p_old.basis.matmul(&overlap)?.scale(-4.0))
}

/// Independent route to the projection distance through principal angles:
/// with `cᵢ = cos θᵢ` the singular values of `P₁ᵀP₂` (clamped to `[0, 1]`),
/// returns `2·Σ(1 − cᵢ²)`. Used as a verification oracle.
pub fn principal_angle_distance_oracle(p1: &Subspace, p2: &Subspace) -> Result<f64, GrassmannError> {
    check_pair(p1, p2)?;
    let cross = p1.basis.t_matmul(&p2.basis)?;
    let svd = linalg::thin_svd(&cross)?;
    Ok(svd
        .s
        .iter()
        .map(|c| {
            let c = c.clamp(0.0, 1.0);
            2.0 * (1.0 - c * c)
        })
        .sum())
}
