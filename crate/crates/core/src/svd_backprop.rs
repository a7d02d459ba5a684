//! Closed-form vector-Jacobian product through the truncated SVD.
//!
//! Given `F = PΣQᵀ` (thin, `r = min(d, p)` triplets) and an upstream
//! gradient `G` with respect to the first `m` left singular vectors, the
//! gradient with respect to `F` is
//!
//! ```text
//! ∇_F = D·Qᵀ − P·(PᵀD)_diag·Qᵀ − 2·P·Σ·(Kᵀ ∘ (DᵀPΣ))_sym·Qᵀ
//! K_ij = 1/(σ_i² − σ_j²) for i ≠ j, 0 on the diagonal
//! D    = [G·Σ_m⁻¹ | 0]            (d×r, zero beyond column m)
//! ```
//!
//! Only the leading `m` columns receive gradient; the trailing block of the
//! basis gradient is zero, which is what the zero padding of `D` encodes.

use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix, ThinSvd};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackpropError {
    #[error("upstream gradient is {got:?}, expected {expected:?}")]
    GradShape {
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("truncation m = {m} exceeds the {r} available singular triplets")]
    Truncation { m: usize, r: usize },
    #[error("SVD factors do not match the {rows}x{cols} input")]
    SvdShape { rows: usize, cols: usize },
    #[error("singular value s[{index}] = {sigma:e} is below {eps:e} inside the truncated block")]
    IllConditioned { index: usize, sigma: f64, eps: f64 },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Degeneracy threshold on `|σᵢ² − σⱼ²|`: `1e-8 · max(1, σ₀²)`.
pub fn default_eps(s: &[f64]) -> f64 {
    let top = s.first().copied().unwrap_or(0.0);
    1e-8 * (top * top).max(1.0)
}

/// The antisymmetric coupling matrix between singular directions.
#[derive(Debug, Clone, PartialEq)]
pub struct KMatrix {
    pub k: Matrix,
    /// Unordered pairs `(i, j)` whose squared gap fell below `eps` and were
    /// clamped to zero.
    pub degenerate_pairs: usize,
}

/// `kᵢⱼ = 1/(σᵢ² − σⱼ²)` off the diagonal; pairs with `|σᵢ² − σⱼ²| < eps`
/// are set to 0 and counted.
pub fn k_matrix(s: &[f64], eps: f64) -> KMatrix {
    let n = s.len();
    let mut k = Matrix::zeros(n, n);
    let mut degenerate_pairs = 0;
    for i in 0..n {
        for j in i + 1..n {
            let gap = s[i] * s[i] - s[j] * s[j];
            if gap.abs() < eps {
                degenerate_pairs += 1;
                continue;
            }
            k[(i, j)] = 1.0 / gap;
            k[(j, i)] = -1.0 / gap;
        }
    }
    KMatrix {
        k,
        degenerate_pairs,
    }
}

/// Output of [`svd_vjp`].
#[derive(Debug, Clone)]
pub struct VjpOutput {
    /// Gradient with respect to `F`, d×p.
    pub grad: Matrix,
    /// Clamped K pairs touching the truncated block; each one means the
    /// gradient there is a regularized approximation.
    pub degenerate_pairs: usize,
}

/// Pulls a gradient on the top-`m` left singular vectors back to `F`.
///
/// `svd` must be the thin SVD of `f`; `grad_p` is d×m.
pub fn svd_vjp(
    f: &Matrix,
    svd: &ThinSvd,
    grad_p: &Matrix,
    m: usize,
    eps: f64,
) -> Result<VjpOutput, BackpropError> {
    vjp_impl(f, svd, grad_p, m, eps, 1.0)
}

/// Mutant of [`svd_vjp`] with the sign of the third term flipped. Only
/// used to check that the gradient harness actually detects a wrong
/// gradient.
#[doc(hidden)]
pub fn svd_vjp_flipped_term3(
    f: &Matrix,
    svd: &ThinSvd,
    grad_p: &Matrix,
    m: usize,
    eps: f64,
) -> Result<VjpOutput, BackpropError> {
    vjp_impl(f, svd, grad_p, m, eps, -1.0)
}

fn vjp_impl(
    f: &Matrix,
    svd: &ThinSvd,
    grad_p: &Matrix,
    m: usize,
    eps: f64,
    term3_sign: f64,
) -> Result<VjpOutput, BackpropError> {
    let (d, p) = f.shape();
    let r = svd.s.len();
    if svd.u.shape() != (d, r) || svd.v.shape() != (p, r) || r != d.min(p) {
        return Err(BackpropError::SvdShape { rows: d, cols: p });
    }
    if m == 0 || m > r {
        return Err(BackpropError::Truncation { m, r });
    }
    if grad_p.shape() != (d, m) {
        return Err(BackpropError::GradShape {
            got: grad_p.shape(),
            expected: (d, m),
        });
    }
    if let Some(index) = (0..m).find(|&i| svd.s[i] < eps) {
        return Err(BackpropError::IllConditioned {
            index,
            sigma: svd.s[index],
            eps,
        });
    }

    let u = &svd.u;
    let s = &svd.s;

    // D = [G Σ_m⁻¹ | 0], d×r.
    let mut dmat = Matrix::zeros(d, r);
    for i in 0..d {
        let g = grad_p.row(i);
        let row = dmat.row_mut(i);
        for j in 0..m {
            row[j] = g[j] / s[j];
        }
    }

    let kmat = k_matrix(s, eps);
    let degenerate_pairs = (0..m)
        .flat_map(|i| (i + 1..r).map(move |j| (i, j)))
        .filter(|&(i, j)| (s[i] * s[i] - s[j] * s[j]).abs() < eps)
        .count();

    // A = PᵀD (r×r).
    let a = u.t_matmul(&dmat)?;

    // X = DᵀPΣ, so X_ij = A_ji σ_j.
    let x = Matrix::from_fn(r, r, |i, j| a[(j, i)] * s[j]);
    // Kᵀ ∘ X.
    let kx = Matrix::from_fn(r, r, |i, j| kmat.k[(j, i)] * x[(i, j)]);
    let sym = linalg::sym_part(&kx)?;

    // Inner r×r block M with ∇_F = D Qᵀ + P M Qᵀ:
    //   M = −(PᵀD)_diag − 2 Σ (Kᵀ ∘ DᵀPΣ)_sym.
    let mut inner = Matrix::zeros(r, r);
    for i in 0..r {
        for j in 0..r {
            inner[(i, j)] = -2.0 * term3_sign * s[i] * sym[(i, j)];
        }
        inner[(i, i)] -= a[(i, i)];
    }

    // (D + P M) Qᵀ.
    let mut left = u.matmul(&inner)?;
    left.axpy(1.0, &dmat)?;
    let grad = left.matmul_t(&svd.v)?;

    Ok(VjpOutput {
        grad,
        degenerate_pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grassmann::{self, Subspace};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn k_two_values() {
        let k = k_matrix(&[2.0, 1.0], 1e-10);
        assert_eq!(k.degenerate_pairs, 0);
        assert_eq!(k.k[(0, 1)], 1.0 / 3.0);
        assert_eq!(k.k[(1, 0)], -1.0 / 3.0);
        assert_eq!(k.k[(0, 0)], 0.0);
        assert_eq!(k.k[(1, 1)], 0.0);
    }

    #[test]
    fn k_equal_values_clamped() {
        let k = k_matrix(&[1.0, 1.0], 1e-10);
        assert_eq!(k.k, Matrix::zeros(2, 2));
        assert_eq!(k.degenerate_pairs, 1);
    }

    #[test]
    fn k_three_values() {
        let k = k_matrix(&[3.0, 2.0, 1.0], 1e-10);
        assert_eq!(k.k[(0, 1)], 1.0 / 5.0);
        assert_eq!(k.k[(0, 2)], 1.0 / 8.0);
        assert_eq!(k.k[(1, 2)], 1.0 / 3.0);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(k.k[(i, j)], -k.k[(j, i)]);
            }
        }
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_upstream_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random(9, 4, &mut rng);
        let svd = linalg::thin_svd(&f).unwrap();
        let eps = default_eps(&svd.s);
        let out = svd_vjp(&f, &svd, &Matrix::zeros(9, 2), 2, eps).unwrap();
        assert_eq!(out.grad, Matrix::zeros(9, 4));
    }

    #[test]
    fn linear_in_upstream_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random(12, 5, &mut rng);
        let svd = linalg::thin_svd(&f).unwrap();
        let eps = default_eps(&svd.s);
        let g1 = random(12, 3, &mut rng);
        let g2 = random(12, 3, &mut rng);
        let mut combo = g1.scale(0.7);
        combo.axpy(-1.3, &g2).unwrap();
        let lhs = svd_vjp(&f, &svd, &combo, 3, eps).unwrap().grad;
        let mut rhs = svd_vjp(&f, &svd, &g1, 3, eps).unwrap().grad.scale(0.7);
        rhs.axpy(-1.3, &svd_vjp(&f, &svd, &g2, 3, eps).unwrap().grad)
            .unwrap();
        assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-10);
    }

    fn loss(f: &Matrix, reference: &Subspace, m: usize) -> f64 {
        let t = grassmann::top_m_subspace(f, m).unwrap();
        grassmann::projection_distance_sq(&t.subspace, reference).unwrap()
    }

    fn chained_grad(f: &Matrix, reference: &Subspace, m: usize) -> Matrix {
        let t = grassmann::top_m_subspace(f, m).unwrap();
        let g = grassmann::grad_wrt_basis(&t.subspace, reference).unwrap();
        svd_vjp(f, &t.svd, &g, m, default_eps(&t.svd.s)).unwrap().grad
    }

    fn fd_max_rel(f: &Matrix, reference: &Subspace, m: usize) -> f64 {
        let analytic = chained_grad(f, reference, m);
        let h = 1e-5;
        let scale = analytic.max_abs();
        let mut worst: f64 = 0.0;
        for i in 0..f.rows() {
            for j in 0..f.cols() {
                let mut plus = f.clone();
                plus[(i, j)] += h;
                let mut minus = f.clone();
                minus[(i, j)] -= h;
                let num = (loss(&plus, reference, m) - loss(&minus, reference, m)) / (2.0 * h);
                let a = analytic[(i, j)];
                let denom = a.abs().max(num.abs()).max(1e-3 * scale);
                worst = worst.max((a - num).abs() / denom);
            }
        }
        worst
    }

    fn reference(d: usize, m: usize, rng: &mut ChaCha8Rng) -> Subspace {
        let q = linalg::thin_svd(&random(d, m, rng)).unwrap().u;
        Subspace::from_basis(q).unwrap()
    }

    #[test]
    fn matches_finite_differences_tall() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random(10, 4, &mut rng);
        let p = reference(10, 2, &mut rng);
        let err = fd_max_rel(&f, &p, 2);
        assert!(err < 1e-5, "max rel err {err}");
    }

    #[test]
    fn matches_finite_differences_wide() {
        // d < p: the thin factor P is square.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random(6, 9, &mut rng);
        let p = reference(6, 3, &mut rng);
        let err = fd_max_rel(&f, &p, 3);
        assert!(err < 1e-5, "max rel err {err}");
    }

    #[test]
    fn matches_finite_differences_full_truncation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random(8, 3, &mut rng);
        let p = reference(8, 3, &mut rng);
        let err = fd_max_rel(&f, &p, 3);
        assert!(err < 1e-5, "max rel err {err}");
    }

    #[test]
    fn flipped_third_term_is_wrong() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = random(10, 4, &mut rng);
        let p = reference(10, 2, &mut rng);
        let t = grassmann::top_m_subspace(&f, 2).unwrap();
        let g = grassmann::grad_wrt_basis(&t.subspace, &p).unwrap();
        let eps = default_eps(&t.svd.s);
        let good = svd_vjp(&f, &t.svd, &g, 2, eps).unwrap().grad;
        let bad = svd_vjp_flipped_term3(&f, &t.svd, &g, 2, eps).unwrap().grad;
        assert!(good.sub(&bad).unwrap().max_abs() > 1e-3);
    }

    #[test]
    fn ill_conditioned_block_is_an_error() {
        let f = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]]);
        let svd = linalg::thin_svd(&f).unwrap();
        let err = svd_vjp(&f, &svd, &Matrix::zeros(3, 2), 2, 1e-8).unwrap_err();
        assert!(matches!(err, BackpropError::IllConditioned { index: 1, .. }));
    }

    #[test]
    fn degenerate_top_block_is_clamped_and_finite() {
        // σ₀ = σ₁ = 2 inside the top-2 block, σ₂ = 1 below.
        let f = Matrix::from_rows(&[
            vec![2.0, 0.0, 0.0],
            vec![0.0, 2.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0, 0.0, 0.0],
        ]);
        let svd = linalg::thin_svd(&f).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = random(4, 2, &mut rng);
        let out = svd_vjp(&f, &svd, &g, 2, default_eps(&svd.s)).unwrap();
        assert_eq!(out.degenerate_pairs, 1);
        assert!(out.grad.is_finite());
    }

    #[test]
    fn shape_errors() {
        let f = Matrix::identity(3);
        let svd = linalg::thin_svd(&f).unwrap();
        assert!(matches!(
            svd_vjp(&f, &svd, &Matrix::zeros(3, 1), 4, 1e-8),
            Err(BackpropError::Truncation { .. })
        ));
        assert!(matches!(
            svd_vjp(&f, &svd, &Matrix::zeros(2, 1), 1, 1e-8),
            Err(BackpropError::GradShape { .. })
        ));
        assert!(matches!(
            svd_vjp(&Matrix::zeros(4, 3), &svd, &Matrix::zeros(4, 1), 1, 1e-8),
            Err(BackpropError::SvdShape { .. })
        ));
    }
}
