//! Finite-difference check of the chained subspace-loss gradient
//! `L(F) = d²(top_m(F), P_ref)`, backpropagated through the SVD.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::grassmann::{self, Subspace};
use crate::linalg::{self, Matrix};
use crate::svd_backprop::{self, BackpropError, VjpOutput};

pub const DEFAULT_SIZES: [(usize, usize, usize); 3] = [(10, 4, 2), (20, 8, 4), (32, 16, 5)];
pub const TOLERANCE: f64 = 1e-5;
pub const STEP: f64 = 1e-5;
pub const MIN_GAP: f64 = 0.1;

/// Which backward pass to check. `FlippedTerm3` negates the K-matrix term
/// and exists to show the check catches a wrong sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Correct,
    FlippedTerm3,
}

type Vjp = fn(&Matrix, &linalg::ThinSvd, &Matrix, usize, f64) -> Result<VjpOutput, BackpropError>;

impl Variant {
    fn vjp(self) -> Vjp {
        match self {
            Variant::Correct => svd_backprop::svd_vjp,
            Variant::FlippedTerm3 => svd_backprop::svd_vjp_flipped_term3,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SizeReport {
    pub d: usize,
    pub p: usize,
    pub m: usize,
    pub instances: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn orthonormal(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    linalg::thin_svd(&random(rows, cols, rng)).expect("random matrix").u
}

/// `U·diag(s)·Vᵀ` with random orthonormal factors and consecutive singular
/// values at least `gap` apart.
pub fn gapped_matrix(d: usize, p: usize, gap: f64, rng: &mut impl Rng) -> Matrix {
    let r = d.min(p);
    let mut s = vec![0.0; r];
    let mut v = rng.random_range(0.5..1.0);
    for k in (0..r).rev() {
        s[k] = v;
        v += gap + rng.random_range(0.0..0.5);
    }
    let u = orthonormal(d, r, rng);
    let q = orthonormal(p, r, rng);
    let us = Matrix::from_fn(d, r, |i, k| u[(i, k)] * s[k]);
    us.matmul_t(&q).expect("conformable")
}

pub fn loss(f: &Matrix, reference: &Subspace, m: usize) -> f64 {
    let t = grassmann::top_m_subspace(f, m).expect("valid truncation");
    grassmann::projection_distance_sq(&t.subspace, reference).expect("same ambient dim")
}

pub fn chained_grad(f: &Matrix, reference: &Subspace, m: usize, variant: Variant) -> Matrix {
    let t = grassmann::top_m_subspace(f, m).expect("valid truncation");
    let g = grassmann::grad_wrt_basis(&t.subspace, reference).expect("same ambient dim");
    let eps = svd_backprop::default_eps(&t.svd.s);
    (variant.vjp())(f, &t.svd, &g, m, eps).expect("well conditioned").grad
}

/// Entrywise `|a − n| / max(|a|, |n|, 1e-3·‖a‖_max)` against central
/// differences with step [`STEP`]. The floor keeps entries that are zero
/// up to rounding from dominating.
pub fn max_rel_error(f: &Matrix, reference: &Subspace, m: usize, variant: Variant) -> f64 {
    let analytic = chained_grad(f, reference, m, variant);
    let floor = 1e-3 * analytic.max_abs();
    let mut worst: f64 = 0.0;
    for i in 0..f.rows() {
        for j in 0..f.cols() {
            let mut plus = f.clone();
            plus[(i, j)] += STEP;
            let mut minus = f.clone();
            minus[(i, j)] -= STEP;
            let num = (loss(&plus, reference, m) - loss(&minus, reference, m)) / (2.0 * STEP);
            let a = analytic[(i, j)];
            let denom = a.abs().max(num.abs()).max(floor);
            if denom > 0.0 {
                worst = worst.max((a - num).abs() / denom);
            }
        }
    }
    worst
}

/// True when some gap among the leading `m + 1` singular values is below
/// [`MIN_GAP`], where the finite-difference oracle stops being reliable.
pub fn is_degenerate(f: &Matrix, m: usize) -> bool {
    let s = linalg::thin_svd(f).expect("finite input").s;
    let top = (m + 1).min(s.len());
    s[..top].windows(2).any(|w| w[0] - w[1] < MIN_GAP)
}

pub fn check_size(
    d: usize,
    p: usize,
    m: usize,
    instances: usize,
    seed: u64,
    variant: Variant,
    make: impl Fn(usize, usize, &mut ChaCha8Rng) -> Matrix,
) -> SizeReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((d as u64) << 32 | (p as u64) << 16 | m as u64));
    let mut skipped = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let f = make(d, p, &mut rng);
        let reference = Subspace::from_basis(orthonormal(d, m, &mut rng)).expect("orthonormal");
        if is_degenerate(&f, m) {
            skipped += 1;
            continue;
        }
        worst = worst.max(max_rel_error(&f, &reference, m, variant));
    }
    SizeReport {
        d,
        p,
        m,
        instances,
        skipped,
        max_rel_err: worst,
        passed: worst < TOLERANCE,
    }
}

/// Runs `instances` gapped random problems per size.
pub fn run(seed: u64, sizes: &[(usize, usize, usize)], instances: usize, variant: Variant) -> Vec<SizeReport> {
    sizes
        .iter()
        .map(|&(d, p, m)| {
            check_size(d, p, m, instances, seed, variant, |d, p, rng| {
                gapped_matrix(d, p, MIN_GAP, rng)
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gapped_matrix_has_gaps() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = gapped_matrix(12, 5, 0.1, &mut rng);
        let s = linalg::thin_svd(&f).unwrap().s;
        assert!(s.windows(2).all(|w| w[0] - w[1] >= 0.1 - 1e-12));
        assert!(!is_degenerate(&f, 3));
    }

    #[test]
    fn correct_variant_passes_small() {
        let r = run(1, &[(10, 4, 2)], 10, Variant::Correct);
        assert!(r[0].passed, "{:?}", r[0]);
        assert_eq!(r[0].skipped, 0);
    }

    #[test]
    fn flipped_variant_fails() {
        let r = run(1, &[(10, 4, 2)], 5, Variant::FlippedTerm3);
        assert!(!r[0].passed, "{:?}", r[0]);
    }

    #[test]
    fn repeated_spectrum_is_skipped() {
        let r = check_size(8, 3, 2, 4, 0, Variant::Correct, |d, p, rng| {
            let u = orthonormal(d, p, rng);
            let v = orthonormal(p, p, rng);
            u.matmul_t(&v).unwrap()
        });
        assert_eq!(r.skipped, 4);
        assert!(r.passed);
    }
}
