use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdcl_core::gradcheck::{self, gapped_matrix, Variant};
use sdcl_core::grassmann::Subspace;
use sdcl_core::linalg::{self, Matrix};
use sdcl_core::svd_backprop::{self, BackpropError};

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn reference(d: usize, m: usize, rng: &mut ChaCha8Rng) -> Subspace {
    Subspace::from_basis(linalg::thin_svd(&random(d, m, rng)).unwrap().u).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn vjp_is_linear_in_upstream(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = gapped_matrix(14, 6, 0.1, &mut rng);
        let svd = linalg::thin_svd(&f).unwrap();
        let eps = svd_backprop::default_eps(&svd.s);
        let g1 = random(14, 3, &mut rng);
        let g2 = random(14, 3, &mut rng);
        let mut combo = g1.scale(a);
        combo.axpy(b, &g2).unwrap();
        let lhs = svd_backprop::svd_vjp(&f, &svd, &combo, 3, eps).unwrap().grad;
        let mut rhs = svd_backprop::svd_vjp(&f, &svd, &g1, 3, eps).unwrap().grad.scale(a);
        rhs.axpy(b, &svd_backprop::svd_vjp(&f, &svd, &g2, 3, eps).unwrap().grad).unwrap();
        prop_assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn chained_gradient_matches_finite_differences(seed in any::<u64>(), size in 0usize..3) {
        let (d, p, m) = gradcheck::DEFAULT_SIZES[size];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = gapped_matrix(d, p, 0.1, &mut rng);
        let r = reference(d, m, &mut rng);
        prop_assert!(gradcheck::max_rel_error(&f, &r, m, Variant::Correct) < 1e-5);
    }

    #[test]
    fn rotations_inside_the_top_block_do_not_change_the_loss(seed in any::<u64>()) {
        // dF = F·A with A = Q_m B Q_mᵀ, B antisymmetric, only rotates the
        // basis of the top-m span, so the loss is flat along it.
        let (d, p, m) = (16, 6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = gapped_matrix(d, p, 0.1, &mut rng);
        let r = reference(d, m, &mut rng);
        let svd = linalg::thin_svd(&f).unwrap();
        let qm = svd.v.column_range(0, m);
        let raw = random(m, m, &mut rng);
        let b = raw.sub(&raw.transpose()).unwrap();
        let a = qm.matmul(&b).unwrap().matmul_t(&qm).unwrap();
        let df = f.matmul(&a).unwrap();
        let grad = gradcheck::chained_grad(&f, &r, m, Variant::Correct);
        let directional = linalg::frobenius_inner(&grad, &df).unwrap();
        prop_assert!(directional.abs() < 1e-6, "analytic {}", directional);
        let h = 1e-5;
        let mut plus = f.clone();
        plus.axpy(h, &df).unwrap();
        let mut minus = f.clone();
        minus.axpy(-h, &df).unwrap();
        let num = (gradcheck::loss(&plus, &r, m) - gradcheck::loss(&minus, &r, m)) / (2.0 * h);
        prop_assert!(num.abs() < 1e-6, "numeric {}", num);
    }
}

#[test]
fn repeated_top_singular_values_are_counted_and_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let u = linalg::thin_svd(&random(10, 4, &mut rng)).unwrap().u;
    let v = linalg::thin_svd(&random(4, 4, &mut rng)).unwrap().u;
    let s = [2.0, 2.0, 1.0, 0.5];
    let f = Matrix::from_fn(10, 4, |i, k| u[(i, k)] * s[k]).matmul_t(&v).unwrap();
    let svd = linalg::thin_svd(&f).unwrap();
    let g = random(10, 3, &mut rng);
    let out = svd_backprop::svd_vjp(&f, &svd, &g, 3, svd_backprop::default_eps(&svd.s)).unwrap();
    assert!(out.degenerate_pairs > 0);
    assert!(out.grad.is_finite());
}

#[test]
fn singular_top_block_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let f = random(8, 2, &mut rng).matmul_t(&random(5, 2, &mut rng)).unwrap();
    let svd = linalg::thin_svd(&f).unwrap();
    let err = svd_backprop::svd_vjp(&f, &svd, &Matrix::zeros(8, 3), 3, 1e-6).unwrap_err();
    assert!(matches!(err, BackpropError::IllConditioned { index: 2, .. }));
}

#[test]
fn scaling_direction_has_zero_derivative() {
    // Scaling F does not move the top-m span, so ⟨∇F, F⟩ = 0.
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let f = gapped_matrix(12, 5, 0.1, &mut rng);
    let r = reference(12, 2, &mut rng);
    let g = gradcheck::chained_grad(&f, &r, 2, Variant::Correct);
    assert!(linalg::frobenius_inner(&g, &f).unwrap().abs() < 1e-10);
}
