use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdcl_core::gradcheck::gapped_matrix;
use sdcl_core::grassmann::{self, Subspace};
use sdcl_core::linalg::{self, Matrix};

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn orthonormal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    linalg::thin_svd(&random(rows, cols, rng)).unwrap().u
}

fn subspace(d: usize, m: usize, rng: &mut ChaCha8Rng) -> Subspace {
    Subspace::from_basis(orthonormal(d, m, rng)).unwrap()
}

fn dims() -> impl Strategy<Value = (usize, usize)> {
    (1usize..6).prop_flat_map(|m| (Just(m), m..24)).prop_map(|(m, d)| (d, m))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn distance_ignores_choice_of_basis((d, m) in dims(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p1 = subspace(d, m, &mut rng);
        let p2 = subspace(d, m, &mut rng);
        let r1 = orthonormal(m, m, &mut rng);
        let r2 = orthonormal(m, m, &mut rng);
        let q1 = Subspace::from_basis(p1.basis().matmul(&r1).unwrap()).unwrap();
        let q2 = Subspace::from_basis(p2.basis().matmul(&r2).unwrap()).unwrap();
        let a = grassmann::projection_distance_sq(&p1, &p2).unwrap();
        let b = grassmann::projection_distance_sq(&q1, &q2).unwrap();
        prop_assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn distance_is_symmetric_and_bounded((d, m) in dims(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p1 = subspace(d, m, &mut rng);
        let p2 = subspace(d, m, &mut rng);
        let a = grassmann::projection_distance_sq(&p1, &p2).unwrap();
        let b = grassmann::projection_distance_sq(&p2, &p1).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=2.0 * m as f64).contains(&a));
    }

    #[test]
    fn distance_matches_principal_angles((d, m) in dims(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p1 = subspace(d, m, &mut rng);
        let p2 = subspace(d, m, &mut rng);
        let a = grassmann::projection_distance_sq(&p1, &p2).unwrap();
        let b = grassmann::principal_angle_distance_oracle(&p1, &p2).unwrap();
        prop_assert!((a - b).abs() < 1e-8, "{} vs {}", a, b);
    }

    #[test]
    fn distance_matches_projector_formula((d, m) in dims(), seed in any::<u64>()) {
        // ‖P₁P₁ᵀ − P₂P₂ᵀ‖²_F
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p1 = subspace(d, m, &mut rng);
        let p2 = subspace(d, m, &mut rng);
        let diff = p1.projector().sub(&p2.projector()).unwrap();
        let a = grassmann::projection_distance_sq(&p1, &p2).unwrap();
        prop_assert!((a - linalg::frobenius_norm_sq(&diff)).abs() < 1e-10);
    }

    #[test]
    fn construction_ignores_positive_scale(seed in any::<u64>(), c in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = gapped_matrix(15, 6, 0.1, &mut rng);
        let a = grassmann::top_m_subspace(&f, 3).unwrap();
        let b = grassmann::top_m_subspace(&f.scale(c), 3).unwrap();
        prop_assert!(grassmann::projection_distance_sq(&a.subspace, &b.subspace).unwrap() < 1e-8);
    }

    #[test]
    fn construction_ignores_column_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = gapped_matrix(15, 6, 0.1, &mut rng);
        let mut perm: Vec<usize> = (0..6).collect();
        perm.shuffle(&mut rng);
        let a = grassmann::top_m_subspace(&f, 3).unwrap();
        let b = grassmann::top_m_subspace(&f.select_columns(&perm), 3).unwrap();
        prop_assert!(grassmann::projection_distance_sq(&a.subspace, &b.subspace).unwrap() < 1e-8);
    }

    #[test]
    fn basis_gradient_matches_finite_differences((d, m) in dims(), seed in any::<u64>()) {
        // d² as a function of an unconstrained d×m matrix X: 2m − 2‖P_oldᵀX‖².
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let new = subspace(d, m, &mut rng);
        let old = subspace(d, m, &mut rng);
        let g = grassmann::grad_wrt_basis(&new, &old).unwrap();
        let f = |x: &Matrix| 2.0 * m as f64 - 2.0 * linalg::frobenius_norm_sq(&old.basis().t_matmul(x).unwrap());
        let h = 1e-5;
        for i in 0..d {
            for j in 0..m {
                let mut plus = new.basis().clone();
                plus[(i, j)] += h;
                let mut minus = new.basis().clone();
                minus[(i, j)] -= h;
                let num = (f(&plus) - f(&minus)) / (2.0 * h);
                let denom = g[(i, j)].abs().max(num.abs()).max(1e-3);
                prop_assert!((g[(i, j)] - num).abs() / denom < 1e-6);
            }
        }
    }
}
