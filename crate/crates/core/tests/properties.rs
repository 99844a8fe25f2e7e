use mde_core::{ensemble, lab, linalg, mde, CMat, ModelSpec, SelfEnergy, SolverOptions, SpectralPoint, SymmetryClass, C64};
use proptest::prelude::*;

fn m_sc(z: C64) -> C64 {
    let two = C64::new(2.0, 0.0);
    (-z + (z - two).sqrt() * (z + two).sqrt()) * 0.5
}

fn diagonal_model(values: &[f64], scale: f64) -> ModelSpec {
    let n = values.len();
    let a = CMat::from_fn(n, n, |i, j| C64::new(if i == j { values[i] } else { 0.0 }, 0.0));
    let s = SelfEnergy::flat(n, SymmetryClass::ComplexHermitian, scale);
    ModelSpec::new("diag", SymmetryClass::ComplexHermitian, a, s).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn flat_model_matches_quadratic_root(tau in -3.0f64..3.0, eta in 1e-3f64..2.0) {
        let m = ModelSpec::flat(6, SymmetryClass::ComplexHermitian, 1.0);
        let sol = mde::solve_at(&m, SpectralPoint::new(tau, eta), &SolverOptions::default()).unwrap();
        prop_assert!((sol.avg() - m_sc(C64::new(tau, eta))).norm() < 1e-9);
    }

    #[test]
    fn scaled_flat_model_rescales(tau in -4.0f64..4.0, eta in 1e-2f64..2.0, s in 0.5f64..2.0) {
        let m = ModelSpec::flat(4, SymmetryClass::ComplexHermitian, s);
        let sol = mde::solve_at(&m, SpectralPoint::new(tau, eta), &SolverOptions::default()).unwrap();
        let expected = m_sc(C64::new(tau / s, eta / s)) / s;
        prop_assert!((sol.avg() - expected).norm() < 1e-9);
    }

    #[test]
    fn solution_has_positive_imaginary_part_and_small_residual(
        values in prop::collection::vec(-2.0f64..2.0, 2..6),
        tau in -3.0f64..3.0,
        eta in 1e-2f64..1.0,
    ) {
        let m = diagonal_model(&values, 1.0);
        let sol = mde::solve_at(&m, SpectralPoint::new(tau, eta), &SolverOptions::default()).unwrap();
        let im = linalg::herm_eigenvalues(&linalg::im_part(&sol.m));
        prop_assert!(im[0] > 0.0);
        prop_assert!(mde::residual(&m, C64::new(tau, eta), &sol.m) < 1e-9);
    }

    #[test]
    fn shifting_a_shifts_the_spectral_parameter(
        values in prop::collection::vec(-1.5f64..1.5, 2..5),
        shift in -1.0f64..1.0,
        tau in -2.5f64..2.5,
        eta in 5e-2f64..1.0,
    ) {
        let o = SolverOptions::default();
        let base = diagonal_model(&values, 1.0);
        let moved: Vec<f64> = values.iter().map(|v| v + shift).collect();
        let shifted = diagonal_model(&moved, 1.0);
        let a = mde::solve_at(&shifted, SpectralPoint::new(tau + shift, eta), &o).unwrap();
        let b = mde::solve_at(&base, SpectralPoint::new(tau, eta), &o).unwrap();
        prop_assert!(linalg::hs_norm(&(&a.m - &b.m)) < 1e-8);
    }

    #[test]
    fn ks_distance_is_a_symmetric_bounded_metric(
        a in prop::collection::vec(-5.0f64..5.0, 1..40),
        b in prop::collection::vec(-5.0f64..5.0, 1..40),
    ) {
        let ab = lab::ks_distance(&a, &b).unwrap();
        let ba = lab::ks_distance(&b, &a).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - ba).abs() < 1e-15);
        prop_assert_eq!(lab::ks_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn quantile_stays_within_sample_range(v in prop::collection::vec(-10.0f64..10.0, 1..50), q in 0.0f64..=1.0) {
        let x = lab::quantile(&v, q);
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo <= x && x <= hi);
    }

    #[test]
    fn sampled_matrices_are_hermitian_with_sorted_spectrum(n in 2usize..8, seed in any::<u64>(), real in any::<bool>()) {
        let class = if real { SymmetryClass::RealSymmetric } else { SymmetryClass::ComplexHermitian };
        let m = ModelSpec::two_band(n, class, 1.0);
        let h = ensemble::sample(&m, seed).unwrap();
        prop_assert!(linalg::hs_norm(&(&h - h.adjoint())) < 1e-14);
        if real {
            prop_assert!(h.iter().all(|v| v.im == 0.0));
        }
        let ev = ensemble::eigenvalues(&h, class);
        prop_assert!(ev.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(ensemble::sample(&m, seed).unwrap(), h);
    }
}
