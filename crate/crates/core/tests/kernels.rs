use deconforge_core::kernels::{mix_cdf, mix_inv_cdf, mix_pdf, CenteredPairAtom, Kernel, Support, TruncNormAtom};
use deconforge_core::normal;
use deconforge_core::quadrature::integrate_with_breaks;
use proptest::prelude::*;

#[path = "support/criteria.rs"]
mod criteria;

#[test]
fn pair_atom_locations_and_mean() {
    let a = CenteredPairAtom::new(0.3, 2.0, 1.0, 1.0).unwrap();
    let (m1, m2) = a.locations();
    let norm = 0.58f64.sqrt();
    assert!((m1 - 2.0 * 0.7 / norm).abs() < 1e-12);
    assert!((m2 + 2.0 * 0.3 / norm).abs() < 1e-12);
    assert!((m1 - 1.8383).abs() < 1e-4 && (m2 + 0.7878).abs() < 1e-4);
    let mean = integrate_with_breaks(|e| e * a.pdf(e), -40.0, 40.0, &[m1, m2], 1e-13);
    assert!(mean.abs() < 1e-9, "{mean}");
}

#[test]
fn symmetric_pair_collapses_to_one_normal() {
    for var in [0.1, 1.0, 4.0] {
        let a = CenteredPairAtom::new(0.5, 0.0, var, var).unwrap();
        for k in -40..=40 {
            let e = k as f64 * 0.2;
            let want = normal::pdf(e / var.sqrt()) / var.sqrt();
            assert!((a.pdf(e) - want).abs() < 1e-14 * want.max(1e-300) + 1e-300, "{e}");
            assert!((a.cdf(e) - normal::cdf(e / var.sqrt())).abs() < 1e-14);
        }
    }
}

#[test]
fn half_normal_at_lower_bound() {
    let a = TruncNormAtom::new(0.0, 1.0, Support::default()).unwrap();
    let oracle = normal::pdf(0.0) / (normal::cdf(10.0) - normal::cdf(0.0));
    assert!((a.pdf(0.0) - oracle).abs() < 1e-14);
    assert!((a.pdf(0.0) - 0.797_884_5).abs() < 1e-7);
    let centered = TruncNormAtom::new(5.0, 1.0, Support::default()).unwrap();
    assert!((centered.cdf(5.0) - 0.5).abs() < 1e-15);
}

#[test]
fn equal_atoms_mix_to_one_atom() {
    let a = TruncNormAtom::new(3.0, 0.5, Support::default()).unwrap();
    let atoms = [a, a];
    for k in 0..=100 {
        let x = k as f64 * 0.1;
        assert!((mix_pdf(x, &atoms, &[0.3, 0.7]).unwrap() - a.pdf(x)).abs() < 1e-15);
        assert!((mix_cdf(x, &atoms, &[0.3, 0.7]).unwrap() - a.cdf(x)).abs() < 1e-15);
    }
}

#[test]
fn simulation_mixture_reaches_one() {
    let s = Support::default();
    let atoms: Vec<TruncNormAtom> = [1.5, 3.0, 5.0].iter().map(|&m| TruncNormAtom::new(m, 0.5625, s).unwrap()).collect();
    let w = [0.5, 0.2, 0.3];
    assert!((mix_cdf(10.0, &atoms, &w).unwrap() - 1.0).abs() < 1e-10);
    let total = integrate_with_breaks(|x| mix_pdf(x, &atoms, &w).unwrap(), 0.0, 10.0, &[1.5, 3.0, 5.0], 1e-13);
    assert!((total - 1.0).abs() < 1e-10);
}

#[test]
fn normalization_and_mean_zero_suites() {
    for c in [criteria::tn_normalization(), criteria::pair_normalization_and_mean(), criteria::cdf_round_trips()] {
        assert!(c.passed, "{c}");
    }
}

proptest! {
    #[test]
    fn tn_round_trip(mu in -3.0f64..13.0, log_var in (0.01f64).ln()..(25.0f64).ln(), u in 1e-9f64..1.0) {
        let a = TruncNormAtom::new(mu, log_var.exp(), Support::default()).unwrap();
        let q = a.inv_cdf(u);
        prop_assume!(!q.clamped);
        prop_assert!((a.cdf(q.value) - u).abs() <= 1e-7);
    }

    #[test]
    fn tn_cdf_is_monotone(mu in -3.0f64..13.0, var in 0.01f64..25.0, x in 0.0f64..10.0, dx in 0.0f64..1.0) {
        let a = TruncNormAtom::new(mu, var, Support::default()).unwrap();
        prop_assert!(a.cdf(x) <= a.cdf((x + dx).min(10.0)));
    }

    #[test]
    fn pair_mixture_round_trip(
        p in proptest::collection::vec(0.0f64..1.0, 2),
        mu in proptest::collection::vec(-3.0f64..3.0, 2),
        var in proptest::collection::vec(0.05f64..5.0, 4),
        w0 in 0.05f64..0.95,
        u in 1e-6f64..0.999_999,
    ) {
        let atoms = [
            CenteredPairAtom::new(p[0], mu[0], var[0], var[1]).unwrap(),
            CenteredPairAtom::new(p[1], mu[1], var[2], var[3]).unwrap(),
        ];
        let w = [w0, 1.0 - w0];
        let q = mix_inv_cdf(u, &atoms, &w).unwrap();
        prop_assert!((mix_cdf(q.value, &atoms, &w).unwrap() - u).abs() <= 1e-7);
    }

    #[test]
    fn pair_atoms_have_mean_zero(p in 0.0f64..1.0, mu in -4.0f64..4.0, v1 in 0.01f64..10.0, v2 in 0.01f64..10.0) {
        let a = CenteredPairAtom::new(p, mu, v1, v2).unwrap();
        let (m1, m2) = a.locations();
        let reach = m1.abs().max(m2.abs()) + 40.0 * v1.max(v2).sqrt();
        let mean = integrate_with_breaks(|e| e * a.pdf(e), -reach, reach, &[m1, m2], 1e-12);
        prop_assert!(mean.abs() <= 1e-8);
        prop_assert!(a.mean().abs() <= 1e-12);
    }
}
