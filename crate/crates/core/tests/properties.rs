use proptest::prelude::*;

use levy_explore::exploration::{ladder_height, ExplorationTrajectory};
use levy_explore::generator_lab::{chord_slope, exp_affine_integral};
use levy_explore::measure_core::{AtomicMeasure, TestFunction, WeightFunction};
use levy_explore::path_sim::LevyPath;
use levy_explore::quadrature::Quadrature;
use levy_explore::{LaplaceExponent, LevyMechanism};

fn measure() -> impl Strategy<Value = AtomicMeasure> {
    let height = prop_oneof![9 => 0.0..10.0f64, 1 => Just(f64::INFINITY)];
    prop::collection::vec((height, 0.01..3.0f64), 0..8).prop_map(|a| AtomicMeasure::from_atoms(a).unwrap())
}

fn mechanism() -> impl Strategy<Value = LevyMechanism> {
    (1.1..1.95f64, 0.0..1.0f64, 0.0..2.0f64)
        .prop_map(|(a, a0, d)| LevyMechanism::stable(a).with_alpha0(a0).with_damping(d))
}

fn close_measures(a: &AtomicMeasure, b: &AtomicMeasure, tol: f64) -> bool {
    a.len() == b.len()
        && a.atoms().iter().zip(b.atoms()).all(|(x, y)| x.0 == y.0 && (x.1 - y.1).abs() <= tol)
}

proptest! {
    #[test]
    fn erase_is_a_semigroup(mu in measure(), a in 0.0..5.0f64, b in 0.0..5.0f64) {
        let two = mu.erase(a).erase(b);
        let one = mu.erase(a + b);
        prop_assert!(close_measures(&two, &one, 1e-12), "{two} vs {one}");
    }

    #[test]
    fn erase_cdf_is_clipped(mu in measure(), a in 0.0..5.0f64, r in 0.0..12.0f64) {
        // k_a μ([0,r]) = μ([0,r]) ∧ (⟨μ,1⟩ - a)
        let cdf = |m: &AtomicMeasure| m.total_mass() - m.tail_mass(r);
        let want = cdf(&mu).min((mu.total_mass() - a).max(0.0));
        prop_assert!((cdf(&mu.erase(a)) - want).abs() <= 1e-12);
    }

    #[test]
    fn erase_commutes_with_concat(mu in measure(), nu in measure(), frac in 0.0..1.0f64) {
        let a = frac * nu.total_mass();
        let lhs = mu.concat(&nu).erase(a);
        let rhs = mu.concat(&nu.erase(a));
        prop_assert!(close_measures(&lhs, &rhs, 1e-12), "{lhs} vs {rhs}");
    }

    #[test]
    fn concat_integrates_by_shifting(mu in measure(), nu in measure(), c0 in -1.0..1.0f64, c1 in -1.0..1.0f64) {
        let f = |x: f64| c0 + c1 * (-x).exp();
        let shift = mu.height();
        let lhs = mu.concat(&nu).integrate_fn(f, c0);
        let rhs = mu.integrate_fn(f, c0) + nu.integrate_fn(|x| f(x + shift), c0);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn partial_height_matches_tail_mass(mu in measure(), v in 0.0..11.0f64, r in 0.0..20.0f64) {
        prop_assert_eq!(v < mu.partial_height(r), mu.tail_mass(v) > r);
    }

    #[test]
    fn distance_is_a_metric(a in measure(), b in measure(), c in measure()) {
        let g = WeightFunction::default();
        let ab = a.distance(&b, &g);
        prop_assert_eq!(ab, b.distance(&a, &g));
        prop_assert_eq!(a.distance(&a, &g), 0.0);
        prop_assert!(a.distance(&c, &g) <= ab + b.distance(&c, &g) + 1e-12);
        if a != b {
            prop_assert!(ab > 0.0);
        }
    }

    #[test]
    fn distance_bounds_and_contraction(a in measure(), b in measure(), e in 0.0..6.0f64) {
        let g = WeightFunction::default();
        let d0 = AtomicMeasure::zero().distance(&a, &g);
        let m = a.total_mass();
        prop_assert!(m <= d0 + 1e-12 && d0 <= 2.0 * m + 1e-12);
        prop_assert!(a.erase(e).distance(&b.erase(e), &g) <= a.distance(&b, &g) + 1e-12);
    }

    #[test]
    fn measures_round_trip_through_json(mu in measure()) {
        let text = serde_json::to_string(&mu).unwrap();
        prop_assert_eq!(serde_json::from_str::<AtomicMeasure>(&text).unwrap(), mu);
    }

    #[test]
    fn psi_is_increasing_and_convex(m in mechanism(), x in 0.0..5.0f64, y in 0.0..5.0f64, t in 0.0..1.0f64) {
        let (px, py) = (m.psi(x).unwrap(), m.psi(y).unwrap());
        let mid = m.psi(t * x + (1.0 - t) * y).unwrap();
        prop_assert!(mid <= t * px + (1.0 - t) * py + 1e-10 * (1.0 + px.abs() + py.abs()));
        if x < y {
            prop_assert!(px <= py);
        }
        prop_assert!(m.psi_prime(x).unwrap() >= 0.0);
    }

    #[test]
    fn psi_inverse_inverts(m in mechanism(), x in 0.0..20.0f64) {
        let y = m.psi_inverse(x).unwrap();
        prop_assert!((m.psi(y).unwrap() - x).abs() <= 1e-9 * (1.0 + x));
    }

    #[test]
    fn tilts_compose(m in mechanism(), a in 0.0..2.0f64, b in 0.0..2.0f64, lam in 0.0..5.0f64) {
        let twice = m.tilt(a).unwrap().tilt(b).unwrap();
        let once = m.tilt(a + b).unwrap();
        let (x, y) = (twice.psi(lam).unwrap(), once.psi(lam).unwrap());
        prop_assert!((x - y).abs() <= 1e-9 * (1.0 + y.abs()));
        let direct = m.psi(lam + a + b).unwrap() - m.psi(a + b).unwrap();
        prop_assert!((y - direct).abs() <= 1e-9 * (1.0 + direct.abs()));
    }

    #[test]
    fn truncation_keeps_compensated_exponent_below(m in mechanism(), lam in 0.1..5.0f64) {
        // ψ_ε ≤ ψ, and ψ_ε → ψ as ε ↓ 0.
        let exact = m.psi(lam).unwrap();
        let coarse = m.truncate(1e-2).unwrap().psi(lam).unwrap();
        let fine = m.truncate(1e-4).unwrap().psi(lam).unwrap();
        prop_assert!(coarse <= fine + 1e-12 && fine <= exact + 1e-12);
        prop_assert!(exact - fine <= exact - coarse + 1e-12);
    }

    #[test]
    fn chord_slope_is_symmetric_and_bracketed(m in mechanism(), v in 0.0..3.0f64, g in 0.0..3.0f64) {
        let (pv, pg) = (m.psi(v).unwrap(), m.psi(g).unwrap());
        let d = chord_slope(&m, v, g, pg).unwrap();
        let e = chord_slope(&m, g, v, pv).unwrap();
        prop_assert!((d - e).abs() <= 1e-8 * (1.0 + d.abs()));
        // Convexity puts the chord between the end slopes.
        let (lo, hi) = (v.min(g), v.max(g));
        prop_assert!(d >= m.psi_prime(lo).unwrap() - 1e-6 && d <= m.psi_prime(hi).unwrap() + 1e-6);
    }

    #[test]
    fn affine_exponential_integral(e0 in -3.0..1.0f64, beta in -4.0..4.0f64, d in 0.0..3.0f64) {
        let q = Quadrature::with_tolerance(1e-12, 1e-15);
        let want = q.integrate(|s| (e0 - beta * s).exp(), 0.0, d).unwrap().value;
        prop_assert!((exp_affine_integral(e0, beta, d) - want).abs() <= 1e-11 * (1.0 + want));
    }
}

fn events() -> impl Strategy<Value = (f64, Vec<(f64, f64)>)> {
    (0.5..5.0f64, prop::collection::vec((0.0..3.0f64, 0.01..2.0f64), 0..40)).prop_map(|(c, mut ev)| {
        ev.sort_by(|a, b| a.0.total_cmp(&b.0));
        ev.dedup_by(|a, b| a.0 == b.0);
        (c, ev)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exploration_keeps_mass_and_height(
        (c, ev) in events(),
        mu in measure().prop_filter("finite heights", |m| m.height().is_finite()),
        ts in prop::collection::vec(0.0..3.0f64, 10),
    ) {
        let path = LevyPath::from_events(c, 3.0, &ev).unwrap();
        // explore() itself rejects any event where the mass identity fails.
        let tr = ExplorationTrajectory::explore(path, mu.clone()).unwrap();
        for t in ts {
            let stack = tr.height_at(t).unwrap();
            let ladder = ladder_height(tr.path(), &mu, t);
            prop_assert!((stack - ladder).abs() <= 1e-9, "t={t}: {stack} vs {ladder}");
            let rho = tr.rho_at(t).unwrap();
            let inf = tr.path().infimum(t);
            let want = (mu.total_mass() + inf).max(0.0) + tr.path().value(t) - inf;
            prop_assert!((rho.total_mass() - want).abs() <= 1e-9);
            prop_assert_eq!(rho.height(), stack);
        }
    }

    #[test]
    fn test_functions_integrate_linearly(mu in measure(), k in 0.0..2.0f64) {
        let f = TestFunction::constant(k);
        prop_assert!((mu.integrate(&f) - k * mu.total_mass()).abs() <= 1e-12 * (1.0 + k * mu.total_mass()));
    }
}
