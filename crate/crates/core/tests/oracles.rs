use levy_explore::generator_lab::GeneratorFunctional;
use levy_explore::measure_core::{AtomicMeasure, FunctionSpec, TestFunction};
use levy_explore::path_sim::simulate_indexed;
use levy_explore::quadrature::Quadrature;
use levy_explore::{LaplaceExponent, LevyMechanism};

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

#[test]
fn resolvent_targets_frozen() {
    let mu = AtomicMeasure::dirac(1.0, 0.5).unwrap();
    let e1 = (-1.0f64).exp();

    // f(0) > 0, λ = 1: γ = 1, target e^{-⟨μ,f⟩} - f(0) e^{-γ⟨μ,1⟩}/γ.
    let f = TestFunction::from_spec(FunctionSpec::decaying(0.2, 0.3)).unwrap();
    let gf = GeneratorFunctional::new(f, LevyMechanism::stable(1.5), 1.0).unwrap();
    assert!((gf.gamma() - 1.0).abs() < 1e-12);
    let want = (-0.5 * (0.2 + 0.3 * e1)).exp() - 0.5 * (-0.5f64).exp();
    assert!((gf.resolvent_target(&mu) - want).abs() < 1e-12);
    assert!(gf.invariant_target(&mu).is_err());

    // f(0) = 0: the target is F(μ) itself.
    let f = TestFunction::from_spec(FunctionSpec::saturating(0.3)).unwrap();
    let gf = GeneratorFunctional::new(f, LevyMechanism::stable(1.5), 2.0).unwrap();
    let want = (-0.5 * 0.3 * (1.0 - e1)).exp();
    assert!((gf.invariant_target(&mu).unwrap() - want).abs() < 1e-15);
    assert!((gf.resolvent_target(&mu) - want).abs() < 1e-15);
    // γ = λ^{1/α}.
    assert!((gf.gamma() - 2f64.powf(1.0 / 1.5)).abs() < 1e-12);
}

#[test]
fn generator_at_infinite_height() {
    let f = TestFunction::from_spec(FunctionSpec::decaying(0.2, 0.3)).unwrap();
    let gf = GeneratorFunctional::new(f, LevyMechanism::stable(1.5), 1.0).unwrap();
    let mu = AtomicMeasure::from_atoms(vec![(1.0, 0.5), (f64::INFINITY, 0.25)]).unwrap();
    let fmu = (-(0.5 * (0.2 + 0.3 * (-1.0f64).exp()) + 0.25 * 0.2)).exp();
    assert!((gf.k_of(&mu).unwrap() - fmu * 0.2f64.powf(1.5)).abs() < 1e-14);
}

#[test]
fn psi_examples_against_quadrature() {
    // ψ(λ) = α₀λ + ∫(e^{-λℓ} - 1 + λℓ) C ℓ^{-1-α} dℓ with C = α(α-1)/Γ(2-α).
    let alpha: f64 = 1.5;
    // Γ(2 - α) = Γ(1/2) = √π.
    let c = alpha * (alpha - 1.0) / std::f64::consts::PI.sqrt();
    let q = Quadrature::with_tolerance(1e-12, 1e-15);
    let g = |x: f64| {
        if x < 1e-3 {
            x * x * (0.5 - x / 6.0 + x * x / 24.0 - x * x * x / 120.0)
        } else {
            (-x).exp_m1() + x
        }
    };
    let oracle = |a0: f64, lam: f64| {
        // ℓ = s² on [0, 1] removes the endpoint singularity.
        let near = q.integrate(|s: f64| 2.0 * c * g(lam * s * s) * s.powf(-2.0 - 2.0 * alpha) * s, 0.0, 1.0).unwrap().value;
        // On [1, ∞) the polynomial part integrates in closed form.
        let poly = lam / (alpha - 1.0) - 1.0 / alpha;
        let expo = q.integrate_to_infinity(|l| (-lam * l).exp() * l.powf(-1.0 - alpha), 1.0).unwrap().value;
        let far = c * (poly + expo);
        a0 * lam + near + far
    };
    assert!((oracle(0.0, 4.0) - 8.0).abs() < 1e-8, "{}", oracle(0.0, 4.0));
    let m = LevyMechanism::stable(1.5);
    assert!((m.psi(4.0).unwrap() - 8.0).abs() < 1e-12);
    let m2 = m.clone().with_alpha0(2.0);
    assert!((m2.psi(1.0).unwrap() - 3.0).abs() < 1e-12);
    assert!((oracle(2.0, 1.0) - 3.0).abs() < 1e-8);
    assert!((m.psi_inverse(8.0).unwrap() - 4.0).abs() < 1e-10);
    let tilted = m.tilt(1.0).unwrap();
    assert!((tilted.psi(2.0).unwrap() - (3f64.powf(1.5) - 1.0)).abs() < 1e-10);
}

#[test]
fn path_statistics_match_the_exponent() {
    // Tilted stable: finite moments, so sample standard errors are meaningful.
    let mech = LevyMechanism::stable(1.5).tilt(1.0).unwrap();
    let tm = mech.truncate(1e-2).unwrap();
    let (t, n) = (1.0, 10_000u64);
    let paths: Vec<_> = (0..n).map(|i| simulate_indexed(&tm, t, 11, i).unwrap()).collect();

    let counts: Vec<f64> = paths.iter().map(|p| p.n_jumps() as f64 / t).collect();
    let (m, se) = mean_se(&counts);
    assert!((m - tm.jump_rate()).abs() < 4.0 * se, "{m} ± {se} vs {}", tm.jump_rate());

    // E[X_T] = -ψ'(0) T = -α₀ T.
    let ends: Vec<f64> = paths.iter().map(|p| p.value(t)).collect();
    let (m, se) = mean_se(&ends);
    assert!((m + mech.alpha0 * t).abs() < 4.0 * se, "{m} ± {se} vs {}", -mech.alpha0 * t);

    // E[e^{-λX_T}] = e^{T ψ_ε(λ)}.
    let lam = 0.5;
    let lt: Vec<f64> = ends.iter().map(|x| (-lam * x).exp()).collect();
    let (m, se) = mean_se(&lt);
    let want = (t * tm.psi(lam).unwrap()).exp();
    assert!((m - want).abs() < 4.0 * se, "{m} ± {se} vs {want}");
}

#[test]
fn untilted_laplace_transform() {
    let tm = LevyMechanism::stable(1.5).truncate(1e-2).unwrap();
    let lt: Vec<f64> = (0..10_000u64)
        .map(|i| (-0.5 * simulate_indexed(&tm, 1.0, 12, i).unwrap().value(1.0)).exp())
        .collect();
    let (m, se) = mean_se(&lt);
    let want = tm.psi(0.5).unwrap().exp();
    assert!((m - want).abs() < 4.0 * se, "{m} ± {se} vs {want}");
}
