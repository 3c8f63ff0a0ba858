//! The pair of measures `(μ_a, ν_a)` built from a Poisson point measure with
//! intensity `dx ℓπ(dℓ) du` on `[0,a] × (δ,∞) × [0,1]`, and the check of
//! `N[∫_0^σ F(ρ_t, η_t) dt] = ∫_0^∞ da e^{-α₀ a} E[F(μ_a, ν_a)]` for
//! `F(μ,ν) = 1{H^μ ≤ A} e^{-⟨μ,f⟩ - γ⟨ν,1⟩}`.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{config, Error, Result};
use crate::generator_lab::{
    chord_slope, excursion_integrals, integrate_fallible, mean_se, EstimatorReport, ExcursionSample,
    ExcursionWindow,
};
use crate::levy_model::{size_biased_tail, LaplaceExponent, LevyMechanism, TailSampler, TruncatedMechanism};
use crate::measure_core::{AtomicMeasure, TestFunction};
use crate::quadrature::{gauss_legendre, pairwise_sum, Quadrature};
use crate::rng::{stream, subseed};

/// Default bound on the expected mass lost to the cutoff, `a ∫_0^δ ℓ²π(dℓ)/2`.
pub const DROPPED_MASS_BOUND: f64 = 0.05;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MarkedPoissonConfig {
    pub a: f64,
    pub mech: LevyMechanism,
    pub delta: f64,
    pub seed: u64,
    #[serde(default = "default_bound")]
    pub dropped_bound: f64,
}

fn default_bound() -> f64 {
    DROPPED_MASS_BOUND
}

impl MarkedPoissonConfig {
    pub fn new(a: f64, mech: LevyMechanism, delta: f64, seed: u64) -> Self {
        Self { a, mech, delta, seed, dropped_bound: DROPPED_MASS_BOUND }
    }

    /// `a ∫_0^δ ℓ²π(dℓ)/2`.
    pub fn dropped_mass(&self) -> Result<f64> {
        Ok(self.a * self.mech.moment(2.0, 0.0, self.delta)? / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.a.is_finite()) {
            return Err(config("a", "must be positive"));
        }
        if !(self.delta > 0.0) {
            return Err(config("delta", "must be positive"));
        }
        let dropped = self.dropped_mass()?;
        if !(dropped <= self.dropped_bound) {
            return Err(config(
                "delta",
                format!("expected dropped mass {dropped:e} exceeds the bound {:e}", self.dropped_bound),
            ));
        }
        Ok(())
    }
}

/// One point `(x, ℓ, u)` of the marked Poisson measure.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Mark {
    pub x: f64,
    pub ell: f64,
    pub u: f64,
}

/// Draws the marks for any height horizon `a`.
#[derive(Clone, Debug)]
pub struct MarkSampler {
    delta: f64,
    rate: f64,
    tail: TailSampler,
}

impl MarkSampler {
    pub fn new(mech: &LevyMechanism, delta: f64) -> Result<Self> {
        let (rate, tail) = size_biased_tail(mech, delta)?;
        Ok(Self { delta, rate, tail })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// `∫_{(δ,∞)} ℓ π(dℓ)`, the number of marks per unit height.
    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn marks<R: Rng + ?Sized>(&self, a: f64, rng: &mut R) -> Vec<Mark> {
        let mean = a * self.rate;
        let n = if mean > 0.0 {
            Poisson::new(mean).expect("finite positive mean").sample(rng) as usize
        } else {
            0
        };
        (0..n)
            .map(|_| {
                let x = a * rng.random::<f64>();
                let ell = self.tail.sample(rng);
                let u = rng.random::<f64>();
                Mark { x, ell, u }
            })
            .collect()
    }

    /// `μ_a = Σ uℓ δ_x`, `ν_a = Σ (1-u)ℓ δ_x`.
    pub fn pair<R: Rng + ?Sized>(&self, a: f64, rng: &mut R) -> (AtomicMeasure, AtomicMeasure) {
        let marks = self.marks(a, rng);
        let mu = marks.iter().map(|m| (m.x, m.u * m.ell)).collect();
        let nu = marks.iter().map(|m| (m.x, (1.0 - m.u) * m.ell)).collect();
        (
            AtomicMeasure::from_atoms(mu).expect("finite marks"),
            AtomicMeasure::from_atoms(nu).expect("finite marks"),
        )
    }

    /// `e^{-⟨μ_a,f⟩ - γ⟨ν_a,1⟩}` for one draw, without building the measures.
    pub fn exponential_functional<R: Rng + ?Sized>(&self, a: f64, f: &TestFunction, gamma: f64, rng: &mut R) -> f64 {
        let s: f64 = self
            .marks(a, rng)
            .iter()
            .map(|m| m.ell * (m.u * f.eval(m.x) + (1.0 - m.u) * gamma))
            .sum();
        (-s).exp()
    }
}

/// Draws `(μ_a, ν_a)` from stream 0 of the configured seed.
pub fn sample_pair(cfg: &MarkedPoissonConfig) -> Result<(AtomicMeasure, AtomicMeasure)> {
    cfg.validate()?;
    let sampler = MarkSampler::new(&cfg.mech, cfg.delta)?;
    Ok(sampler.pair(cfg.a, &mut stream(cfg.seed, 0)))
}

/// Sample means of `⟨μ_a,1⟩` and `⟨ν_a,1⟩` against `a ∫_{(δ,∞)} ℓ²π(dℓ)/2`.
pub fn campbell_check(cfg: &MarkedPoissonConfig, n: usize) -> Result<[EstimatorReport; 2]> {
    cfg.validate()?;
    let sampler = MarkSampler::new(&cfg.mech, cfg.delta)?;
    let target = cfg.a * cfg.mech.moment(2.0, cfg.delta, f64::INFINITY)? / 2.0;
    if !target.is_finite() {
        return Err(Error::Precondition("int l^2 pi(dl) is infinite on (delta, inf); the first moments do not exist".into()));
    }
    let draws: Vec<[f64; 2]> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (mu, nu) = sampler.pair(cfg.a, &mut stream(cfg.seed, i as u64));
            [mu.total_mass(), nu.total_mass()]
        })
        .collect();
    let params = json!({ "config": cfg, "n_draws": n });
    let report = |k: usize, name: &str| {
        let xs: Vec<f64> = draws.iter().map(|d| d[k]).collect();
        let (m, se) = mean_se(&xs);
        EstimatorReport::new(name, params.clone(), m, se, target, 0.0)
    };
    Ok([report(0, "campbell-mu"), report(1, "campbell-nu")])
}

/// Two-sample Kolmogorov–Smirnov statistic and its asymptotic p-value.
pub fn ks_two_sample(x: &[f64], y: &[f64]) -> (f64, f64) {
    let mut a = x.to_vec();
    let mut b = y.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0_f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let en = (n * m / (n + m)).sqrt();
    let lam = (en + 0.12 + 0.11 / en) * d;
    (d, kolmogorov_tail(lam))
}

/// `P(K > λ)` for the Kolmogorov distribution.
fn kolmogorov_tail(lam: f64) -> f64 {
    if lam < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = 2.0 * (-2.0 * kf * kf * lam * lam).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, Serialize, PartialEq)]
pub struct KsOutcome {
    pub statistic: f64,
    pub p_value: f64,
    pub level: f64,
    pub pass: bool,
}

/// Swapping `u ↦ 1-u` exchanges the laws of `⟨μ_a,1⟩` and `⟨ν_a,1⟩`: KS test
/// on two independent halves of `2n` draws.
pub fn exchangeability_check(cfg: &MarkedPoissonConfig, n: usize, level: f64) -> Result<KsOutcome> {
    cfg.validate()?;
    let sampler = MarkSampler::new(&cfg.mech, cfg.delta)?;
    let mass = |i: usize, which: usize| {
        let (mu, nu) = sampler.pair(cfg.a, &mut stream(cfg.seed, i as u64));
        if which == 0 {
            mu.total_mass()
        } else {
            nu.total_mass()
        }
    };
    let x: Vec<f64> = (0..n).into_par_iter().map(|i| mass(i, 0)).collect();
    let y: Vec<f64> = (n..2 * n).into_par_iter().map(|i| mass(i, 1)).collect();
    let (statistic, p_value) = ks_two_sample(&x, &y);
    Ok(KsOutcome { statistic, p_value, level, pass: p_value > level })
}

/// `Var⟨μ_a,1⟩` against `a ∫_{(δ,∞)} ℓ³π(dℓ)/3` at each `a`.
pub fn variance_linearity(mech: &LevyMechanism, delta: f64, heights: &[f64], n: usize, seed: u64) -> Result<Vec<EstimatorReport>> {
    let sampler = MarkSampler::new(mech, delta)?;
    let m3 = mech.moment(3.0, delta, f64::INFINITY)?;
    if !m3.is_finite() {
        return Err(Error::Precondition("int l^3 pi(dl) is infinite; the variance does not exist".into()));
    }
    heights
        .iter()
        .enumerate()
        .map(|(k, &a)| {
            let s = subseed(seed, k as u64);
            let xs: Vec<f64> = (0..n)
                .into_par_iter()
                .map(|i| sampler.pair(a, &mut stream(s, i as u64)).0.total_mass())
                .collect();
            let (m, _) = mean_se(&xs);
            let sq: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
            let (var, se) = mean_se(&sq);
            let var = var * n as f64 / (n - 1) as f64;
            let params = json!({ "mechanism": mech, "delta": delta, "a": a, "n_draws": n, "seed": seed });
            Ok(EstimatorReport::new("variance-linearity", params, var, se, a * m3 / 3.0, 0.0))
        })
        .collect()
}

/// `∫_0^A exp(-∫_0^a D(f(x)) dx) da` with `D(v) = (ψ(v) - ψ(γ))/(v - γ)`.
pub fn continuum_rhs<E: LaplaceExponent + ?Sized>(psi: &E, f: &TestFunction, gamma: f64, cap: f64, quad: &Quadrature) -> Result<f64> {
    let psi_gamma = psi.psi(gamma)?;
    let d = |x: f64| chord_slope(psi, f.eval(x), gamma, psi_gamma);
    let cells = cap.ceil().max(1.0) as usize;
    let h = cap / cells as f64;
    let mut g0 = 0.0;
    let mut parts = Vec::with_capacity(cells);
    for k in 0..cells {
        let (a0, a1) = (k as f64 * h, (k + 1) as f64 * h);
        parts.push(integrate_fallible(quad, |a| Ok((-(g0 + integrate_fallible(quad, d, a0, a)?)).exp()), a0, a1)?);
        g0 += integrate_fallible(quad, d, a0, a1)?;
    }
    Ok(pairwise_sum(&parts))
}

/// `exp(-∫_0^a D(f(x)) dx)` at each node, for the Gauss–Legendre rule.
fn profile_at<E: LaplaceExponent + ?Sized>(psi: &E, f: &TestFunction, gamma: f64, nodes: &[f64], quad: &Quadrature) -> Result<Vec<f64>> {
    let psi_gamma = psi.psi(gamma)?;
    let d = |x: f64| chord_slope(psi, f.eval(x), gamma, psi_gamma);
    nodes.iter().map(|&a| Ok((-integrate_fallible(quad, d, 0.0, a)?).exp())).collect()
}

/// The exact excursion value for the simulated tree: an individual at level
/// `n` (height `n/c`) sees its `n` ancestors' jumps split uniformly, so
/// `N_ε[∫_0^σ F dt] = (1/c) Σ_{1≤n≤Ac} Π_{j≤n} (1 - D_ε(f(j/c))/c)`.
pub fn discrete_lhs(tm: &TruncatedMechanism, f: &TestFunction, gamma: f64, cap: f64) -> Result<f64> {
    let c = tm.drift_rate();
    let psi_gamma = tm.psi(gamma)?;
    let mut prod = 1.0;
    let mut terms = Vec::new();
    let mut n = 1u64;
    while n as f64 / c <= cap {
        prod *= 1.0 - chord_slope(tm, f.eval(n as f64 / c), gamma, psi_gamma)? / c;
        terms.push(prod);
        n += 1;
        if prod <= 0.0 {
            break;
        }
    }
    Ok(pairwise_sum(&terms) / c)
}

/// Settings of the marked-measure side of the representation check.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct MarkedSide {
    pub delta: f64,
    pub n_quad: usize,
    pub draws_per_node: usize,
}

impl Default for MarkedSide {
    fn default() -> Self {
        Self { delta: 1e-5, n_quad: 32, draws_per_node: 4000 }
    }
}

/// Both Poisson-representation reports: the excursion side against the
/// marked-measure side, and the marked-measure sampler against its closed form.
#[derive(Clone, Debug, Serialize)]
pub struct RepresentationOutcome {
    pub identity: EstimatorReport,
    pub sampler: EstimatorReport,
}

/// `F(μ,ν) = 1{H^μ ≤ A} e^{-⟨μ,f⟩ - γ⟨ν,1⟩}`. The excursion side is estimated
/// from `sample` (see [`excursion_integrals`]); the marked side by an
/// `n_quad`-point Gauss–Legendre rule over `a ∈ [0, A]`, sampling
/// `(μ_a, ν_a)` at each node.
///
/// Budget: `|discrete - continuum| + |δ-cutoff effect| + |quadrature error|`,
/// the three ways the two expectations differ.
pub fn representation_from_sample(
    tm: &TruncatedMechanism,
    f: &TestFunction,
    sample: &ExcursionSample,
    side: MarkedSide,
    seed: u64,
) -> Result<RepresentationOutcome> {
    let cap = sample.height_cap;
    let gamma = sample.gamma;
    if !(cap > 0.0 && cap.is_finite()) {
        return Err(Error::Precondition("F needs a finite height cap A".into()));
    }
    if side.n_quad == 0 || side.draws_per_node < 2 {
        return Err(config("marked", "needs quadrature nodes and at least 2 draws per node"));
    }
    let mech = tm.mechanism();
    let quad = Quadrature::with_tolerance(1e-11, 1e-14);
    let sampler = MarkSampler::new(mech, side.delta)?;
    let marked = mech.truncate(side.delta)?;

    let (x, w) = gauss_legendre(side.n_quad);
    let nodes: Vec<f64> = x.iter().map(|t| 0.5 * cap * (t + 1.0)).collect();
    let weights: Vec<f64> = w.iter().map(|w| 0.5 * cap * w).collect();
    let node_stats: Vec<(f64, f64)> = nodes
        .par_iter()
        .enumerate()
        .map(|(k, &a)| {
            let s = subseed(seed, k as u64);
            let xs: Vec<f64> = (0..side.draws_per_node)
                .map(|i| sampler.exponential_functional(a, f, gamma, &mut stream(s, i as u64)))
                .collect();
            mean_se(&xs)
        })
        .collect();
    let alpha0 = mech.alpha0;
    let rhs_terms: Vec<f64> = (0..nodes.len())
        .map(|k| weights[k] * (-alpha0 * nodes[k]).exp() * node_stats[k].0)
        .collect();
    let rhs_var: Vec<f64> = (0..nodes.len())
        .map(|k| (weights[k] * (-alpha0 * nodes[k]).exp() * node_stats[k].1).powi(2))
        .collect();
    let rhs = pairwise_sum(&rhs_terms);
    let se_rhs = pairwise_sum(&rhs_var).sqrt();

    // Closed forms. The δ-sampler integrates D_δ - α₀ and the e^{-α₀a}
    // weight restores D_δ.
    let profile = profile_at(&marked, f, gamma, &nodes, &quad)?;
    let rhs_delta_gl = pairwise_sum(&(0..nodes.len()).map(|k| weights[k] * profile[k]).collect::<Vec<_>>());
    let rhs_delta = continuum_rhs(&marked, f, gamma, cap, &quad)?;
    let rhs_limit = continuum_rhs(mech, f, gamma, cap, &quad)?;
    let lhs_discrete = discrete_lhs(tm, f, gamma, cap)?;

    let lhs_col = sample.column(2);
    let (lhs, se_lhs) = mean_se(&lhs_col);
    let budget_parts = [
        (lhs_discrete - rhs_limit).abs(),
        (rhs_delta - rhs_limit).abs(),
        (rhs_delta_gl - rhs_delta).abs(),
    ];
    let budget: f64 = budget_parts.iter().sum();
    let params = json!({
        "mechanism": mech,
        "epsilon": tm.epsilon(),
        "drift_rate": tm.drift_rate(),
        "f": f.spec(),
        "gamma": gamma,
        "height_cap": cap,
        "window": sample.window,
        "excursions": sample.stats.excursions,
        "censored": sample.stats.censored,
        "excursion_seed": sample.seed,
        "marked": side,
        "marked_seed": seed,
    });
    let identity = EstimatorReport::new("poisson-representation", params.clone(), lhs - rhs, se_lhs.hypot(se_rhs), 0.0, budget)
        .with_details(json!({
            "lhs": lhs,
            "se_lhs": se_lhs,
            "rhs": rhs,
            "se_rhs": se_rhs,
            "lhs_exact_truncated": lhs_discrete,
            "rhs_exact_cutoff": rhs_delta,
            "rhs_limit": rhs_limit,
            "budget_discrete": budget_parts[0],
            "budget_cutoff": budget_parts[1],
            "budget_quadrature": budget_parts[2],
        }));
    let sampler_report = EstimatorReport::new("poisson-sampler", params, rhs, se_rhs, rhs_delta_gl, 0.0);
    Ok(RepresentationOutcome { identity, sampler: sampler_report })
}

/// Harvests excursions and runs [`representation_from_sample`].
pub fn representation_test(
    tm: &TruncatedMechanism,
    f: &TestFunction,
    gamma: f64,
    cap: f64,
    window: ExcursionWindow,
    side: MarkedSide,
    seed: u64,
) -> Result<RepresentationOutcome> {
    if !(cap > 0.0 && cap.is_finite()) {
        return Err(Error::Precondition("F needs a finite height cap A".into()));
    }
    let sample = excursion_integrals(tm, f, gamma, cap, window, seed)?;
    representation_from_sample(tm, f, &sample, side, subseed(seed, 0x9e37))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure_core::FunctionSpec;

    fn tilted() -> LevyMechanism {
        LevyMechanism::stable(1.5).tilt(1.0).unwrap()
    }

    #[test]
    fn marks_split_masses_exactly() {
        let s = MarkSampler::new(&tilted(), 1e-3).unwrap();
        let mut rng = stream(1, 1);
        for _ in 0..50 {
            for m in s.marks(1.0, &mut rng) {
                assert!(m.ell > 1e-3 && (0.0..=1.0).contains(&m.x) && (0.0..1.0).contains(&m.u));
                assert!((m.u * m.ell + (1.0 - m.u) * m.ell - m.ell).abs() <= 1e-15 * m.ell);
            }
        }
        let (mu, nu) = s.pair(1.0, &mut rng);
        assert_eq!(mu.len(), nu.len());
        for (p, q) in mu.atoms().iter().zip(nu.atoms()) {
            assert_eq!(p.0, q.0);
        }
    }

    #[test]
    fn small_heights_give_empty_measures() {
        let s = MarkSampler::new(&tilted(), 1e-3).unwrap();
        let mut rng = stream(2, 0);
        let empty = (0..1000).filter(|_| s.marks(1e-6, &mut rng).is_empty()).count();
        assert!(empty >= 990);
        assert!(s.marks(0.0, &mut rng).is_empty());
    }

    #[test]
    fn dropped_mass_bound_is_enforced() {
        let mut cfg = MarkedPoissonConfig::new(1.0, LevyMechanism::stable(1.5), 0.5, 3);
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
        cfg.delta = 1e-4;
        cfg.validate().unwrap();
        let (mu, nu) = sample_pair(&cfg).unwrap();
        assert_eq!(mu.len(), nu.len());
    }

    #[test]
    fn campbell_means_on_small_sample() {
        let cfg = MarkedPoissonConfig::new(1.0, tilted(), 1e-3, 4);
        for r in campbell_check(&cfg, 20_000).unwrap() {
            assert!(r.pass, "{}", r.to_json());
        }
        // Pure stable has infinite second moment at infinity.
        let cfg = MarkedPoissonConfig::new(1.0, LevyMechanism::stable(1.5), 1e-3, 4);
        assert!(matches!(campbell_check(&cfg, 10), Err(Error::Precondition(_))));
    }

    #[test]
    fn ks_statistic_on_known_samples() {
        let x: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let (d, p) = ks_two_sample(&x, &x);
        assert_eq!(d, 0.0);
        assert_eq!(p, 1.0);
        let y: Vec<f64> = (0..100).map(|i| i as f64 + 50.0).collect();
        let (d, p) = ks_two_sample(&x, &y);
        assert!((d - 0.5).abs() < 1e-12);
        assert!(p < 1e-8);
        // Tabulated value: P(K > 1.36) ≈ 0.0494.
        assert!((kolmogorov_tail(1.36) - 0.0494).abs() < 5e-4);
    }

    #[test]
    fn zero_functional_sides_vanish() {
        // γ large makes F tiny on both sides, f ≡ 0 and γ = 0 makes it 1; F ≡ 0
        // is the limit of an infinite cutoff height.
        let tm = LevyMechanism::stable(1.5).truncate(1e-2).unwrap();
        let f = TestFunction::constant(0.0);
        assert!(discrete_lhs(&tm, &f, 0.0, 1e-9).unwrap() == 0.0);
        let q = Quadrature::default();
        assert!(continuum_rhs(tm.mechanism(), &f, 0.5, 1e-9, &q).unwrap().abs() < 1e-8);
    }

    #[test]
    fn discrete_lhs_tends_to_continuum() {
        let f = TestFunction::from_spec(FunctionSpec::decaying(0.2, 0.3)).unwrap();
        let q = Quadrature::with_tolerance(1e-11, 1e-14);
        let mech = LevyMechanism::stable(1.5);
        let limit = continuum_rhs(&mech, &f, 1.0, 1.0, &q).unwrap();
        let errs: Vec<f64> = [1e-2, 1e-3, 1e-4]
            .iter()
            .map(|&e| (discrete_lhs(&mech.truncate(e).unwrap(), &f, 1.0, 1.0).unwrap() - limit).abs())
            .collect();
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
        assert!(errs[2] < 0.02, "{errs:?}");
    }

    #[test]
    fn sampler_matches_closed_form_at_one_height() {
        let mech = LevyMechanism::stable(1.5);
        let f = TestFunction::from_spec(FunctionSpec::decaying(0.2, 0.3)).unwrap();
        let s = MarkSampler::new(&mech, 1e-4).unwrap();
        let marked = mech.truncate(1e-4).unwrap();
        let q = Quadrature::with_tolerance(1e-11, 1e-14);
        let want = profile_at(&marked, &f, 1.0, &[0.7], &q).unwrap()[0];
        let xs: Vec<f64> = (0..20_000).map(|i| s.exponential_functional(0.7, &f, 1.0, &mut stream(5, i))).collect();
        let (m, se) = mean_se(&xs);
        assert!((m - want).abs() < 4.0 * se, "{m} ± {se} vs {want}");
    }
}
