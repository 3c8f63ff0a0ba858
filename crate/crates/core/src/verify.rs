//! The verification suite: twelve checks, each producing one [`CheckReport`].
//!
//! Every check is deterministic given its [`SuiteConfig`], and every report
//! embeds the part of the configuration it used.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{config, Result};
use crate::exploration::ExplorationTrajectory;
use crate::generator_lab::{
    duality_reports, excursion_integrals, martingale_test, mean_se, resolvent_mc, EstimatorReport, ExcursionSample,
    ExcursionWindow, GeneratorFunctional, LambdaCheck,
};
use crate::levy_model::{LaplaceExponent, LevyMechanism, TruncatedMechanism};
use crate::measure_core::{AtomicMeasure, FunctionSpec, TestFunction, WeightFunction};
use crate::path_sim::{first_passages, simulate_indexed, JumpStream};
use crate::poisson_rep::{
    campbell_check, exchangeability_check, representation_from_sample, variance_linearity, KsOutcome,
    MarkedPoissonConfig, MarkedSide,
};
use crate::quadrature::Quadrature;
use crate::rng::{stream, subseed, StreamRng};

/// Names of the twelve checks, in run order.
pub const CHECKS: [&str; 12] = [
    "mass-identity",
    "occupation",
    "metric",
    "height-consistency",
    "subordinator",
    "resolvent",
    "martingale",
    "lambda-identity",
    "duality",
    "poisson-sampler",
    "poisson-representation",
    "tilt-algebra",
];

/// Result of one check.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckReport {
    pub check: String,
    pub pass: bool,
    pub config: Value,
    pub summary: Value,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub estimators: Vec<EstimatorReport>,
}

impl CheckReport {
    fn exact(check: &str, config: Value, max_err: f64, tolerance: f64, summary: Value) -> Self {
        let mut s = json!({ "max_error": max_err, "tolerance": tolerance });
        merge(&mut s, summary);
        Self { check: check.into(), pass: max_err <= tolerance, config, summary: s, estimators: Vec::new() }
    }

    fn monte_carlo(check: &str, config: Value, estimators: Vec<EstimatorReport>, extra_pass: bool, summary: Value) -> Self {
        let worst = estimators.iter().map(|r| r.z.abs()).fold(0.0, f64::max);
        let mut s = json!({ "n_estimators": estimators.len(), "max_abs_z": worst });
        merge(&mut s, summary);
        let pass = extra_pass && estimators.iter().all(|r| r.pass);
        Self { check: check.into(), pass, config, summary: s, estimators }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialise")
    }
}

fn merge(into: &mut Value, extra: Value) {
    if let (Value::Object(a), Value::Object(b)) = (into, extra) {
        a.extend(b);
    }
}

fn to_value<T: Serialize>(t: &T) -> Value {
    serde_json::to_value(t).expect("configs serialise")
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct MassConfig {
    pub eps: f64,
    pub n_paths: usize,
    pub min_events: usize,
    pub tolerance: f64,
}

impl Default for MassConfig {
    fn default() -> Self {
        Self { eps: 1e-4, n_paths: 100, min_events: 1000, tolerance: 1e-9 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct OccupationConfig {
    pub n_measures: usize,
    pub n_functions: usize,
    pub n_pairs: usize,
    pub tolerance: f64,
}

impl Default for OccupationConfig {
    fn default() -> Self {
        Self { n_measures: 100, n_functions: 20, n_pairs: 1000, tolerance: 1e-12 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub n_samples: usize,
    pub n_functions: usize,
    pub witness_length: usize,
    pub tolerance: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { n_samples: 1000, n_functions: 20, witness_length: 100, tolerance: 1e-12 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct HeightConfig {
    pub eps: f64,
    pub horizon: f64,
    pub n_paths: usize,
    pub n_times: usize,
    pub mu: AtomicMeasure,
    pub tolerance: f64,
}

impl Default for HeightConfig {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            horizon: 1.0,
            n_paths: 100,
            n_times: 1000,
            mu: AtomicMeasure::dirac(1.0, 0.5).expect("valid atom"),
            tolerance: 1e-9,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SubordinatorConfig {
    pub eps: f64,
    pub n_paths: usize,
    pub levels: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// Passages later than this count as `e^{-λτ} = 0`.
    pub cap: f64,
}

impl Default for SubordinatorConfig {
    fn default() -> Self {
        Self { eps: 1e-3, n_paths: 10_000, levels: vec![0.05, 0.1], lambdas: vec![0.5, 1.0, 2.0], cap: 32.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ResolventCase {
    pub mu: AtomicMeasure,
    pub f: FunctionSpec,
    pub lambda: f64,
    /// Defaults to `ln(10⁶)/λ`.
    #[serde(default)]
    pub horizon: Option<f64>,
}

impl ResolventCase {
    pub fn horizon(&self) -> f64 {
        self.horizon.unwrap_or(1e6f64.ln() / self.lambda)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ResolventConfig {
    pub eps: f64,
    pub n_paths: usize,
    pub cases: Vec<ResolventCase>,
}

impl Default for ResolventConfig {
    fn default() -> Self {
        let mu = AtomicMeasure::dirac(1.0, 0.5).expect("valid atom");
        Self {
            eps: 1e-3,
            n_paths: 10_000,
            cases: vec![
                ResolventCase { mu: AtomicMeasure::zero(), f: FunctionSpec::constant(0.5), lambda: 2.0, horizon: None },
                ResolventCase { mu: mu.clone(), f: FunctionSpec::saturating(0.3), lambda: 2.0, horizon: None },
                ResolventCase { mu, f: FunctionSpec::decaying(0.2, 0.3), lambda: 1.0, horizon: None },
            ],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct MartingaleConfig {
    pub eps: f64,
    pub n_paths: usize,
    pub grid: Vec<f64>,
    pub mu: AtomicMeasure,
    /// Must vanish at 0: used by the unstopped form.
    pub f_unstopped: FunctionSpec,
    pub f_stopped: FunctionSpec,
    pub lambda: f64,
    pub theta: f64,
}

impl Default for MartingaleConfig {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            n_paths: 10_000,
            grid: vec![0.1, 0.2, 0.4, 0.8],
            mu: AtomicMeasure::dirac(1.0, 0.5).expect("valid atom"),
            f_unstopped: FunctionSpec::saturating(0.3),
            f_stopped: FunctionSpec::decaying(0.2, 0.3),
            lambda: 0.5,
            theta: 1.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LambdaConfig {
    pub lambda: f64,
    /// Finite grid points; `∞` is always added.
    pub ys: Vec<f64>,
    pub functions: Vec<FunctionSpec>,
    pub mechanisms: Vec<LevyMechanism>,
    pub tolerance: f64,
}

impl Default for LambdaConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            ys: vec![0.0, 0.1, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0],
            functions: vec![FunctionSpec::constant(0.5), FunctionSpec::saturating(0.3), FunctionSpec::decaying(0.2, 0.3)],
            mechanisms: vec![
                LevyMechanism::stable(1.5),
                LevyMechanism::stable(1.7).with_alpha0(0.3).with_damping(0.5),
            ],
            tolerance: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExcursionConfig {
    pub eps: f64,
    pub f: FunctionSpec,
    pub gamma: f64,
    pub height_cap: f64,
    pub window: ExcursionWindow,
    pub min_excursions: u64,
    pub marked: MarkedSide,
}

impl Default for ExcursionConfig {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            f: FunctionSpec::decaying(0.2, 0.3),
            gamma: 1.0,
            height_cap: 1.0,
            window: ExcursionWindow::default(),
            min_excursions: 10_000,
            marked: MarkedSide::default(),
        }
    }
}

/// Moments and symmetry of the marked Poisson sampler. Moments need `∫ℓ³π`
/// finite, hence the tilt.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub a: f64,
    pub delta: f64,
    pub theta: f64,
    pub n_draws: usize,
    pub ks_level: f64,
    pub variance_heights: Vec<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { a: 1.0, delta: 1e-3, theta: 1.0, n_draws: 100_000, ks_level: 1e-3, variance_heights: vec![0.5, 1.0, 2.0] }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TiltConfig {
    pub lambdas: Vec<f64>,
    pub thetas: Vec<f64>,
    pub tolerance: f64,
}

impl Default for TiltConfig {
    fn default() -> Self {
        Self {
            lambdas: (1..=20).map(|k| 0.25 * k as f64).collect(),
            thetas: vec![0.1, 0.5, 1.0, 2.0, 4.0],
            tolerance: 1e-9,
        }
    }
}

/// Full configuration of the suite. Every field has a default, so an empty
/// TOML document is a valid configuration.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub mechanism: LevyMechanism,
    pub seed: u64,
    pub mass: MassConfig,
    pub occupation: OccupationConfig,
    pub metric: MetricConfig,
    pub height: HeightConfig,
    pub subordinator: SubordinatorConfig,
    pub resolvent: ResolventConfig,
    pub martingale: MartingaleConfig,
    pub lambda_identity: LambdaConfig,
    pub excursions: ExcursionConfig,
    pub sampler: SamplerConfig,
    pub tilt: TiltConfig,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            mechanism: LevyMechanism::stable(1.5),
            seed: 1,
            mass: MassConfig::default(),
            occupation: OccupationConfig::default(),
            metric: MetricConfig::default(),
            height: HeightConfig::default(),
            subordinator: SubordinatorConfig::default(),
            resolvent: ResolventConfig::default(),
            martingale: MartingaleConfig::default(),
            lambda_identity: LambdaConfig::default(),
            excursions: ExcursionConfig::default(),
            sampler: SamplerConfig::default(),
            tilt: TiltConfig::default(),
        }
    }
}

impl SuiteConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Sets every Monte Carlo path count at once.
    pub fn set_n_paths(&mut self, n: usize) {
        self.subordinator.n_paths = n;
        self.resolvent.n_paths = n;
        self.martingale.n_paths = n;
    }

    /// Sets the truncation level of every simulated path.
    pub fn set_eps(&mut self, eps: f64) {
        self.mass.eps = eps;
        self.height.eps = eps;
        self.subordinator.eps = eps;
        self.resolvent.eps = eps;
        self.martingale.eps = eps;
        self.excursions.eps = eps;
    }

    /// Cheap structural checks, run before anything is simulated.
    pub fn validate(&self) -> Result<()> {
        let report = self.mechanism.validate();
        if !report.passed() {
            return Err(config("mechanism", format!("{}", to_value(&report))));
        }
        for (field, eps) in [
            ("mass.eps", self.mass.eps),
            ("height.eps", self.height.eps),
            ("subordinator.eps", self.subordinator.eps),
            ("resolvent.eps", self.resolvent.eps),
            ("martingale.eps", self.martingale.eps),
            ("excursions.eps", self.excursions.eps),
        ] {
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(config(field, "must be positive"));
            }
        }
        for (field, n) in [
            ("mass.n_paths", self.mass.n_paths),
            ("height.n_paths", self.height.n_paths),
            ("subordinator.n_paths", self.subordinator.n_paths),
            ("resolvent.n_paths", self.resolvent.n_paths),
            ("martingale.n_paths", self.martingale.n_paths),
            ("sampler.n_draws", self.sampler.n_draws),
        ] {
            if n < 2 {
                return Err(config(field, "needs at least 2"));
            }
        }
        if !(self.height.horizon > 0.0) {
            return Err(config("height.horizon", "must be positive"));
        }
        if self.subordinator.levels.iter().any(|&r| !(r > 0.0)) {
            return Err(config("subordinator.levels", "must be positive"));
        }
        if self.subordinator.lambdas.iter().any(|&l| !(l > 0.0)) {
            return Err(config("subordinator.lambdas", "must be positive"));
        }
        for (i, c) in self.resolvent.cases.iter().enumerate() {
            if !(c.lambda > 0.0) || !(c.horizon() > 0.0) {
                return Err(config(format!("resolvent.cases[{i}]"), "lambda and horizon must be positive"));
            }
        }
        if self.martingale.grid.iter().any(|&t| !(t > 0.0)) {
            return Err(config("martingale.grid", "times must be positive"));
        }
        if (self.martingale.f_unstopped.c0 + self.martingale.f_unstopped.c1) != 0.0 {
            return Err(config("martingale.f_unstopped", "must vanish at 0"));
        }
        if !(self.excursions.height_cap > 0.0 && self.excursions.height_cap.is_finite()) {
            return Err(config("excursions.height_cap", "must be positive and finite"));
        }
        Ok(())
    }
}

/// Runs one check by name.
pub fn run_check(name: &str, cfg: &SuiteConfig) -> Result<Vec<CheckReport>> {
    cfg.validate()?;
    match name {
        "mass-identity" => Ok(vec![mass_identity(cfg)?]),
        "occupation" => Ok(vec![occupation(cfg)?]),
        "metric" => Ok(vec![metric(cfg)?]),
        "height-consistency" => Ok(vec![height_consistency(cfg)?]),
        "subordinator" => Ok(vec![subordinator(cfg)?]),
        "resolvent" => Ok(vec![resolvent(cfg)?]),
        "martingale" => Ok(vec![martingale(cfg)?]),
        "lambda-identity" => Ok(vec![lambda_identity(cfg)?]),
        "duality" => Ok(vec![excursion_checks(cfg)?.0]),
        "poisson-sampler" => Ok(vec![poisson_sampler(cfg)?]),
        "poisson-representation" => Ok(vec![excursion_checks(cfg)?.1]),
        "tilt-algebra" => Ok(vec![tilt_algebra(cfg)?]),
        other => Err(config("check", format!("unknown check `{other}`"))),
    }
}

/// All twelve checks in [`CHECKS`] order; the excursion sweep is shared.
pub fn run_all(cfg: &SuiteConfig) -> Result<Vec<CheckReport>> {
    cfg.validate()?;
    let (duality, representation) = excursion_checks(cfg)?;
    Ok(vec![
        mass_identity(cfg)?,
        occupation(cfg)?,
        metric(cfg)?,
        height_consistency(cfg)?,
        subordinator(cfg)?,
        resolvent(cfg)?,
        martingale(cfg)?,
        lambda_identity(cfg)?,
        duality,
        poisson_sampler(cfg)?,
        representation,
        tilt_algebra(cfg)?,
    ])
}

fn truncated(cfg: &SuiteConfig, eps: f64) -> Result<TruncatedMechanism> {
    cfg.mechanism.truncate(eps)
}

/// `⟨ρ_t,1⟩ = X_t - I_t` after every jump, starting from `ρ_0 = 0`.
pub fn mass_identity(cfg: &SuiteConfig) -> Result<CheckReport> {
    let mc = &cfg.mass;
    let tm = truncated(cfg, mc.eps)?;
    // Enough time for `min_events` jumps with overwhelming probability.
    let n = mc.min_events as f64;
    let horizon = (n + 10.0 * n.sqrt() + 50.0) / tm.jump_rate();
    let seed = subseed(cfg.seed, 1);
    let per_path: Vec<(f64, usize)> = (0..mc.n_paths)
        .into_par_iter()
        .map(|i| -> Result<(f64, usize)> {
            let path = simulate_indexed(&tm, horizon, seed, i as u64)?;
            let tr = ExplorationTrajectory::explore(path, AtomicMeasure::zero())?;
            let p = tr.path();
            let worst = tr
                .events()
                .iter()
                .enumerate()
                .map(|(k, e)| (e.total_mass - (p.after_jump(k) - p.infimum(e.t))).abs())
                .fold(0.0, f64::max);
            Ok((worst, tr.events().len()))
        })
        .collect::<Result<_>>()?;
    let max_err = per_path.iter().map(|p| p.0).fold(0.0, f64::max);
    let min_events = per_path.iter().map(|p| p.1).min().unwrap_or(0);
    let total: usize = per_path.iter().map(|p| p.1).sum();
    let mut r = CheckReport::exact(
        "mass-identity",
        json!({ "mechanism": cfg.mechanism, "seed": seed, "mass": mc, "horizon": horizon }),
        max_err,
        mc.tolerance,
        json!({ "min_events_per_path": min_events, "total_events": total }),
    );
    r.pass &= min_events >= mc.min_events;
    Ok(r)
}

/// Random atomic measure with 1 to 8 atoms, occasionally one at `∞`.
pub fn random_measure(rng: &mut StreamRng) -> AtomicMeasure {
    let n = rng.random_range(0..=8usize);
    let mut atoms: Vec<(f64, f64)> = (0..n)
        .map(|_| (5.0 * rng.random::<f64>(), 0.05 + 2.0 * rng.random::<f64>()))
        .collect();
    if rng.random::<f64>() < 0.1 {
        atoms.push((f64::INFINITY, 0.05 + rng.random::<f64>()));
    }
    AtomicMeasure::from_atoms(atoms).expect("finite random atoms")
}

/// Random bounded continuous `h(x) = a + b sin(ωx) + c e^{-x}` and its limit-free
/// value at `∞` (`a`, by convention, since `sin` has no limit there).
fn random_function(rng: &mut StreamRng) -> (impl Fn(f64) -> f64, f64) {
    let a = rng.random_range(-1.0..1.0);
    let b = rng.random_range(-1.0..1.0);
    let c = rng.random_range(-1.0..1.0);
    let w = rng.random_range(0.1..5.0);
    (move |x: f64| a + b * (w * x).sin() + c * (-x).exp(), a)
}

/// `∫_0^{⟨μ,1⟩} h(H^μ_r) dr` from the steps of `r ↦ H^μ_r`.
fn occupation_integral(mu: &AtomicMeasure, h: &impl Fn(f64) -> f64, h_inf: f64) -> f64 {
    mu.partial_height_steps()
        .iter()
        .map(|&(lo, hi, y)| (hi - lo) * if y.is_infinite() { h_inf } else { h(y) })
        .sum()
}

/// `∫_0^{⟨μ,1⟩} h(H^μ_r) dr = ⟨μ,h⟩`, the same over `[0,∞)` when `h(0) = 0`,
/// and `v < H^μ_r ⟺ μ((v,∞]) > r`.
pub fn occupation(cfg: &SuiteConfig) -> Result<CheckReport> {
    let oc = &cfg.occupation;
    let seed = subseed(cfg.seed, 2);
    let mut rng = stream(seed, 0);
    let mut max_err = 0.0_f64;
    let mut max_err_zero = 0.0_f64;
    for _ in 0..oc.n_measures {
        let mu = random_measure(&mut rng);
        for _ in 0..oc.n_functions {
            let (h, h_inf) = random_function(&mut rng);
            let lhs = occupation_integral(&mu, &h, h_inf);
            max_err = max_err.max((lhs - mu.integrate_fn(&h, h_inf)).abs());
            // With h(0) = 0, r past ⟨μ,1⟩ (where H_r = 0) adds nothing.
            let h0 = h(0.0);
            let g = |x: f64| h(x) - h0;
            let lhs = occupation_integral(&mu, &g, h_inf - h0) + 10.0 * g(0.0);
            max_err_zero = max_err_zero.max((lhs - mu.integrate_fn(g, h_inf - h0)).abs());
        }
    }
    let mut mismatches = 0usize;
    for _ in 0..oc.n_pairs {
        let mu = random_measure(&mut rng);
        let v = 6.0 * rng.random::<f64>();
        let r = (mu.total_mass() + 0.5) * rng.random::<f64>();
        if (v < mu.partial_height(r)) != (mu.tail_mass(v) > r) {
            mismatches += 1;
        }
    }
    let mut r = CheckReport::exact(
        "occupation",
        json!({ "seed": seed, "occupation": oc }),
        max_err.max(max_err_zero),
        oc.tolerance,
        json!({ "max_error_full": max_err, "max_error_vanishing_at_zero": max_err_zero, "equivalence_mismatches": mismatches }),
    );
    r.pass &= mismatches == 0;
    Ok(r)
}

/// Metric axioms, the bounds `⟨μ,1⟩ ≤ D(0,μ) ≤ 2⟨μ,1⟩`, contraction under
/// erasure, and the two weak-convergence witness sequences.
pub fn metric(cfg: &SuiteConfig) -> Result<CheckReport> {
    let mc = &cfg.metric;
    let seed = subseed(cfg.seed, 3);
    let mut rng = stream(seed, 0);
    let g = WeightFunction::default();
    let tol = mc.tolerance;
    let zero = AtomicMeasure::zero();
    let (mut triangle, mut symmetry, mut identity) = (0.0_f64, 0.0_f64, 0.0_f64);
    let (mut bounds, mut contraction) = (0.0_f64, 0.0_f64);
    for _ in 0..mc.n_samples {
        let (a, b, c) = (random_measure(&mut rng), random_measure(&mut rng), random_measure(&mut rng));
        let (ab, bc, ac) = (a.distance(&b, &g), b.distance(&c, &g), a.distance(&c, &g));
        triangle = triangle.max(ac - ab - bc);
        symmetry = symmetry.max((ab - b.distance(&a, &g)).abs());
        identity = identity.max(a.distance(&a, &g));
        if a != b && ab <= 0.0 {
            identity = f64::INFINITY;
        }
        let m = a.total_mass();
        let d0 = zero.distance(&a, &g);
        bounds = bounds.max(m - d0).max(d0 - 2.0 * m);
        let e = rng.random::<f64>() * (m.max(b.total_mass()) + 0.5);
        contraction = contraction.max(a.erase(e).distance(&b.erase(e), &g) - ab);
    }

    // μ_n = μ + δ_h/n: D and |⟨μ_n,f⟩ - ⟨μ,f⟩| decrease to 0.
    let base = AtomicMeasure::from_atoms(vec![(0.5, 1.0), (2.0, 0.3)]).expect("valid atoms");
    let witness: Vec<AtomicMeasure> = (1..=mc.witness_length)
        .map(|n| base.plus_atom(1.5, 1.0 / n as f64))
        .collect::<Result<_>>()?;
    let d: Vec<f64> = witness.iter().map(|m| m.distance(&base, &g)).collect();
    let mut weak_ok = d.windows(2).all(|w| w[1] < w[0]) && d[d.len() - 1] <= 2.0 / mc.witness_length as f64;
    for _ in 0..mc.n_functions {
        let (h, h_inf) = random_function(&mut rng);
        let target = base.integrate_fn(&h, h_inf);
        let gaps: Vec<f64> = witness.iter().map(|m| (m.integrate_fn(&h, h_inf) - target).abs()).collect();
        weak_ok &= gaps.windows(2).all(|w| w[1] <= w[0] + tol) && gaps[gaps.len() - 1] <= 2.0 / mc.witness_length as f64;
    }
    // ⟨μ_n,1⟩ = n: D(0, μ_n) ≥ n.
    let escaping: Vec<f64> = (1..=mc.witness_length)
        .map(|n| zero.distance(&AtomicMeasure::dirac(1.0, n as f64).expect("valid atom"), &g))
        .collect();
    let escape_ok = escaping.iter().enumerate().all(|(k, &d)| d >= (k + 1) as f64 - tol);

    let worst = [triangle, symmetry, identity, bounds, contraction].into_iter().fold(0.0, f64::max);
    let mut r = CheckReport::exact(
        "metric",
        json!({ "seed": seed, "metric": mc, "weight": "1 - exp(-t)" }),
        worst,
        tol,
        json!({
            "triangle_excess": triangle,
            "symmetry_error": symmetry,
            "identity_error": identity,
            "bound_excess": bounds,
            "contraction_excess": contraction,
            "witness_distances_decrease": weak_ok,
            "witness_last_distance": d[d.len() - 1],
            "escaping_sequence_unbounded": escape_ok,
        }),
    );
    r.pass &= weak_ok && escape_ok;
    Ok(r)
}

/// Stack height against the ladder count at random times.
pub fn height_consistency(cfg: &SuiteConfig) -> Result<CheckReport> {
    let hc = &cfg.height;
    let tm = truncated(cfg, hc.eps)?;
    let seed = subseed(cfg.seed, 4);
    let per_path: Vec<f64> = (0..hc.n_paths)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let path = simulate_indexed(&tm, hc.horizon, seed, i as u64)?;
            let mut rng = stream(subseed(seed, 1), i as u64);
            let times: Vec<f64> = (0..hc.n_times).map(|_| hc.horizon * rng.random::<f64>()).collect();
            let tr = ExplorationTrajectory::explore(path, hc.mu.clone())?;
            let mut worst = 0.0_f64;
            for t in times {
                let stack = tr.height_at(t)?;
                let ladder = crate::exploration::ladder_height(tr.path(), &hc.mu, t);
                worst = worst.max((stack - ladder).abs());
            }
            Ok(worst)
        })
        .collect::<Result<_>>()?;
    let max_err = per_path.iter().copied().fold(0.0, f64::max);
    Ok(CheckReport::exact(
        "height-consistency",
        json!({ "mechanism": cfg.mechanism, "seed": seed, "height": hc, "drift_rate": tm.drift_rate() }),
        max_err,
        hc.tolerance,
        json!({ "queries": hc.n_paths * hc.n_times }),
    ))
}

/// `E[e^{-λτ_r}] = e^{-r ψ_ε⁻¹(λ)}` for the first passage `τ_r` below `-r`.
pub fn subordinator(cfg: &SuiteConfig) -> Result<CheckReport> {
    let sc = &cfg.subordinator;
    let tm = truncated(cfg, sc.eps)?;
    let seed = subseed(cfg.seed, 5);
    let mut order: Vec<usize> = (0..sc.levels.len()).collect();
    order.sort_by(|&a, &b| sc.levels[a].total_cmp(&sc.levels[b]));
    let levels: Vec<f64> = order.iter().map(|&k| -sc.levels[k]).collect();
    let hits: Vec<Vec<Option<f64>>> = (0..sc.n_paths)
        .into_par_iter()
        .map(|i| first_passages(JumpStream::indexed(&tm, seed, i as u64), tm.drift_rate(), &levels, sc.cap))
        .collect();
    let mut reports = Vec::new();
    for (j, &k) in order.iter().enumerate() {
        let r = sc.levels[k];
        for &lam in &sc.lambdas {
            let xs: Vec<f64> = hits.iter().map(|h| h[j].map_or(0.0, |t| (-lam * t).exp())).collect();
            let (m, se) = mean_se(&xs);
            let target = (-r * tm.psi_inverse(lam)?).exp();
            let censored = hits.iter().filter(|h| h[j].is_none()).count();
            let params = json!({ "r": r, "lambda": lam, "n_paths": sc.n_paths });
            reports.push(
                EstimatorReport::new("subordinator", params, m, se, target, (-lam * sc.cap).exp())
                    .with_details(json!({ "censored": censored })),
            );
        }
    }
    Ok(CheckReport::monte_carlo(
        "subordinator",
        json!({ "mechanism": cfg.mechanism, "seed": seed, "subordinator": sc, "drift_rate": tm.drift_rate() }),
        reports,
        true,
        Value::Null,
    ))
}

pub fn resolvent(cfg: &SuiteConfig) -> Result<CheckReport> {
    let rc = &cfg.resolvent;
    let tm = truncated(cfg, rc.eps)?;
    let seed = subseed(cfg.seed, 6);
    let mut reports = Vec::new();
    for (k, case) in rc.cases.iter().enumerate() {
        let gf = GeneratorFunctional::new(TestFunction::from_spec(case.f)?, tm.clone(), case.lambda)?;
        reports.push(resolvent_mc(&gf, &case.mu, rc.n_paths, case.horizon(), subseed(seed, k as u64))?);
    }
    Ok(CheckReport::monte_carlo(
        "resolvent",
        json!({ "mechanism": cfg.mechanism, "seed": seed, "resolvent": rc }),
        reports,
        true,
        Value::Null,
    ))
}

/// Unstopped, stopped, and stopped under the `θ`-tilted mechanism.
pub fn martingale(cfg: &SuiteConfig) -> Result<CheckReport> {
    let mc = &cfg.martingale;
    let seed = subseed(cfg.seed, 7);
    let tm = truncated(cfg, mc.eps)?;
    let tilted = cfg.mechanism.tilt(mc.theta)?.truncate(mc.eps)?;
    let variants = [
        ("unstopped", &tm, mc.f_unstopped, false),
        ("stopped", &tm, mc.f_stopped, true),
        ("tilted-stopped", &tilted, mc.f_stopped, true),
    ];
    let mut reports = Vec::new();
    for (k, (name, tm, f, stopped)) in variants.into_iter().enumerate() {
        let gf = GeneratorFunctional::new(TestFunction::from_spec(f)?, tm.clone(), mc.lambda)?;
        let out = martingale_test(&gf, &mc.mu, mc.n_paths, &mc.grid, subseed(seed, k as u64), stopped)?;
        for mut r in out.points.into_iter().chain(out.increments) {
            r.test = format!("martingale-{name}-{}", r.test);
            reports.push(r);
        }
    }
    Ok(CheckReport::monte_carlo(
        "martingale",
        json!({ "mechanism": cfg.mechanism, "seed": seed, "martingale": mc }),
        reports,
        true,
        Value::Null,
    ))
}

#[derive(Serialize)]
struct LambdaRow {
    mechanism: usize,
    function: usize,
    #[serde(flatten)]
    check: LambdaCheck,
}

/// `Λ(y) = γ - f(y)` by nested quadrature on the grid plus `y = ∞`.
pub fn lambda_identity(cfg: &SuiteConfig) -> Result<CheckReport> {
    let lc = &cfg.lambda_identity;
    let quad = Quadrature::with_tolerance(1e-11, 1e-14);
    let mut ys = lc.ys.clone();
    ys.push(f64::INFINITY);
    let mut rows = Vec::new();
    for (i, mech) in lc.mechanisms.iter().enumerate() {
        for (j, &f) in lc.functions.iter().enumerate() {
            let gf = GeneratorFunctional::new(TestFunction::from_spec(f)?, mech.clone(), lc.lambda)?;
            for &y in &ys {
                rows.push(LambdaRow { mechanism: i, function: j, check: gf.lambda_identity(y, &quad)? });
            }
        }
    }
    let max_err = rows.iter().map(|r| r.check.abs_err).fold(0.0, f64::max);
    Ok(CheckReport::exact(
        "lambda-identity",
        json!({ "lambda_identity": lc }),
        max_err,
        lc.tolerance,
        json!({ "rows": rows }),
    ))
}

fn excursion_sample(cfg: &SuiteConfig) -> Result<(TruncatedMechanism, TestFunction, ExcursionSample, u64)> {
    let ec = &cfg.excursions;
    let tm = truncated(cfg, ec.eps)?;
    let f = TestFunction::from_spec(ec.f)?;
    let seed = subseed(cfg.seed, 9);
    let sample = excursion_integrals(&tm, &f, ec.gamma, ec.height_cap, ec.window, seed)?;
    Ok((tm, f, sample, seed))
}

/// Duality and Poisson representation, estimated from one excursion sweep.
pub fn excursion_checks(cfg: &SuiteConfig) -> Result<(CheckReport, CheckReport)> {
    let ec = &cfg.excursions;
    let (tm, f, sample, seed) = excursion_sample(cfg)?;
    let enough = sample.stats.excursions >= ec.min_excursions;
    let config = json!({ "mechanism": cfg.mechanism, "seed": seed, "excursions": ec });
    let counts = json!({ "excursions": sample.stats.excursions, "censored": sample.stats.censored });
    let (main, split) = duality_reports(&tm, &f, &sample);
    let duality = CheckReport::monte_carlo("duality", config.clone(), vec![main, split], enough, counts.clone());
    let rep = representation_from_sample(&tm, &f, &sample, ec.marked, subseed(seed, 1))?;
    let representation = CheckReport::monte_carlo(
        "poisson-representation",
        config,
        vec![rep.identity, rep.sampler],
        enough,
        counts,
    );
    Ok((duality, representation))
}

/// Campbell means, `u ↦ 1-u` exchangeability, and `Var⟨μ_a,1⟩` linear in `a`.
pub fn poisson_sampler(cfg: &SuiteConfig) -> Result<CheckReport> {
    let sc = &cfg.sampler;
    let seed = subseed(cfg.seed, 10);
    let tilted = cfg.mechanism.tilt(sc.theta)?;
    let pc = MarkedPoissonConfig::new(sc.a, tilted.clone(), sc.delta, subseed(seed, 0));
    let mut reports: Vec<EstimatorReport> = campbell_check(&pc, sc.n_draws)?.into();
    reports.extend(variance_linearity(&tilted, sc.delta, &sc.variance_heights, sc.n_draws, subseed(seed, 1))?);
    let ks_cfg = MarkedPoissonConfig::new(sc.a, cfg.mechanism.clone(), sc.delta, subseed(seed, 2));
    let ks: KsOutcome = exchangeability_check(&ks_cfg, sc.n_draws, sc.ks_level)?;
    Ok(CheckReport::monte_carlo(
        "poisson-sampler",
        json!({ "mechanism": cfg.mechanism, "tilted": tilted, "seed": seed, "sampler": sc }),
        reports,
        ks.pass,
        json!({ "exchangeability": ks }),
    ))
}

/// `ψ^{(θ)}(λ) = ψ(λ+θ) - ψ(θ)`.
pub fn tilt_algebra(cfg: &SuiteConfig) -> Result<CheckReport> {
    let tc = &cfg.tilt;
    let mech = &cfg.mechanism;
    let mut max_err = 0.0_f64;
    for &theta in &tc.thetas {
        let tilted = mech.tilt(theta)?;
        let psi_theta = mech.psi(theta)?;
        for &lam in &tc.lambdas {
            let err = (tilted.psi(lam)? - (mech.psi(lam + theta)? - psi_theta)).abs();
            max_err = max_err.max(err);
        }
    }
    Ok(CheckReport::exact(
        "tilt-algebra",
        json!({ "mechanism": mech, "tilt": tc }),
        max_err,
        tc.tolerance,
        json!({ "grid_points": tc.thetas.len() * tc.lambdas.len() }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = SuiteConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(SuiteConfig::from_toml_str(&text).unwrap(), cfg);
        assert_eq!(SuiteConfig::from_toml_str("").unwrap(), cfg);
        assert!(SuiteConfig::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn validation_names_the_field() {
        let mut cfg = SuiteConfig::default();
        cfg.martingale.f_unstopped = FunctionSpec::constant(0.5);
        match cfg.validate() {
            Err(crate::error::Error::Config { field, .. }) => assert_eq!(field, "martingale.f_unstopped"),
            other => panic!("{other:?}"),
        }
        let mut cfg = SuiteConfig::default();
        cfg.set_eps(-1.0);
        assert!(cfg.validate().is_err());
        assert!(run_check("nope", &SuiteConfig::default()).is_err());
    }

    #[test]
    fn exact_checks_pass_on_defaults() {
        let cfg = SuiteConfig::default();
        for r in [occupation(&cfg).unwrap(), metric(&cfg).unwrap(), tilt_algebra(&cfg).unwrap()] {
            assert!(r.pass, "{}", r.to_json());
        }
    }

    #[test]
    fn small_mass_and_height_runs() {
        let mut cfg = SuiteConfig::default();
        cfg.mass.n_paths = 4;
        cfg.height.n_paths = 4;
        cfg.height.n_times = 50;
        let a = mass_identity(&cfg).unwrap();
        assert!(a.pass, "{}", a.to_json());
        let b = height_consistency(&cfg).unwrap();
        assert!(b.pass, "{}", b.to_json());
        assert_eq!(a, mass_identity(&cfg).unwrap());
    }
}
