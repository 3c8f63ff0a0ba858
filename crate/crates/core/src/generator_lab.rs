//! Exponential functionals `F(μ) = e^{-⟨μ,f⟩}` and `K`, with Monte Carlo
//! estimators for the resolvent identity, the associated martingales and the
//! duality between `ρ` and `η` under the excursion measure.
//!
//! Path integrals are exact: on each piece of the sweep the height is constant
//! and `⟨ρ,f⟩`, `⟨η,1⟩` are affine, so every integrand is the exponential of
//! an affine function of time.

use std::cell::Cell;
use std::ops::ControlFlow;

use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};
use serde_json::{json, Value};

use crate::error::{config, Error, Result};
use crate::exploration::{Explorer, Piece, Visitor};
use crate::levy_model::{LaplaceExponent, TruncatedMechanism};
use crate::measure_core::{AtomicMeasure, TestFunction};
use crate::path_sim::JumpStream;
use crate::quadrature::{pairwise_sum, Quadrature};

/// Outcome of one Monte Carlo check, serialised as
/// `{test, params, estimate, se, target, z, bias_budget, pass, details}`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EstimatorReport {
    pub test: String,
    pub params: Value,
    pub estimate: f64,
    pub se: f64,
    pub target: f64,
    pub z: f64,
    pub bias_budget: f64,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub details: Value,
}

impl EstimatorReport {
    /// Passes iff `|estimate - target| <= 4 se + bias_budget`.
    pub fn new(test: impl Into<String>, params: Value, estimate: f64, se: f64, target: f64, bias_budget: f64) -> Self {
        let diff = estimate - target;
        let z = if se > 0.0 {
            diff / se
        } else if diff == 0.0 {
            0.0
        } else {
            diff.signum() * f64::MAX
        };
        let pass = diff.abs() <= 4.0 * se + bias_budget;
        Self {
            test: test.into(),
            params,
            estimate,
            se,
            target,
            z,
            bias_budget,
            pass,
            details: Value::Null,
        }
    }

    pub fn with_details(mut self, details: Value) -> Self {
        self.details = details;
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialise")
    }
}

/// Sample mean and its standard error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(xs) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// `∫_0^d e^{e0 - β u} du`, evaluated from whichever end has the larger
/// exponent so that nothing overflows.
#[inline]
pub fn exp_affine_integral(e0: f64, beta: f64, d: f64) -> f64 {
    let x = beta * d;
    let len = |b: f64, x: f64| if x.abs() < 1e-10 { d * (1.0 - 0.5 * x) } else { -(-x).exp_m1() / b };
    if beta >= 0.0 {
        e0.exp() * len(beta, x)
    } else {
        (e0 - x).exp() * len(-beta, -x)
    }
}

/// `(ψ(v) - ψ(γ)) / (v - γ)` given `ψ(γ)`; within `1e-6` of the diagonal the
/// midpoint derivative `ψ'((v+γ)/2)` is used, which is exact to second order.
pub fn chord_slope<E: LaplaceExponent + ?Sized>(psi: &E, v: f64, gamma: f64, psi_gamma: f64) -> Result<f64> {
    let dv = v - gamma;
    if dv.abs() <= 1e-6 * gamma.max(1.0) {
        return psi.psi_prime(0.5 * (v + gamma));
    }
    Ok((psi.psi(v)? - psi_gamma) / dv)
}

/// Adaptive quadrature of an integrand that may fail; the first failure wins.
pub(crate) fn integrate_fallible(quad: &Quadrature, f: impl Fn(f64) -> Result<f64>, a: f64, b: f64) -> Result<f64> {
    let err = Cell::new(None);
    let v = quad.integrate(
        |x| {
            f(x).unwrap_or_else(|e| {
                let first = err.take().unwrap_or(e);
                err.set(Some(first));
                f64::NAN
            })
        },
        a,
        b,
    );
    match err.into_inner() {
        Some(e) => Err(e),
        None => Ok(v?.value),
    }
}

fn serialize_height<S: Serializer>(h: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if h.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*h)
    }
}

/// `F` and `K` for a test function `f` and an exponent `ψ`, with `γ = ψ⁻¹(λ)`.
#[derive(Clone, Debug)]
pub struct GeneratorFunctional<E> {
    f: TestFunction,
    exponent: E,
    lambda: f64,
    gamma: f64,
    psi_gamma: f64,
}

impl<E: LaplaceExponent> GeneratorFunctional<E> {
    pub fn new(f: TestFunction, exponent: E, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(config("lambda", format!("must be positive, got {lambda}")));
        }
        for k in 0..=400 {
            let x = 0.05 * k as f64;
            if !(f.eval(x) >= 0.0) {
                return Err(config("f", format!("must be non-negative, f({x}) = {}", f.eval(x))));
            }
        }
        if !(f.limit() >= 0.0) {
            return Err(config("f", "limit f(inf) must be non-negative"));
        }
        let gamma = exponent.psi_inverse(lambda)?;
        let psi_gamma = exponent.psi(gamma)?;
        Ok(Self { f, exponent, lambda, gamma, psi_gamma })
    }

    pub fn f(&self) -> &TestFunction {
        &self.f
    }

    pub fn exponent(&self) -> &E {
        &self.exponent
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `ψ⁻¹(λ)`.
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// `F(μ) = e^{-⟨μ,f⟩}`.
    pub fn f_of(&self, mu: &AtomicMeasure) -> f64 {
        (-mu.integrate(&self.f)).exp()
    }

    /// `K(μ) = F(μ) [ψ(f(H)) - f'(H) 1{H < ∞}]`.
    pub fn k_of(&self, mu: &AtomicMeasure) -> Result<f64> {
        let h = mu.height();
        Ok(self.f_of(mu) * (self.exponent.psi(self.f.eval(h))? - self.f.derivative(h)))
    }

    /// Right side of the resolvent identity,
    /// `e^{-⟨μ,f⟩} - (f(0)/γ) e^{-γ⟨μ,1⟩}`.
    pub fn resolvent_target(&self, mu: &AtomicMeasure) -> f64 {
        self.f_of(mu) - self.f.eval(0.0) / self.gamma * (-self.gamma * mu.total_mass()).exp()
    }

    /// The `f(0) = 0` form of the identity: `U_λ(λF - K) = F`.
    pub fn invariant_target(&self, mu: &AtomicMeasure) -> Result<f64> {
        if self.f.eval(0.0) != 0.0 {
            return Err(Error::Precondition(format!("needs f(0) = 0, got {}", self.f.eval(0.0))));
        }
        Ok(self.f_of(mu))
    }

    /// `(ψ(v) - ψ(γ)) / (v - γ)`, with `ψ'` at the midpoint near the diagonal.
    pub fn slope(&self, v: f64) -> Result<f64> {
        chord_slope(&self.exponent, v, self.gamma, self.psi_gamma)
    }

    /// Nested quadrature of `Λ(y) = ∫_0^∞ (ψ(γ) - ψ(f(a+y)) + f'(a+y)) e^{-g(a,y)} da`,
    /// `g(a,y) = ∫_0^a (ψ(f(x+y)) - ψ(γ))/(f(x+y) - γ) dx`, against `γ - f(y)`.
    pub fn lambda_identity(&self, y: f64, quad: &Quadrature) -> Result<LambdaCheck> {
        let rhs = self.gamma - self.f.eval(y);
        if y.is_infinite() {
            let v = self.f.limit();
            let lhs = (self.psi_gamma - self.exponent.psi(v)?) / self.slope(v)?;
            return Ok(LambdaCheck { y, lhs, rhs, abs_err: (lhs - rhs).abs() });
        }
        let d = |x: f64| self.slope(self.f.eval(x + y));
        let inner = |a: f64, b: f64| integrate_fallible(quad, d, a, b);
        // Unit cells until e^{-g} is negligible; g is known at each cell start.
        let mut starts = vec![(0.0, 0.0)];
        let mut a = 0.0;
        let mut g = 0.0;
        while g < 40.0 {
            g += inner(a, a + 1.0)?;
            a += 1.0;
            starts.push((a, g));
            if a > 1e5 {
                return Err(Error::Numeric { what: "lambda identity: g(a,y) does not grow".into(), residual: g });
            }
        }
        let mut cells = Vec::with_capacity(starts.len());
        for w in starts.windows(2) {
            let ((a0, g0), (a1, _)) = (w[0], w[1]);
            let v = integrate_fallible(
                quad,
                |a| {
                    let v = self.f.eval(a + y);
                    let ga = g0 + inner(a0, a)?;
                    Ok((self.psi_gamma - self.exponent.psi(v)? + self.f.derivative(a + y)) * (-ga).exp())
                },
                a0,
                a1,
            )?;
            cells.push(v);
        }
        let lhs = pairwise_sum(&cells);
        Ok(LambdaCheck { y, lhs, rhs, abs_err: (lhs - rhs).abs() })
    }
}

#[derive(Clone, Copy, Debug, Serialize, PartialEq)]
pub struct LambdaCheck {
    #[serde(serialize_with = "serialize_height")]
    pub y: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub abs_err: f64,
}

/// The generator of the simulated process on exponential functionals,
/// `K_d(ρ) = F(ρ)[ψ_ε(f(H+1/c)) - c(f(H+1/c) - f(H))]`, next to the
/// limiting form `K(ρ) = F(ρ)[ψ_ε(f(H)) - f'(H)]`. Rates are cached per height.
struct Rates<'g> {
    gf: &'g GeneratorFunctional<TruncatedMechanism>,
    c: f64,
    base: f64,
    by_level: Vec<[f64; 2]>,
    error: Option<Error>,
}

impl<'g> Rates<'g> {
    fn new(gf: &'g GeneratorFunctional<TruncatedMechanism>) -> Self {
        Self { gf, c: gf.exponent.drift_rate(), base: f64::NAN, by_level: Vec::new(), error: None }
    }

    fn compute(&self, h: f64) -> Result<[f64; 2]> {
        let f = &self.gf.f;
        let psi = &self.gf.exponent;
        let (v0, v1) = (f.eval(h), f.eval(h + 1.0 / self.c));
        Ok([psi.psi(v1)? - self.c * (v1 - v0), psi.psi(v0)? - f.derivative(h)])
    }

    /// `[k_d, k]` at the piece's height, or `None` after recording an error.
    #[inline]
    fn at(&mut self, p: &Piece) -> Option<[f64; 2]> {
        if p.base.to_bits() != self.base.to_bits() {
            self.base = p.base;
            self.by_level.clear();
        }
        let i = p.level as usize;
        if i >= self.by_level.len() {
            self.by_level.resize(i + 1, [f64::NAN; 2]);
        }
        if self.by_level[i][0].is_nan() {
            match self.compute(p.height) {
                Ok(r) => self.by_level[i] = r,
                Err(e) => {
                    self.error.get_or_insert(e);
                    return None;
                }
            }
        }
        Some(self.by_level[i])
    }
}

/// Accumulates `∫ e^{-λt} F`, `∫ e^{-λt} F k_d` and `∫ e^{-λt} F k`; with
/// `stop_at_zero` the sweep breaks when `ρ` first vanishes.
struct Discounted<'g> {
    lambda: f64,
    rates: Rates<'g>,
    stop_at_zero: bool,
    stopped: bool,
    i_f: f64,
    i_kd: f64,
    i_k: f64,
}

impl<'g> Discounted<'g> {
    fn new(gf: &'g GeneratorFunctional<TruncatedMechanism>, lambda: f64, stop_at_zero: bool) -> Self {
        Self { lambda, rates: Rates::new(gf), stop_at_zero, stopped: false, i_f: 0.0, i_kd: 0.0, i_k: 0.0 }
    }
}

impl Visitor for Discounted<'_> {
    fn piece(&mut self, p: &Piece) -> ControlFlow<()> {
        if self.stop_at_zero && p.is_zero_state() {
            self.stopped = true;
            return ControlFlow::Break(());
        }
        let d = p.duration();
        if !(d > 0.0) {
            return ControlFlow::Continue(());
        }
        let Some([kd, k]) = self.rates.at(p) else {
            return ControlFlow::Break(());
        };
        let w = exp_affine_integral(-(self.lambda * p.t0 + p.rho_f), self.lambda + p.f_slope, d);
        self.i_f += w;
        self.i_kd += w * kd;
        self.i_k += w * k;
        ControlFlow::Continue(())
    }
}

/// `sup f` and `sup |f'|`, by a grid scan plus the limit.
fn sup_norms(f: &TestFunction) -> (f64, f64) {
    let mut sf = f.limit().abs();
    let mut sd = 0.0_f64;
    for k in 0..=4000 {
        let x = 0.01 * k as f64;
        sf = sf.max(f.eval(x).abs());
        sd = sd.max(f.derivative(x).abs());
    }
    (sf, sd)
}

fn mc_params(
    gf: &GeneratorFunctional<TruncatedMechanism>,
    mu: &AtomicMeasure,
    n_paths: usize,
    horizon: f64,
    seed: u64,
) -> Value {
    let tm = &gf.exponent;
    json!({
        "mechanism": tm.mechanism(),
        "epsilon": tm.epsilon(),
        "drift_rate": tm.drift_rate(),
        "jump_rate": tm.jump_rate(),
        "lambda": gf.lambda,
        "gamma_eps": gf.gamma,
        "f": gf.f.spec(),
        "mu": mu,
        "n_paths": n_paths,
        "horizon": horizon,
        "seed": seed,
    })
}

/// Monte Carlo estimate of `U_λ(λF - K)(μ) = E_μ ∫_0^∞ e^{-λt}(λF - K)(ρ_t) dt`.
///
/// The pass rule gates on the exact generator `K_d` of the simulated process,
/// for which the identity holds with `γ_ε = ψ_ε⁻¹(λ)`; the budget is the
/// bound on the discarded tail `∫_T^∞`. The limiting `K` is estimated on the
/// same paths and reported in `details` together with the measured bias
/// `E ∫ e^{-λt}(K_d - K)(ρ_t) dt`.
pub fn resolvent_mc(
    gf: &GeneratorFunctional<TruncatedMechanism>,
    mu: &AtomicMeasure,
    n_paths: usize,
    horizon: f64,
    seed: u64,
) -> Result<EstimatorReport> {
    if n_paths < 2 {
        return Err(config("n_paths", "needs at least 2 paths"));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(config("horizon", "must be positive"));
    }
    let tm = &gf.exponent;
    let lambda = gf.lambda;
    let per_path: Vec<[f64; 2]> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut acc = Discounted::new(gf, lambda, false);
            let mut ex = Explorer::new(tm.drift_rate(), mu, Some(&gf.f));
            let _ = ex.run(JumpStream::indexed(tm, seed, i as u64), horizon, &mut acc);
            if let Some(e) = acc.rates.error {
                return Err(e);
            }
            Ok([lambda * acc.i_f - acc.i_kd, lambda * acc.i_f - acc.i_k])
        })
        .collect::<Result<_>>()?;
    let est_d: Vec<f64> = per_path.iter().map(|r| r[0]).collect();
    let est_k: Vec<f64> = per_path.iter().map(|r| r[1]).collect();
    let bias: Vec<f64> = per_path.iter().map(|r| r[1] - r[0]).collect();
    let (m_d, se_d) = mean_se(&est_d);
    let (m_k, se_k) = mean_se(&est_k);
    let (m_b, se_b) = mean_se(&bias);

    let (sf, sd) = sup_norms(&gf.f);
    let tail = (-lambda * horizon).exp() / lambda * (lambda + tm.psi(sf)? + sd);
    let target = gf.resolvent_target(mu);
    let limit = GeneratorFunctional::new(gf.f.clone(), tm.mechanism().clone(), lambda)?;
    let target_limit = limit.resolvent_target(mu);
    let k_budget = tail + m_b.abs() + 2.0 * se_b;
    let details = json!({
        "target_untruncated": target_limit,
        "gamma_untruncated": limit.gamma,
        "tail_bound": tail,
        "estimate_limit_k": m_k,
        "se_limit_k": se_k,
        "generator_bias": m_b,
        "se_generator_bias": se_b,
        "pass_limit_k": (m_k - target).abs() <= 4.0 * se_k + k_budget,
        "limit_k_budget": k_budget,
    });
    Ok(EstimatorReport::new("resolvent", mc_params(gf, mu, n_paths, horizon, seed), m_d, se_d, target, tail)
        .with_details(details))
}

/// Per-grid-time reports of a martingale test.
#[derive(Clone, Debug, Serialize)]
pub struct MartingaleOutcome {
    /// `E[M_t] - M_0` at each grid time.
    pub points: Vec<EstimatorReport>,
    /// `E[M_{t_k} - M_{t_{k-1}}]` on consecutive grid times.
    pub increments: Vec<EstimatorReport>,
}

impl MartingaleOutcome {
    pub fn pass(&self) -> bool {
        self.points.iter().chain(&self.increments).all(|r| r.pass)
    }
}

/// Checks that `E[M_t] = M_0` on a time grid.
///
/// Unstopped (`f(0) = 0` required):
/// `M_t = e^{-λt}F(ρ_t) + ∫_0^t e^{-λs}(λF - K)(ρ_s) ds`.
/// Stopped at `σ = inf{t: ρ_t = 0}`: `M_t = F(ρ_{t∧σ}) - ∫_0^{t∧σ} K(ρ_s) ds`.
/// `K` is the generator of the simulated process; the drift of the same
/// martingale built from the limiting `K` goes to `details`.
pub fn martingale_test(
    gf: &GeneratorFunctional<TruncatedMechanism>,
    mu: &AtomicMeasure,
    n_paths: usize,
    grid: &[f64],
    seed: u64,
    stopped: bool,
) -> Result<MartingaleOutcome> {
    if !stopped && gf.f.eval(0.0) != 0.0 {
        return Err(Error::Precondition(format!(
            "the unstopped martingale needs f(0) = 0, got {}",
            gf.f.eval(0.0)
        )));
    }
    if n_paths < 2 {
        return Err(config("n_paths", "needs at least 2 paths"));
    }
    if grid.is_empty() || grid.windows(2).any(|w| !(w[0] < w[1])) || !(grid[0] > 0.0) {
        return Err(config("grid", "needs increasing positive times"));
    }
    let tm = &gf.exponent;
    let lambda = if stopped { 0.0 } else { gf.lambda };
    let m0 = gf.f_of(mu);
    let rows: Vec<Vec<[f64; 2]>> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut acc = Discounted::new(gf, lambda, stopped);
            let mut ex = Explorer::new(tm.drift_rate(), mu, Some(&gf.f));
            let mut jumps = JumpStream::indexed(tm, seed, i as u64).peekable();
            let mut out = Vec::with_capacity(grid.len());
            for &t in grid {
                if !acc.stopped {
                    while let Some(&(s, l)) = jumps.peek() {
                        if s > t {
                            break;
                        }
                        jumps.next();
                        if ex.jump(s, l, &mut acc).is_break() {
                            break;
                        }
                    }
                    if !acc.stopped {
                        let _ = ex.advance(t, &mut acc);
                    }
                }
                if let Some(e) = acc.rates.error.take() {
                    return Err(e);
                }
                let (f_now, disc) = if acc.stopped { (1.0, 1.0) } else { ((-ex.rho_f()).exp(), (-lambda * t).exp()) };
                let base = disc * f_now + lambda * acc.i_f;
                out.push([base - acc.i_kd, base - acc.i_k]);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let params = |extra: Value| {
        let mut p = mc_params(gf, mu, n_paths, *grid.last().expect("non-empty"), seed);
        p["stopped"] = json!(stopped);
        p["grid"] = json!(grid);
        p["discount"] = json!(lambda);
        if let Value::Object(m) = extra {
            for (k, v) in m {
                p[k] = v;
            }
        }
        p
    };
    let name = if stopped { "martingale-stopped" } else { "martingale" };
    let mut points = Vec::new();
    let mut increments = Vec::new();
    for (k, &t) in grid.iter().enumerate() {
        let dm: Vec<f64> = rows.iter().map(|r| r[k][0] - m0).collect();
        let dk: Vec<f64> = rows.iter().map(|r| r[k][1] - m0).collect();
        let (m, se) = mean_se(&dm);
        let (mk, sek) = mean_se(&dk);
        points.push(
            EstimatorReport::new(name, params(json!({ "t": t })), m, se, 0.0, 0.0)
                .with_details(json!({ "m0": m0, "limit_k_drift": mk, "se_limit_k_drift": sek })),
        );
        if k > 0 {
            let inc: Vec<f64> = rows.iter().map(|r| r[k][0] - r[k - 1][0]).collect();
            let (m, se) = mean_se(&inc);
            increments.push(EstimatorReport::new(
                format!("{name}-increment"),
                params(json!({ "from": grid[k - 1], "t": t })),
                m,
                se,
                0.0,
                0.0,
            ));
        }
    }
    Ok(MartingaleOutcome { points, increments })
}

/// How much of the excursion process to harvest: excursions of `X - I` with
/// depth below `local_time`, split into `batches` independent paths, each
/// excursion followed for at most `cap` time units.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct ExcursionWindow {
    pub local_time: f64,
    pub batches: usize,
    pub cap: f64,
}

impl Default for ExcursionWindow {
    fn default() -> Self {
        Self { local_time: 100.0, batches: 100, cap: 1e4 }
    }
}

impl ExcursionWindow {
    fn validate(&self) -> Result<()> {
        if !(self.local_time > 0.0 && self.local_time.is_finite()) {
            return Err(config("window.local_time", "must be positive"));
        }
        if self.batches < 2 {
            return Err(config("window.batches", "needs at least 2 batches"));
        }
        if !(self.cap > 0.0) {
            return Err(config("window.cap", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, PartialEq)]
pub struct SweepStats {
    pub excursions: u64,
    pub censored: u64,
}

enum Stop {
    Done,
    Censored { t: f64, depth: f64 },
}

/// Forwards only the pieces inside excursions, clipped at the duration cap.
struct Clip<'v, V> {
    inner: &'v mut V,
    c: f64,
    window: f64,
    cap: f64,
    stop: Option<Stop>,
    stats: SweepStats,
}

impl<V: Visitor> Visitor for Clip<'_, V> {
    fn piece(&mut self, p: &Piece) -> ControlFlow<()> {
        match p.excursion_start {
            None => {
                if p.local_time + self.c * p.duration() >= self.window {
                    self.stop = Some(Stop::Done);
                    return ControlFlow::Break(());
                }
                ControlFlow::Continue(())
            }
            Some(a) => {
                let end = a + self.cap;
                if p.t1 > end {
                    let mut q = *p;
                    q.t1 = end;
                    if q.t1 > q.t0 {
                        let _ = self.inner.piece(&q);
                    }
                    self.stop = Some(Stop::Censored { t: end, depth: p.local_time });
                    return ControlFlow::Break(());
                }
                self.inner.piece(p)
            }
        }
    }

    fn jump(&mut self, t: f64, ell: f64, state: &Explorer<'_>) -> ControlFlow<()> {
        if state.frames().len() == 1 {
            self.stats.excursions += 1;
        }
        self.inner.jump(t, ell, state)
    }
}

/// Runs the exploration from `ρ_0 = 0` along stream `index` of `seed` and
/// shows `v` every piece of every excursion whose depth is below `window`.
/// An excursion longer than `cap` is cut there and the sweep restarts from
/// `X = I` at the same local time, which by the strong Markov property leaves
/// the law of the remaining excursions unchanged.
pub fn sweep_excursions<V: Visitor>(
    tm: &TruncatedMechanism,
    f: Option<&TestFunction>,
    window: f64,
    cap: f64,
    seed: u64,
    index: u64,
    v: &mut V,
) -> SweepStats {
    let c = tm.drift_rate();
    let zero = AtomicMeasure::zero();
    let mut jumps = JumpStream::indexed(tm, seed, index);
    let mut ex = Explorer::new(c, &zero, f);
    let mut clip = Clip { inner: v, c, window, cap, stop: None, stats: SweepStats::default() };
    let mut pending = None;
    loop {
        let (s, l) = pending.take().unwrap_or_else(|| jumps.next().expect("jump streams are infinite"));
        if ex.jump(s, l, &mut clip).is_continue() {
            continue;
        }
        match clip.stop.take() {
            Some(Stop::Censored { t, depth }) => {
                clip.stats.censored += 1;
                ex = Explorer::resume(c, t, -depth, depth, &zero, f);
                pending = Some((s, l));
            }
            Some(Stop::Done) | None => break,
        }
    }
    clip.stats
}

/// Excursion integrals of `F(ρ) = e^{-⟨ρ,f⟩}` shared by the duality and
/// Poisson representation checks:
/// `[∫ e^{-ψ_ε(γ)(t-α)} F(ρ_t) dt, ∫ e^{-γ⟨η_t,1⟩} F(ρ_t) dt, ∫ 1{H_t ≤ A} e^{-γ⟨η_t,1⟩} F(ρ_t) dt]`.
struct ExcursionIntegrals {
    psi_gamma: f64,
    gamma: f64,
    height_cap: f64,
    sums: [f64; 3],
}

impl Visitor for ExcursionIntegrals {
    fn piece(&mut self, p: &Piece) -> ControlFlow<()> {
        let d = p.duration();
        if !(d > 0.0) {
            return ControlFlow::Continue(());
        }
        let alpha = p.excursion_start.expect("clipped to excursions");
        let lhs = exp_affine_integral(-(self.psi_gamma * (p.t0 - alpha) + p.rho_f), self.psi_gamma + p.f_slope, d);
        let rhs = exp_affine_integral(-(self.gamma * p.eta_mass + p.rho_f), self.gamma * p.eta_slope + p.f_slope, d);
        self.sums[0] += lhs;
        self.sums[1] += rhs;
        if p.height <= self.height_cap {
            self.sums[2] += rhs;
        }
        ControlFlow::Continue(())
    }
}

/// Per-batch estimates of `N[·]` for the three excursion integrals.
#[derive(Clone, Debug, Serialize)]
pub struct ExcursionSample {
    pub window: ExcursionWindow,
    pub gamma: f64,
    pub height_cap: f64,
    pub seed: u64,
    /// One row per batch, each already divided by the batch's local time.
    pub batches: Vec<[f64; 3]>,
    pub stats: SweepStats,
}

impl ExcursionSample {
    pub fn column(&self, k: usize) -> Vec<f64> {
        self.batches.iter().map(|b| b[k]).collect()
    }
}

/// Harvests the excursion integrals for `F(ρ) = e^{-⟨ρ,f⟩}` and the given `γ`.
pub fn excursion_integrals(
    tm: &TruncatedMechanism,
    f: &TestFunction,
    gamma: f64,
    height_cap: f64,
    window: ExcursionWindow,
    seed: u64,
) -> Result<ExcursionSample> {
    window.validate()?;
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(config("gamma", "must be finite and non-negative"));
    }
    let psi_gamma = tm.psi(gamma)?;
    let r = window.local_time / window.batches as f64;
    let rows: Vec<([f64; 3], SweepStats)> = (0..window.batches)
        .into_par_iter()
        .map(|b| {
            let mut v = ExcursionIntegrals { psi_gamma, gamma, height_cap, sums: [0.0; 3] };
            let stats = sweep_excursions(tm, Some(f), r, window.cap, seed, b as u64, &mut v);
            (v.sums.map(|s| s / r), stats)
        })
        .collect();
    let mut stats = SweepStats::default();
    for (_, s) in &rows {
        stats.excursions += s.excursions;
        stats.censored += s.censored;
    }
    Ok(ExcursionSample {
        window,
        gamma,
        height_cap,
        seed,
        batches: rows.into_iter().map(|(b, _)| b).collect(),
        stats,
    })
}

fn duality_params(tm: &TruncatedMechanism, f: &TestFunction, sample: &ExcursionSample) -> Value {
    json!({
        "mechanism": tm.mechanism(),
        "epsilon": tm.epsilon(),
        "drift_rate": tm.drift_rate(),
        "f": f.spec(),
        "gamma": sample.gamma,
        "window": sample.window,
        "seed": sample.seed,
        "excursions": sample.stats.excursions,
        "censored": sample.stats.censored,
    })
}

/// `N[∫_0^σ e^{-ψ(γ)t} F(ρ_t) dt] = N[∫_0^σ e^{-γ⟨η_t,1⟩} F(ρ_t) dt]`, both
/// sides on the same excursions. The returned pair is the difference check
/// and the agreement of the difference between the two halves of the batches.
pub fn duality_test(
    tm: &TruncatedMechanism,
    f: &TestFunction,
    gamma: f64,
    window: ExcursionWindow,
    seed: u64,
) -> Result<(EstimatorReport, EstimatorReport)> {
    let sample = excursion_integrals(tm, f, gamma, f64::INFINITY, window, seed)?;
    Ok(duality_reports(tm, f, &sample))
}

pub fn duality_reports(tm: &TruncatedMechanism, f: &TestFunction, sample: &ExcursionSample) -> (EstimatorReport, EstimatorReport) {
    let lhs = sample.column(0);
    let rhs = sample.column(1);
    let diff: Vec<f64> = lhs.iter().zip(&rhs).map(|(a, b)| a - b).collect();
    let (m, se) = mean_se(&diff);
    let (ml, sel) = mean_se(&lhs);
    let (mr, ser) = mean_se(&rhs);
    let params = duality_params(tm, f, sample);
    let main = EstimatorReport::new("duality", params.clone(), m, se, 0.0, 0.0)
        .with_details(json!({ "lhs": ml, "se_lhs": sel, "rhs": mr, "se_rhs": ser }));
    let half = diff.len() / 2;
    let (m1, se1) = mean_se(&diff[..half]);
    let (m2, se2) = mean_se(&diff[half..]);
    let split = EstimatorReport::new("duality-batches", params, m1 - m2, se1.hypot(se2), 0.0, 0.0)
        .with_details(json!({ "first_half": m1, "second_half": m2 }));
    (main, split)
}
