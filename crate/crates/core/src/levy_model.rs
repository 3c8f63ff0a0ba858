//! Branching mechanisms: the Laplace exponent, its inverse, exponential
//! tilting and finite-activity truncation.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Error, Result};
use crate::quadrature::Quadrature;

/// Normalising constant making the stable exponent equal to `λ^α`.
pub fn stable_constant(alpha: f64) -> f64 {
    alpha * (alpha - 1.0) / libm::tgamma(2.0 - alpha)
}

/// `e^{-x} - 1 + x` without cancellation for small `x`.
#[inline]
pub(crate) fn phi(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        x * x * (0.5 - x * (1.0 / 6.0 - x / 24.0))
    } else {
        (-x).exp_m1() + x
    }
}

/// `1 - e^{-x}`.
#[inline]
fn one_minus_exp(x: f64) -> f64 {
    -(-x).exp_m1()
}

fn check_lambda(lam: f64) -> Result<()> {
    if lam >= 0.0 && lam.is_finite() {
        Ok(())
    } else {
        Err(domain(format!("lambda must be finite and non-negative, got {lam}")))
    }
}

/// Something with a Laplace exponent of a spectrally positive Lévy process.
pub trait LaplaceExponent {
    fn psi(&self, lam: f64) -> Result<f64>;

    fn psi_prime(&self, lam: f64) -> Result<f64>;

    /// Inverse of `psi` on `[0, ∞)`.
    fn psi_inverse(&self, lam: f64) -> Result<f64> {
        invert(|x| self.psi(x), |x| self.psi_prime(x), lam)
    }
}

/// Safeguarded Newton iteration inside a bisection bracket.
fn invert(
    psi: impl Fn(f64) -> Result<f64>,
    dpsi: impl Fn(f64) -> Result<f64>,
    lam: f64,
) -> Result<f64> {
    check_lambda(lam)?;
    if lam == 0.0 {
        return Ok(0.0);
    }
    let tol = 1e-10 * lam.max(1.0);
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    while psi(hi)? < lam {
        lo = hi;
        hi *= 2.0;
        if hi > 1e300 {
            return Err(Error::Numeric {
                what: "psi_inverse bracketing".into(),
                residual: lam,
            });
        }
    }
    let mut x = 0.5 * (lo + hi);
    let mut best = (f64::INFINITY, x);
    for _ in 0..300 {
        let v = psi(x)? - lam;
        if v.abs() < best.0 {
            best = (v.abs(), x);
        }
        if v.abs() <= 0.01 * tol {
            return Ok(x);
        }
        if v > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        if hi - lo <= 4.0 * f64::EPSILON * hi {
            break;
        }
        let slope = dpsi(x)?;
        let mut next = x - v / slope;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        x = next;
    }
    if best.0 <= tol {
        Ok(best.1)
    } else {
        Err(Error::Numeric {
            what: "psi_inverse".into(),
            residual: best.0,
        })
    }
}

/// Density `coef * ℓ^exponent` on `[lo, hi)`.
#[derive(Clone, Copy, Debug)]
struct PowerPiece {
    lo: f64,
    hi: f64,
    coef: f64,
    exponent: f64,
}

impl PowerPiece {
    /// `∫ ℓ^k coef ℓ^s dℓ` over the piece intersected with `[a, b]`.
    fn moment(&self, k: f64, a: f64, b: f64) -> f64 {
        let lo = self.lo.max(a);
        let hi = self.hi.min(b);
        if !(hi > lo) {
            return 0.0;
        }
        let p = k + self.exponent + 1.0;
        if p.abs() < 1e-13 {
            self.coef * (hi.ln() - lo.ln())
        } else {
            self.coef * (hi.powf(p) - lo.powf(p)) / p
        }
    }
}

/// Jump density given on a grid, interpolated linearly in log-log
/// coordinates. Below the first point the first segment's power law is
/// extended to 0; above the last point the density vanishes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabulatedDensity {
    points: Vec<(f64, f64)>,
}

impl TabulatedDensity {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() < 2 {
            return Err(config("density", "need at least two grid points"));
        }
        for (i, &(l, v)) in points.iter().enumerate() {
            if !(l > 0.0 && l.is_finite() && v > 0.0 && v.is_finite()) {
                return Err(config(
                    format!("density[{i}]"),
                    "ell and density must be positive and finite",
                ));
            }
            if i > 0 && l <= points[i - 1].0 {
                return Err(config(format!("density[{i}]"), "ell must be strictly increasing"));
            }
        }
        Ok(Self { points })
    }

    /// Reads `(ell, density)` rows; a non-numeric first row is taken as a header.
    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut points = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let field = |j: usize| rec.get(j).map(str::parse::<f64>);
            match (field(0), field(1)) {
                (Some(Ok(l)), Some(Ok(v))) => points.push((l, v)),
                _ if i == 0 => continue,
                _ => return Err(config(format!("density row {}", i + 1), "expected two numbers")),
            }
        }
        Self::new(points)
    }

    pub fn from_csv_path(path: &Path) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn density(&self, ell: f64) -> f64 {
        self.pieces()
            .iter()
            .find(|p| ell >= p.lo && ell < p.hi)
            .map_or(0.0, |p| p.coef * ell.powf(p.exponent))
    }

    fn pieces(&self) -> Vec<PowerPiece> {
        let seg = |i: usize| {
            let (l0, v0) = self.points[i];
            let (l1, v1) = self.points[i + 1];
            let s = (v1 / v0).ln() / (l1 / l0).ln();
            (s, v0 / l0.powf(s))
        };
        let mut out = Vec::with_capacity(self.points.len());
        let (s0, c0) = seg(0);
        out.push(PowerPiece { lo: 0.0, hi: self.points[0].0, coef: c0, exponent: s0 });
        for i in 0..self.points.len() - 1 {
            let (s, c) = seg(i);
            out.push(PowerPiece {
                lo: self.points[i].0,
                hi: self.points[i + 1].0,
                coef: c,
                exponent: s,
            });
        }
        out
    }
}

/// The undamped part of the Lévy measure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JumpMeasure {
    /// `C ℓ^{-1-α} dℓ` with the canonical constant.
    Stable { alpha: f64 },
    /// The stable density cut off above `upper`.
    TruncatedStable { alpha: f64, upper: f64 },
    Tabulated(TabulatedDensity),
}

/// A branching mechanism `ψ(λ) = α₀λ + ∫ (e^{-λℓ} - 1 + λℓ) π(dℓ)` with
/// `π(dℓ) = e^{-dℓ} ν(dℓ)`, `ν` the jump measure and `d` the damping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevyMechanism {
    pub alpha0: f64,
    pub jumps: JumpMeasure,
    #[serde(default)]
    pub damping: f64,
}

impl LevyMechanism {
    pub fn new(alpha0: f64, jumps: JumpMeasure) -> Self {
        Self { alpha0, jumps, damping: 0.0 }
    }

    pub fn stable(alpha: f64) -> Self {
        Self::new(0.0, JumpMeasure::Stable { alpha })
    }

    pub fn with_alpha0(mut self, alpha0: f64) -> Self {
        self.alpha0 = alpha0;
        self
    }

    pub fn with_damping(mut self, damping: f64) -> Self {
        self.damping = damping;
        self
    }

    fn stable_index(&self) -> Option<f64> {
        match self.jumps {
            JumpMeasure::Stable { alpha } | JumpMeasure::TruncatedStable { alpha, .. } => Some(alpha),
            JumpMeasure::Tabulated(_) => None,
        }
    }

    fn pieces(&self) -> Vec<PowerPiece> {
        match &self.jumps {
            JumpMeasure::Stable { alpha } => vec![PowerPiece {
                lo: 0.0,
                hi: f64::INFINITY,
                coef: stable_constant(*alpha),
                exponent: -1.0 - alpha,
            }],
            JumpMeasure::TruncatedStable { alpha, upper } => vec![PowerPiece {
                lo: 0.0,
                hi: *upper,
                coef: stable_constant(*alpha),
                exponent: -1.0 - alpha,
            }],
            JumpMeasure::Tabulated(t) => t.pieces(),
        }
    }

    /// Density of `π` at `ell`.
    pub fn density(&self, ell: f64) -> f64 {
        if !(ell > 0.0) {
            return 0.0;
        }
        let base = self
            .pieces()
            .iter()
            .find(|p| ell >= p.lo && ell < p.hi)
            .map_or(0.0, |p| p.coef * ell.powf(p.exponent));
        base * (-self.damping * ell).exp()
    }

    /// `∫_a^b g(ℓ) π(dℓ)`, by adaptive quadrature in `y = ln ℓ`, split at ℓ = 1
    /// and at the grid points of the density.
    fn pi_integral<G: Fn(f64) -> f64>(&self, a: f64, b: f64, g: G) -> Result<f64> {
        let quad = Quadrature::default();
        let d = self.damping;
        let mut total = 0.0;
        for piece in self.pieces() {
            let lo = piece.lo.max(a);
            let hi = piece.hi.min(b);
            if !(hi > lo) {
                continue;
            }
            let log_coef = piece.coef.ln();
            let h = |y: f64| {
                let l = y.exp();
                if l == 0.0 || !l.is_finite() {
                    return 0.0;
                }
                let gv = g(l);
                if gv == 0.0 {
                    return 0.0;
                }
                gv * (log_coef + (piece.exponent + 1.0) * y - d * l).exp()
            };
            let (ylo, yhi) = (lo.ln(), hi.ln());
            let cuts: Vec<(f64, f64)> = if ylo < 0.0 && yhi > 0.0 {
                vec![(ylo, 0.0), (0.0, yhi)]
            } else {
                vec![(ylo, yhi)]
            };
            for (u, v) in cuts {
                let part = match (u.is_finite(), v.is_finite()) {
                    (true, true) => quad.integrate(h, u, v)?,
                    (true, false) => quad.integrate_to_infinity(h, u)?,
                    (false, true) => quad.integrate_to_infinity(|t| h(-t), -v)?,
                    (false, false) => unreachable!("split at zero"),
                };
                total += part.value;
            }
        }
        Ok(total)
    }

    /// `∫_{(a,b)} ℓ^k π(dℓ)`; closed form when undamped, may be `+∞`.
    pub fn moment(&self, k: f64, a: f64, b: f64) -> Result<f64> {
        if self.damping == 0.0 {
            Ok(self.pieces().iter().map(|p| p.moment(k, a, b)).sum())
        } else {
            self.pi_integral(a, b, |l| l.powf(k))
        }
    }

    /// Applies `θ`-tilting: `ψ^{(θ)}(λ) = ψ(λ + θ) - ψ(θ)`.
    pub fn tilt(&self, theta: f64) -> Result<LevyMechanism> {
        if !(theta >= 0.0 && theta.is_finite()) {
            return Err(domain(format!("tilt parameter must be non-negative, got {theta}")));
        }
        // α₀ + ∫ ℓ(1 - e^{-θℓ}) π(dℓ) is exactly ψ'(θ).
        Ok(LevyMechanism {
            alpha0: self.psi_prime(theta)?,
            jumps: self.jumps.clone(),
            damping: self.damping + theta,
        })
    }

    pub fn validate(&self) -> ValidationReport {
        validate(self, DIVERGENCE_THRESHOLD)
    }

    /// Validation with a custom divergence threshold for the infinite-variation check.
    pub fn validate_with_threshold(&self, threshold: f64) -> ValidationReport {
        validate(self, threshold)
    }

    /// Keeps only jumps larger than `eps`.
    pub fn truncate(&self, eps: f64) -> Result<TruncatedMechanism> {
        TruncatedMechanism::new(self.clone(), eps)
    }

    pub fn from_spec(spec: &MechanismSpec, base_dir: Option<&Path>) -> Result<Self> {
        let stable_alpha = |alpha: f64| {
            if alpha > 1.0 && alpha < 2.0 {
                Ok(alpha)
            } else {
                Err(config("alpha", format!("stable index must lie in (1,2), got {alpha}")))
            }
        };
        let (alpha0, damping, jumps) = match spec {
            MechanismSpec::Stable { alpha, alpha0, damping } => {
                (*alpha0, *damping, JumpMeasure::Stable { alpha: stable_alpha(*alpha)? })
            }
            MechanismSpec::TruncatedStable { alpha, upper, alpha0, damping } => {
                if !(*upper > 0.0) {
                    return Err(config("upper", "cutoff must be positive"));
                }
                (
                    *alpha0,
                    *damping,
                    JumpMeasure::TruncatedStable { alpha: stable_alpha(*alpha)?, upper: *upper },
                )
            }
            MechanismSpec::Tabulated { path, alpha0, damping } => {
                let full = match base_dir {
                    Some(dir) if path.is_relative() => dir.join(path),
                    _ => path.clone(),
                };
                (*alpha0, *damping, JumpMeasure::Tabulated(TabulatedDensity::from_csv_path(&full)?))
            }
        };
        if !(alpha0 >= 0.0) {
            return Err(config("alpha0", "must be non-negative"));
        }
        if !(damping >= 0.0) {
            return Err(config("damping", "must be non-negative"));
        }
        Ok(Self { alpha0, jumps, damping })
    }

    pub fn from_toml_str(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        Self::from_spec(&toml::from_str(text)?, base_dir)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, path.parent())
    }
}

impl LaplaceExponent for LevyMechanism {
    fn psi(&self, lam: f64) -> Result<f64> {
        check_lambda(lam)?;
        if lam == 0.0 {
            return Ok(0.0);
        }
        if let JumpMeasure::Stable { alpha } = self.jumps {
            let d = self.damping;
            let jumps = if d == 0.0 {
                lam.powf(alpha)
            } else {
                (lam + d).powf(alpha) - d.powf(alpha) - alpha * d.powf(alpha - 1.0) * lam
            };
            return Ok(self.alpha0 * lam + jumps);
        }
        Ok(self.alpha0 * lam + self.pi_integral(0.0, f64::INFINITY, |l| phi(lam * l))?)
    }

    fn psi_prime(&self, lam: f64) -> Result<f64> {
        check_lambda(lam)?;
        if let JumpMeasure::Stable { alpha } = self.jumps {
            let d = self.damping;
            let jumps = if d == 0.0 {
                alpha * lam.powf(alpha - 1.0)
            } else {
                alpha * ((lam + d).powf(alpha - 1.0) - d.powf(alpha - 1.0))
            };
            return Ok(self.alpha0 + jumps);
        }
        if lam == 0.0 {
            return Ok(self.alpha0);
        }
        Ok(self.alpha0 + self.pi_integral(0.0, f64::INFINITY, |l| l * one_minus_exp(lam * l))?)
    }
}

/// Structured description of a mechanism, as read from a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MechanismSpec {
    Stable {
        alpha: f64,
        #[serde(default)]
        alpha0: f64,
        #[serde(default)]
        damping: f64,
    },
    TruncatedStable {
        alpha: f64,
        upper: f64,
        #[serde(default)]
        alpha0: f64,
        #[serde(default)]
        damping: f64,
    },
    Tabulated {
        path: PathBuf,
        #[serde(default)]
        alpha0: f64,
        #[serde(default)]
        damping: f64,
    },
}

impl Default for MechanismSpec {
    fn default() -> Self {
        MechanismSpec::Stable { alpha: 1.5, alpha0: 0.0, damping: 0.0 }
    }
}

pub const DIVERGENCE_THRESHOLD: f64 = 1e6;
const SHELLS: usize = 60;

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    /// Computed value, `inf` when divergence was detected.
    pub value: f64,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Shell masses `∫ ℓ^k π` over `[2^{-j-1}, 2^{-j}]` (towards 0) or
/// `[2^j, 2^{j+1}]` (towards ∞).
fn shells(mech: &LevyMechanism, k: f64, towards_zero: bool) -> Result<Vec<f64>> {
    (0..SHELLS)
        .map(|j| {
            let (a, b) = if towards_zero {
                (0.5_f64.powi(j as i32 + 1), 0.5_f64.powi(j as i32))
            } else {
                (2.0_f64.powi(j as i32), 2.0_f64.powi(j as i32 + 1))
            };
            mech.pi_integral(a, b, |l| l.powf(k))
        })
        .collect()
}

/// Sum of a shell sequence, extrapolating a geometric tail. `None` means
/// the series does not converge.
fn shell_sum(s: &[f64]) -> Option<f64> {
    let sum: f64 = s.iter().sum();
    let n = s.len();
    let last = s[n - 1];
    if last <= 1e-13 * sum.max(f64::MIN_POSITIVE) {
        return Some(sum);
    }
    let q = last / s[n - 2];
    (q < 1.0 - 1e-3).then(|| sum + last * q / (1.0 - q))
}

fn validate(mech: &LevyMechanism, threshold: f64) -> ValidationReport {
    let mut checks = vec![Check {
        name: "alpha0_nonnegative",
        pass: mech.alpha0 >= 0.0,
        value: mech.alpha0,
        detail: "alpha0 >= 0".into(),
    }];
    if !(mech.damping >= 0.0) {
        checks.push(Check {
            name: "damping_nonnegative",
            pass: false,
            value: mech.damping,
            detail: "damping >= 0".into(),
        });
    }
    if let Some(alpha) = mech.stable_index() {
        let ok = alpha > 1.0 && alpha < 2.0;
        let c = stable_constant(alpha);
        let integ = if ok { c / (2.0 - alpha) + c / (alpha - 1.0) } else { f64::INFINITY };
        checks.push(Check {
            name: "finite_l_wedge_l2",
            pass: ok,
            value: integ,
            detail: format!("analytic: int l^(1-alpha) near 0 and l^(-alpha) at inf, alpha = {alpha}"),
        });
        checks.push(Check {
            name: "infinite_variation",
            pass: ok,
            value: if alpha > 1.0 { f64::INFINITY } else { c / (1.0 - alpha) },
            detail: format!("analytic: int_0^1 l^(-alpha) dl diverges iff alpha >= 1, alpha = {alpha}"),
        });
        return ValidationReport { checks };
    }

    let numeric = |name: &'static str, r: Result<Vec<f64>>| -> std::result::Result<Vec<f64>, Check> {
        r.map_err(|e| Check { name, pass: false, value: f64::NAN, detail: e.to_string() })
    };
    // ∫(ℓ∧ℓ²)π < ∞: ℓ² on dyadic shells below 1, ℓ on dyadic shells above 1.
    let integrability = match (
        numeric("finite_l_wedge_l2", shells(mech, 2.0, true)),
        numeric("finite_l_wedge_l2", shells(mech, 1.0, false)),
    ) {
        (Ok(low), Ok(high)) => match (shell_sum(&low), shell_sum(&high)) {
            (Some(a), Some(b)) => Check {
                name: "finite_l_wedge_l2",
                pass: true,
                value: a + b,
                detail: format!("dyadic shells: {a:e} below 1, {b:e} above 1"),
            },
            (a, b) => Check {
                name: "finite_l_wedge_l2",
                pass: false,
                value: f64::INFINITY,
                detail: format!(
                    "shell series not convergent (below 1: {}, above 1: {})",
                    if a.is_some() { "ok" } else { "diverges" },
                    if b.is_some() { "ok" } else { "diverges" }
                ),
            },
        },
        (Err(c), _) | (_, Err(c)) => c,
    };
    checks.push(integrability);

    let variation = match numeric("infinite_variation", shells(mech, 1.0, true)) {
        Ok(s) => {
            let mut partial = 0.0;
            let mut crossed = None;
            for (k, v) in s.iter().enumerate() {
                partial += v;
                if partial > threshold {
                    crossed = Some(k);
                    break;
                }
            }
            match crossed {
                Some(k) => Check {
                    name: "infinite_variation",
                    pass: true,
                    value: f64::INFINITY,
                    detail: format!("partial sum of int l pi exceeded {threshold:e} at shell {k}"),
                },
                None => Check {
                    name: "infinite_variation",
                    pass: false,
                    value: partial,
                    detail: format!("partial sums stayed below {threshold:e} over {SHELLS} shells"),
                },
            }
        }
        Err(c) => c,
    };
    checks.push(variation);
    ValidationReport { checks }
}

/// Sampler for the normalised measure `ℓ^k π(dℓ)` on `(lo, ∞)`: a mixture of
/// truncated power laws with rejection for the damping factor.
#[derive(Clone, Debug)]
pub struct TailSampler {
    lo: f64,
    damping: f64,
    /// Per piece: (a, b, p) with the piece density proportional to `ℓ^{p-1}`.
    pieces: Vec<(f64, f64, f64)>,
    cumulative: Vec<f64>,
}

impl TailSampler {
    /// Returns `None` when the undamped proposal has zero or infinite mass.
    fn new(mech: &LevyMechanism, k: f64, lo: f64) -> Option<Self> {
        let mut pieces = Vec::new();
        let mut cumulative = Vec::new();
        let mut total = 0.0;
        for p in mech.pieces() {
            let w = p.moment(k, lo, f64::INFINITY);
            if w > 0.0 {
                total += w;
                pieces.push((p.lo.max(lo), p.hi, k + p.exponent + 1.0));
                cumulative.push(total);
            }
        }
        if !(total > 0.0 && total.is_finite()) {
            return None;
        }
        for c in &mut cumulative {
            *c /= total;
        }
        Some(Self { lo, damping: mech.damping, pieces, cumulative })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        loop {
            let i = if self.pieces.len() == 1 {
                0
            } else {
                let pick: f64 = rng.random();
                self.cumulative.partition_point(|&c| c <= pick).min(self.pieces.len() - 1)
            };
            let (a, b, p) = self.pieces[i];
            let u: f64 = rng.random();
            let x = if p.abs() < 1e-13 {
                a * (b / a).powf(u)
            } else if b.is_infinite() {
                a * (1.0 - u).powf(1.0 / p)
            } else {
                let (ap, bp) = (a.powf(p), b.powf(p));
                (ap + u * (bp - ap)).powf(1.0 / p).clamp(a, b)
            };
            if self.damping == 0.0 {
                return x;
            }
            let accept: f64 = rng.random();
            if accept < (-self.damping * (x - self.lo)).exp() {
                return x;
            }
        }
    }
}

/// Compound-Poisson approximation keeping only jumps larger than `ε`.
#[derive(Clone, Debug)]
pub struct TruncatedMechanism {
    mech: LevyMechanism,
    epsilon: f64,
    drift_rate: f64,
    jump_rate: f64,
    sampler: TailSampler,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct TruncationSummary {
    pub epsilon: f64,
    pub drift_rate: f64,
    pub jump_rate: f64,
}

/// Below this jump rate the tail is treated as empty.
const EMPTY_TAIL_RATE: f64 = 1e-300;

impl TruncatedMechanism {
    pub fn new(mech: LevyMechanism, eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(domain(format!("truncation level must be positive, got {eps}")));
        }
        let jump_rate = mech.moment(0.0, eps, f64::INFINITY)?;
        if !(jump_rate > EMPTY_TAIL_RATE) {
            return Err(Error::EmptyJumpTail { eps, rate: jump_rate });
        }
        if !jump_rate.is_finite() {
            return Err(domain("jump tail has infinite mass"));
        }
        let drift_rate = mech.alpha0 + mech.moment(1.0, eps, f64::INFINITY)?;
        if !drift_rate.is_finite() {
            return Err(domain("jump measure has an infinite first moment at infinity"));
        }
        let sampler = TailSampler::new(&mech, 0.0, eps)
            .ok_or(Error::EmptyJumpTail { eps, rate: jump_rate })?;
        Ok(Self { mech, epsilon: eps, drift_rate, jump_rate, sampler })
    }

    pub fn mechanism(&self) -> &LevyMechanism {
        &self.mech
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Downward drift `c`.
    pub fn drift_rate(&self) -> f64 {
        self.drift_rate
    }

    /// Jump intensity `π((ε, ∞))`.
    pub fn jump_rate(&self) -> f64 {
        self.jump_rate
    }

    pub fn summary(&self) -> TruncationSummary {
        TruncationSummary {
            epsilon: self.epsilon,
            drift_rate: self.drift_rate,
            jump_rate: self.jump_rate,
        }
    }

    pub fn sample_jump<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.sampler.sample(rng)
    }

    /// `sup |ψ_ε - ψ|` over `grid`.
    pub fn bias_diagnostic(&self, grid: &[f64]) -> Result<f64> {
        let mut sup = 0.0_f64;
        for &lam in grid {
            sup = sup.max((self.psi(lam)? - self.mech.psi(lam)?).abs());
        }
        Ok(sup)
    }

    /// Small-jump parts `∫_0^ε (e^{-λℓ}-1+λℓ) π` and `∫_0^ε ℓ(1-e^{-λℓ}) π` for a
    /// damped stable measure, by power series in `ε`.
    fn stable_small_jumps(&self, alpha: f64, lam: f64) -> (f64, f64) {
        let eps = self.epsilon;
        let c = stable_constant(alpha);
        let x = (lam + self.mech.damping) * eps;
        let y = self.mech.damping * eps;
        let le = lam * eps;
        // tx = (-x)^k/k!, ty = (-y)^k/k!
        let (mut tx, mut ty) = (-x, -y);
        let (mut s_psi, mut s_der) = (0.0, (ty - tx) / (2.0 - alpha));
        let mut k = 2.0;
        loop {
            let ty_prev = ty;
            tx *= -x / k;
            ty *= -y / k;
            let a = (tx - ty + le * ty_prev) / (k - alpha);
            let b = (ty - tx) / (k + 1.0 - alpha);
            s_psi += a;
            s_der += b;
            if k > x + 3.0 && a.abs() <= 1e-18 * s_psi.abs() && b.abs() <= 1e-18 * s_der.abs() {
                break;
            }
            if k > 200.0 {
                break;
            }
            k += 1.0;
        }
        (c * eps.powf(-alpha) * s_psi, c * eps.powf(1.0 - alpha) * s_der)
    }

    fn series_applies(&self, lam: f64) -> Option<f64> {
        match self.mech.jumps {
            JumpMeasure::Stable { alpha } if (lam + self.mech.damping) * self.epsilon <= 2.0 => Some(alpha),
            _ => None,
        }
    }
}

impl LaplaceExponent for TruncatedMechanism {
    /// `ψ_ε(λ) = α₀λ + ∫_{(ε,∞)} (e^{-λℓ}-1+λℓ) π(dℓ)`.
    fn psi(&self, lam: f64) -> Result<f64> {
        check_lambda(lam)?;
        if lam == 0.0 {
            return Ok(0.0);
        }
        if let Some(alpha) = self.series_applies(lam) {
            return Ok(self.mech.psi(lam)? - self.stable_small_jumps(alpha, lam).0);
        }
        Ok(self.mech.alpha0 * lam + self.mech.pi_integral(self.epsilon, f64::INFINITY, |l| phi(lam * l))?)
    }

    fn psi_prime(&self, lam: f64) -> Result<f64> {
        check_lambda(lam)?;
        if let Some(alpha) = self.series_applies(lam) {
            return Ok(self.mech.psi_prime(lam)? - self.stable_small_jumps(alpha, lam).1);
        }
        if lam == 0.0 {
            return Ok(self.mech.alpha0);
        }
        Ok(self.mech.alpha0
            + self
                .mech
                .pi_integral(self.epsilon, f64::INFINITY, |l| l * one_minus_exp(lam * l))?)
    }
}

/// Sampler for marks drawn from `ℓ π(dℓ)` restricted to `(δ, ∞)`, together
/// with the total intensity `∫_{(δ,∞)} ℓ π(dℓ)`.
pub fn size_biased_tail(mech: &LevyMechanism, delta: f64) -> Result<(f64, TailSampler)> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(config("delta", "must be positive"));
    }
    let rate = mech.moment(1.0, delta, f64::INFINITY)?;
    if !(rate.is_finite()) {
        return Err(config("delta", "l pi(dl) is not integrable on (delta, inf)"));
    }
    let sampler = TailSampler::new(mech, 1.0, delta)
        .ok_or_else(|| config("delta", "l pi(dl) has no mass on (delta, inf)"))?;
    Ok((rate, sampler))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    /// Independent oracle: quadrature directly in ℓ, split at 1, with the
    /// singular substitution near 0.
    fn oracle_integral(mech: &LevyMechanism, lo: f64, g: impl Fn(f64) -> f64) -> f64 {
        let q = Quadrature::with_tolerance(1e-12, 0.0);
        let h = |l: f64| g(l) * mech.density(l);
        // ℓ = s u^{-4} on [s, ∞) turns the power tail into a smooth integrand.
        let tail = |s: f64| {
            q.integrate(|u: f64| if u == 0.0 { 0.0 } else { h(s * u.powi(-4)) * 4.0 * s * u.powi(-5) }, 0.0, 1.0)
                .unwrap()
                .value
        };
        if lo < 1.0 {
            q.integrate_left_singular(h, lo, 1.0, 6.0).unwrap().value + tail(1.0)
        } else {
            tail(lo)
        }
    }

    #[test]
    fn stable_psi_matches_quadrature() {
        let m = LevyMechanism::stable(1.5);
        let quad = oracle_integral(&m, 0.0, |l| phi(4.0 * l));
        assert!((quad - 8.0).abs() < 1e-8, "{quad}");
        assert_eq!(m.psi(4.0).unwrap(), 8.0);
        let m2 = m.clone().with_alpha0(2.0);
        let quad = 2.0 + oracle_integral(&m2, 0.0, phi);
        assert!((quad - 3.0).abs() < 1e-8);
        assert!((m2.psi(1.0).unwrap() - 3.0).abs() < 1e-14);
        assert_eq!(m.psi(0.0).unwrap(), 0.0);
        assert!(m.psi(-1.0).is_err());
    }

    #[test]
    fn generic_quadrature_agrees_with_closed_form() {
        // A truncated stable with a huge cutoff is numerically the stable law.
        let alpha = 1.5;
        let big = LevyMechanism::new(0.0, JumpMeasure::TruncatedStable { alpha, upper: 1e30 });
        for lam in [0.01f64, 0.5, 2.0, 40.0] {
            let exact = lam.powf(alpha);
            let v = big.psi(lam).unwrap();
            assert!((v - exact).abs() < 1e-9 * exact.max(1.0), "{lam}: {v} vs {exact}");
            let d = big.psi_prime(lam).unwrap();
            assert!((d - alpha * lam.sqrt()).abs() < 1e-8 * d.max(1.0));
        }
        let damped = LevyMechanism::stable(1.3).with_damping(0.7);
        for lam in [0.1, 1.0, 5.0] {
            let quad = oracle_integral(&damped, 0.0, |l| phi(lam * l));
            assert!((damped.psi(lam).unwrap() - quad).abs() < 1e-9 * quad.max(1.0));
        }
    }

    #[test]
    fn inverse_stable() {
        let m = LevyMechanism::stable(1.5);
        let g = m.psi_inverse(8.0).unwrap();
        assert!((g - 4.0).abs() < 1e-10);
        assert_eq!(m.psi_inverse(0.0).unwrap(), 0.0);
        let mut rng = stream(1, 0);
        for _ in 0..100 {
            let lam: f64 = 1e3 * rng.random::<f64>();
            let back = m.psi(m.psi_inverse(lam).unwrap()).unwrap();
            assert!((back - lam).abs() <= 1e-10 * lam.max(1.0));
        }
    }

    #[test]
    fn tilt_examples() {
        let m = LevyMechanism::stable(1.5);
        let t = m.tilt(1.0).unwrap();
        let v = t.psi(2.0).unwrap();
        assert!((v - (3f64.powf(1.5) - 1.0)).abs() < 1e-12);
        let t0 = m.tilt(0.0).unwrap();
        for lam in [0.3, 1.0, 7.0] {
            assert_eq!(t0.psi(lam).unwrap(), m.psi(lam).unwrap());
        }
        assert!(t.validate().passed());
        assert!(m.tilt(-1.0).is_err());
    }

    #[test]
    fn tilt_of_tabulated_matches_shifted_psi() {
        let pts: Vec<(f64, f64)> = (0..40)
            .map(|i| {
                let l = 1e-3 * 1.3f64.powi(i);
                (l, stable_constant(1.6) * l.powf(-2.6) * (-0.5 * l).exp())
            })
            .collect();
        let m = LevyMechanism::new(0.2, JumpMeasure::Tabulated(TabulatedDensity::new(pts).unwrap()));
        let theta = 0.8;
        let t = m.tilt(theta).unwrap();
        let base = m.psi(theta).unwrap();
        for lam in [0.2, 1.5, 6.0] {
            let want = m.psi(lam + theta).unwrap() - base;
            let got = t.psi(lam).unwrap();
            assert!((got - want).abs() < 1e-9 * want.max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn validation_reports() {
        assert!(LevyMechanism::stable(1.5).validate().passed());
        let neg = LevyMechanism::stable(1.5).with_alpha0(-1.0).validate();
        assert!(!neg.check("alpha0_nonnegative").unwrap().pass);
        let pts: Vec<(f64, f64)> = (0..60)
            .map(|i| {
                let l = 1e-4 * 1.25f64.powi(i);
                (l, (-l).exp())
            })
            .collect();
        let finite = LevyMechanism::new(0.0, JumpMeasure::Tabulated(TabulatedDensity::new(pts).unwrap()));
        let r = finite.validate();
        assert!(r.check("finite_l_wedge_l2").unwrap().pass);
        assert!(!r.check("infinite_variation").unwrap().pass);

        let pts: Vec<(f64, f64)> = (0..60)
            .map(|i| {
                let l = 1e-4 * 1.25f64.powi(i);
                (l, l.powf(-2.5))
            })
            .collect();
        let stable_like = LevyMechanism::new(0.0, JumpMeasure::Tabulated(TabulatedDensity::new(pts).unwrap()));
        assert!(stable_like.validate().passed());
    }

    #[test]
    fn truncation_drift_matches_oracle() {
        let m = LevyMechanism::stable(1.5);
        let eps = 1e-4;
        let tm = m.truncate(eps).unwrap();
        let oracle = oracle_integral(&m, eps, |l| l);
        assert!((tm.drift_rate() - oracle).abs() < 1e-8 * oracle);
        let rate = oracle_integral(&m, eps, |_| 1.0);
        assert!((tm.jump_rate() - rate).abs() < 1e-8 * rate);
    }

    #[test]
    fn empty_tail_is_an_error() {
        let m = LevyMechanism::new(0.0, JumpMeasure::TruncatedStable { alpha: 1.5, upper: 2.0 });
        assert!(matches!(m.truncate(3.0), Err(Error::EmptyJumpTail { .. })));
        assert!(matches!(LevyMechanism::stable(1.5).truncate(1e250), Err(Error::EmptyJumpTail { .. })));
        assert!(LevyMechanism::stable(1.5).truncate(0.0).is_err());
    }

    #[test]
    fn truncated_psi_series_matches_quadrature() {
        for d in [0.0, 0.9] {
            let m = LevyMechanism::stable(1.5).with_damping(d);
            let tm = m.truncate(1e-2).unwrap();
            for lam in [0.5, 3.0, 50.0] {
                let quad = oracle_integral(&m, 1e-2, |l| phi(lam * l));
                let got = tm.psi(lam).unwrap();
                assert!((got - quad).abs() < 1e-9 * quad.max(1.0), "d={d} lam={lam}: {got} vs {quad}");
                let dquad = oracle_integral(&m, 1e-2, |l| l * one_minus_exp(lam * l));
                let dgot = tm.psi_prime(lam).unwrap();
                assert!((dgot - dquad).abs() < 1e-9 * dquad.max(1.0));
            }
        }
    }

    #[test]
    fn truncation_bias_shrinks() {
        let m = LevyMechanism::stable(1.5);
        let grid: Vec<f64> = (0..=100).map(|i| i as f64 * 0.1).collect();
        let b: Vec<f64> = [1e-2, 1e-3, 1e-4]
            .iter()
            .map(|&e| m.truncate(e).unwrap().bias_diagnostic(&grid).unwrap())
            .collect();
        assert!(b[0] > b[1] && b[1] > b[2], "{b:?}");
    }

    #[test]
    fn jump_sampler_mean() {
        let m = LevyMechanism::stable(1.5);
        let tm = m.truncate(1e-2).unwrap();
        let mut rng = stream(5, 0);
        let n = 1_000_000;
        let xs: Vec<f64> = (0..n).map(|_| tm.sample_jump(&mut rng)).collect();
        assert!(xs.iter().all(|&x| x > 1e-2));
        // Infinite variance for alpha = 1.5: compare the bounded statistic
        // min(ℓ, 1) instead, whose mean has a closed form.
        let mean = xs.iter().map(|x| x.min(1.0)).sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x.min(1.0) - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let target = (m.moment(1.0, 1e-2, 1.0).unwrap() + m.moment(0.0, 1.0, f64::INFINITY).unwrap())
            / tm.jump_rate();
        assert!((mean - target).abs() < 4.0 * (var / n as f64).sqrt(), "{mean} vs {target}");
    }

    #[test]
    fn config_round_trip() {
        let m = LevyMechanism::from_toml_str("kind = \"stable\"\nalpha = 1.5\nalpha0 = 0.0\n", None).unwrap();
        assert_eq!(m, LevyMechanism::stable(1.5));
        assert!(LevyMechanism::from_toml_str("kind = \"stable\"\nalpha = 2.5\n", None).is_err());
        let t = TabulatedDensity::from_csv_reader("ell,density\n0.1,3\n1,2\n2,0.5\n".as_bytes()).unwrap();
        assert_eq!(t.points().len(), 3);
        assert!((t.density(1.0) - 2.0).abs() < 1e-12);
        assert_eq!(t.density(3.0), 0.0);
    }
}
