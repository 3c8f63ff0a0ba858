//! Finite atomic measures on `[0, ∞]`, with erasure, concatenation, partial
//! heights, integration and the distance `D`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{domain, Result};
use crate::quadrature::pairwise_sum;

/// Finite measure `Σ m_i δ_{h_i}` with `0 ≤ h_0 < h_1 < … ≤ ∞` and `m_i > 0`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AtomicMeasure {
    atoms: Vec<(f64, f64)>,
}

impl AtomicMeasure {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn dirac(h: f64, m: f64) -> Result<Self> {
        Self::from_atoms(vec![(h, m)])
    }

    /// Sorts by height, merges equal heights and drops zero masses.
    pub fn from_atoms(mut atoms: Vec<(f64, f64)>) -> Result<Self> {
        for &(h, m) in &atoms {
            if !(h >= 0.0) {
                return Err(domain(format!("atom height must lie in [0, inf], got {h}")));
            }
            if !(m >= 0.0 && m.is_finite()) {
                return Err(domain(format!("atom mass must be finite and non-negative, got {m}")));
            }
        }
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut out: Vec<(f64, f64)> = Vec::with_capacity(atoms.len());
        for (h, m) in atoms {
            if m == 0.0 {
                continue;
            }
            match out.last_mut() {
                Some(last) if last.0 == h => last.1 += m,
                _ => out.push((h, m)),
            }
        }
        Ok(Self { atoms: out })
    }

    /// Builds from atoms already strictly increasing in height with positive mass.
    pub(crate) fn from_sorted_unchecked(atoms: Vec<(f64, f64)>) -> Self {
        debug_assert!(atoms.windows(2).all(|w| w[0].0 < w[1].0));
        debug_assert!(atoms.iter().all(|a| a.1 > 0.0));
        Self { atoms }
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        let masses: Vec<f64> = self.atoms.iter().map(|a| a.1).collect();
        pairwise_sum(&masses)
    }

    /// Top of the support; 0 for the zero measure.
    pub fn height(&self) -> f64 {
        self.atoms.last().map_or(0.0, |a| a.0)
    }

    /// `μ + m δ_h`.
    pub fn plus_atom(&self, h: f64, m: f64) -> Result<Self> {
        let mut atoms = self.atoms.clone();
        atoms.push((h, m));
        Self::from_atoms(atoms)
    }

    /// `k_a μ`: removes mass `a` from the top down.
    pub fn erase(&self, a: f64) -> Self {
        assert!(a >= 0.0, "erase needs a >= 0, got {a}");
        let tol = 4.0 * f64::EPSILON * self.total_mass();
        let mut atoms = self.atoms.clone();
        let mut left = a;
        while let Some(top) = atoms.last_mut() {
            if top.1 <= left + tol {
                left -= top.1;
                atoms.pop();
            } else {
                top.1 -= left;
                break;
            }
        }
        Self { atoms }
    }

    /// `[μ, ν]`: `ν` shifted up by `H^μ` and stacked on `μ`.
    pub fn concat(&self, nu: &AtomicMeasure) -> Self {
        let shift = self.height();
        let mut atoms = self.atoms.clone();
        for &(h, m) in &nu.atoms {
            let h = h + shift;
            match atoms.last_mut() {
                Some(last) if last.0 == h => last.1 += m,
                _ => atoms.push((h, m)),
            }
        }
        Self { atoms }
    }

    /// `μ((v, ∞])`.
    pub fn tail_mass(&self, v: f64) -> f64 {
        let i = self.atoms.partition_point(|a| a.0 <= v);
        self.atoms[i..].iter().map(|a| a.1).sum()
    }

    /// Tail sums from the top: `tails[j] = Σ_{i ≥ j} m_i`, `tails[n] = 0`.
    fn tails(&self) -> Vec<f64> {
        let n = self.atoms.len();
        let mut t = vec![0.0; n + 1];
        for j in (0..n).rev() {
            t[j] = t[j + 1] + self.atoms[j].1;
        }
        t
    }

    /// `H^μ_r = H^{k_r μ}`: right-continuous and non-increasing in `r`.
    pub fn partial_height(&self, r: f64) -> f64 {
        let tails = self.tails();
        partial_height_from_tails(&self.atoms, &tails, r)
    }

    /// Steps of `r ↦ H^μ_r`: `(r_lo, r_hi, height)`, ordered by `r`.
    pub fn partial_height_steps(&self) -> Vec<(f64, f64, f64)> {
        let tails = self.tails();
        (0..self.atoms.len())
            .rev()
            .map(|j| (tails[j + 1], tails[j], self.atoms[j].0))
            .collect()
    }

    pub fn integrate(&self, f: &TestFunction) -> f64 {
        let terms: Vec<f64> = self.atoms.iter().map(|&(h, m)| m * f.eval(h)).collect();
        pairwise_sum(&terms)
    }

    /// `∫ g dμ` for a plain function; atoms at ∞ use `g_inf`.
    pub fn integrate_fn(&self, g: impl Fn(f64) -> f64, g_inf: f64) -> f64 {
        let terms: Vec<f64> = self
            .atoms
            .iter()
            .map(|&(h, m)| m * if h.is_infinite() { g_inf } else { g(h) })
            .collect();
        pairwise_sum(&terms)
    }

    /// `D(μ, ν) = |⟨μ,1⟩ - ⟨ν,1⟩| + ∫_0^∞ |G(H^μ_r) - G(H^ν_r)| dr`.
    pub fn distance(&self, nu: &AtomicMeasure, g: &WeightFunction) -> f64 {
        let (ta, tb) = (self.tails(), nu.tails());
        let mut cuts: Vec<f64> = ta.iter().chain(tb.iter()).copied().collect();
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let mut terms = Vec::with_capacity(cuts.len());
        for w in cuts.windows(2) {
            let r = w[0];
            let ha = partial_height_from_tails(&self.atoms, &ta, r);
            let hb = partial_height_from_tails(&nu.atoms, &tb, r);
            terms.push((w[1] - w[0]) * (g.eval(ha) - g.eval(hb)).abs());
        }
        (ta[0] - tb[0]).abs() + pairwise_sum(&terms)
    }
}

fn partial_height_from_tails(atoms: &[(f64, f64)], tails: &[f64], r: f64) -> f64 {
    // Largest j with tails[j] > r; tails is non-increasing.
    let k = tails.partition_point(|&t| t > r);
    if k == 0 {
        0.0
    } else {
        atoms[k - 1].0
    }
}

impl fmt::Display for AtomicMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, (h, m)) in self.atoms.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "({h}, {m})")?;
        }
        write!(f, "}}")
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum HeightRepr {
    Finite(f64),
    Named(String),
}

#[derive(Serialize, Deserialize)]
struct AtomRepr {
    h: HeightRepr,
    m: f64,
}

impl Serialize for AtomicMeasure {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let repr: Vec<AtomRepr> = self
            .atoms
            .iter()
            .map(|&(h, m)| AtomRepr {
                h: if h.is_infinite() { HeightRepr::Named("inf".into()) } else { HeightRepr::Finite(h) },
                m,
            })
            .collect();
        repr.serialize(s)
    }
}

impl<'de> Deserialize<'de> for AtomicMeasure {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = Vec::<AtomRepr>::deserialize(d)?;
        let mut atoms = Vec::with_capacity(repr.len());
        for a in repr {
            let h = match a.h {
                HeightRepr::Finite(h) => h,
                HeightRepr::Named(s) if s == "inf" => f64::INFINITY,
                HeightRepr::Named(s) => return Err(serde::de::Error::custom(format!("bad height `{s}`"))),
            };
            atoms.push((h, a.m));
        }
        AtomicMeasure::from_atoms(atoms).map_err(serde::de::Error::custom)
    }
}

type RealFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Bounded non-decreasing `C¹` weight with `G(0) = 0` and `G(∞) ≤ 1`.
#[derive(Clone)]
pub struct WeightFunction {
    g: RealFn,
    limit: f64,
}

impl WeightFunction {
    pub fn new(g: impl Fn(f64) -> f64 + Send + Sync + 'static, limit: f64) -> Result<Self> {
        if g(0.0) != 0.0 {
            return Err(domain("weight must vanish at 0"));
        }
        if !(limit > 0.0 && limit <= 1.0) {
            return Err(domain(format!("weight limit must lie in (0, 1], got {limit}")));
        }
        let mut prev = 0.0;
        for k in -20..60 {
            let v = g(2f64.powi(k));
            if v < prev || v > limit {
                return Err(domain("weight must be non-decreasing and bounded by its limit"));
            }
            prev = v;
        }
        Ok(Self { g: Arc::new(g), limit })
    }

    /// `G(∞)`.
    pub fn limit(&self) -> f64 {
        self.limit
    }

    #[inline]
    pub fn eval(&self, h: f64) -> f64 {
        if h.is_infinite() {
            self.limit
        } else {
            (self.g)(h)
        }
    }
}

impl Default for WeightFunction {
    /// `G(t) = 1 - e^{-t}`.
    fn default() -> Self {
        Self { g: Arc::new(|t: f64| -(-t).exp_m1()), limit: 1.0 }
    }
}

impl fmt::Debug for WeightFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("WeightFunction").field("limit", &self.limit).finish()
    }
}

/// `f(x) = c0 + c1 e^{-rate x}`; covers constants and `κ(1 - e^{-x})`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionSpec {
    pub c0: f64,
    pub c1: f64,
    #[serde(default = "one")]
    pub rate: f64,
}

fn one() -> f64 {
    1.0
}

impl FunctionSpec {
    pub fn constant(k: f64) -> Self {
        Self { c0: k, c1: 0.0, rate: 1.0 }
    }

    /// `κ(1 - e^{-x})`, vanishing at 0.
    pub fn saturating(kappa: f64) -> Self {
        Self { c0: kappa, c1: -kappa, rate: 1.0 }
    }

    pub fn decaying(c0: f64, c1: f64) -> Self {
        Self { c0, c1, rate: 1.0 }
    }
}

/// Bounded `C¹` function on `[0, ∞)` with a stored limit `f(∞)` and the
/// convention `f'(∞) = 0`.
#[derive(Clone)]
pub struct TestFunction {
    f: RealFn,
    df: RealFn,
    limit: f64,
    spec: Option<FunctionSpec>,
}

impl TestFunction {
    pub fn new(
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        df: impl Fn(f64) -> f64 + Send + Sync + 'static,
        limit: f64,
    ) -> Result<Self> {
        for k in 0..8 {
            let x = 2f64.powi(k);
            if !(f(x).is_finite() && df(x).is_finite()) {
                return Err(domain("test function must be finite"));
            }
        }
        let far = 2f64.powi(60);
        if (f(far) - limit).abs() > 1e-9 * (1.0 + limit.abs()) {
            return Err(domain("declared limit f(inf) does not match f at large arguments"));
        }
        Ok(Self { f: Arc::new(f), df: Arc::new(df), limit, spec: None })
    }

    pub fn from_spec(spec: FunctionSpec) -> Result<Self> {
        if !(spec.rate > 0.0 && spec.c0.is_finite() && spec.c1.is_finite()) {
            return Err(domain("function spec needs finite coefficients and a positive rate"));
        }
        let FunctionSpec { c0, c1, rate } = spec;
        let mut t = Self::new(
            move |x| c0 + c1 * (-rate * x).exp(),
            move |x| -rate * c1 * (-rate * x).exp(),
            c0,
        )?;
        t.spec = Some(spec);
        Ok(t)
    }

    pub fn constant(k: f64) -> Self {
        Self::from_spec(FunctionSpec::constant(k)).expect("finite constant")
    }

    pub fn spec(&self) -> Option<FunctionSpec> {
        self.spec
    }

    #[inline]
    pub fn eval(&self, h: f64) -> f64 {
        if h.is_infinite() {
            self.limit
        } else {
            (self.f)(h)
        }
    }

    #[inline]
    pub fn derivative(&self, h: f64) -> f64 {
        if h.is_infinite() {
            0.0
        } else {
            (self.df)(h)
        }
    }

    pub fn limit(&self) -> f64 {
        self.limit
    }
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TestFunction")
            .field("limit", &self.limit)
            .field("spec", &self.spec)
            .finish()
    }
}
