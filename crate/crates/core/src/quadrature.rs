//! Adaptive Gauss–Kronrod quadrature and fixed Gauss–Legendre rules.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

const XGK: [f64; 11] = [
    0.995_657_163_025_808_1,
    0.973_906_528_517_171_7,
    0.930_157_491_355_708_2,
    0.865_063_366_688_984_5,
    0.780_817_726_586_416_9,
    0.679_409_568_299_024_4,
    0.562_757_134_668_604_7,
    0.433_395_394_129_247_2,
    0.294_392_862_701_460_2,
    0.148_874_338_981_631_2,
    0.0,
];

const WGK: [f64; 11] = [
    0.011_694_638_867_371_874,
    0.032_558_162_307_964_73,
    0.054_755_896_574_352,
    0.075_039_674_810_919_95,
    0.093_125_454_583_697_6,
    0.109_387_158_802_297_64,
    0.123_491_976_262_065_85,
    0.134_709_217_311_473_33,
    0.142_775_938_577_060_08,
    0.147_739_104_901_338_5,
    0.149_445_554_002_916_9,
];

// Gauss weights for the nodes XGK[1], XGK[3], ..., XGK[9].
const WG: [f64; 5] = [
    0.066_671_344_308_688_14,
    0.149_451_349_150_580_6,
    0.219_086_362_515_982_04,
    0.269_266_719_309_996_35,
    0.295_524_224_714_752_87,
];

/// One application of the 21-point Kronrod rule: (integral, error estimate).
pub fn gauss_kronrod_21<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = fc * WGK[10];
    let mut gauss = 0.0;
    let mut res_abs = kronrod.abs();
    let mut fv = [0.0f64; 20];
    for j in 0..10 {
        let dx = half * XGK[j];
        let f1 = f(center - dx);
        let f2 = f(center + dx);
        fv[2 * j] = f1;
        fv[2 * j + 1] = f2;
        kronrod += WGK[j] * (f1 + f2);
        res_abs += WGK[j] * (f1.abs() + f2.abs());
        if j % 2 == 1 {
            gauss += WG[j / 2] * (f1 + f2);
        }
    }
    let mean = 0.5 * kronrod;
    let mut res_asc = WGK[10] * (fc - mean).abs();
    for j in 0..10 {
        res_asc += WGK[j] * ((fv[2 * j] - mean).abs() + (fv[2 * j + 1] - mean).abs());
    }
    let value = kronrod * half;
    res_abs *= half.abs();
    res_asc *= half.abs();
    let mut err = ((kronrod - gauss) * half).abs();
    if res_asc != 0.0 && err != 0.0 {
        err = res_asc * (200.0 * err / res_asc).powf(1.5).min(1.0);
    }
    if res_abs > f64::MIN_POSITIVE / (50.0 * f64::EPSILON) {
        err = err.max(50.0 * f64::EPSILON * res_abs);
    }
    (value, err)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
}

struct Panel {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

/// Globally adaptive bisection driven by the largest local error.
#[derive(Debug, Clone, Copy)]
pub struct Quadrature {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_panels: usize,
}

impl Default for Quadrature {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            abs_tol: 1e-14,
            max_panels: 4000,
        }
    }
}

impl Quadrature {
    pub fn with_tolerance(rel_tol: f64, abs_tol: f64) -> Self {
        Self {
            rel_tol,
            abs_tol,
            ..Self::default()
        }
    }

    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F, a: f64, b: f64) -> Result<Estimate> {
        if a == b {
            return Ok(Estimate { value: 0.0, error: 0.0 });
        }
        let (v, e) = gauss_kronrod_21(&f, a, b);
        let mut heap = BinaryHeap::new();
        heap.push(Panel { a, b, value: v, error: e });
        let mut total = v;
        let mut total_err = e;
        while total_err > self.abs_tol.max(self.rel_tol * total.abs()) {
            if heap.len() >= self.max_panels {
                return Err(Error::Numeric {
                    what: format!("adaptive quadrature on [{a}, {b}]"),
                    residual: total_err,
                });
            }
            let worst = heap.pop().expect("heap is never empty");
            let mid = 0.5 * (worst.a + worst.b);
            if mid <= worst.a || mid >= worst.b {
                // Interval can no longer be split in floating point.
                return Err(Error::Numeric {
                    what: format!("adaptive quadrature stalled near {mid}"),
                    residual: total_err,
                });
            }
            let (v1, e1) = gauss_kronrod_21(&f, worst.a, mid);
            let (v2, e2) = gauss_kronrod_21(&f, mid, worst.b);
            total += v1 + v2 - worst.value;
            total_err += e1 + e2 - worst.error;
            heap.push(Panel { a: worst.a, b: mid, value: v1, error: e1 });
            heap.push(Panel { a: mid, b: worst.b, value: v2, error: e2 });
        }
        // Re-sum to shed the cancellation error of the running updates.
        let mut panels: Vec<Panel> = heap.into_vec();
        panels.sort_by(|p, q| p.a.total_cmp(&q.a));
        let value = pairwise_sum(&panels.iter().map(|p| p.value).collect::<Vec<_>>());
        let error = panels.iter().map(|p| p.error).sum();
        Ok(Estimate { value, error })
    }

    /// Integral over `[a, inf)` via `x = a + t / (1 - t)`.
    pub fn integrate_to_infinity<F: Fn(f64) -> f64>(&self, f: F, a: f64) -> Result<Estimate> {
        self.integrate(
            |t| {
                if t >= 1.0 {
                    return 0.0;
                }
                let s = 1.0 - t;
                let v = f(a + t / s) / (s * s);
                if v.is_finite() {
                    v
                } else {
                    0.0
                }
            },
            0.0,
            1.0,
        )
    }

    /// Integral over `[a, b]` for integrands with an algebraic singularity at `a`,
    /// via `x = a + (b - a) u^p`.
    pub fn integrate_left_singular<F: Fn(f64) -> f64>(
        &self,
        f: F,
        a: f64,
        b: f64,
        p: f64,
    ) -> Result<Estimate> {
        let w = b - a;
        self.integrate(
            |u| {
                if u <= 0.0 {
                    return 0.0;
                }
                let up = u.powf(p - 1.0);
                f(a + w * up * u) * w * p * up
            },
            0.0,
            1.0,
        )
    }
}

/// Pairwise summation; result independent of how the values were produced.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 16 {
        let mut s = 0.0;
        let mut comp = 0.0;
        for &v in values {
            let y = v - comp;
            let t = s + y;
            comp = (t - s) - y;
            s = t;
        }
        return s;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { x } else { p1 };
            let pn1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pn1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        if n == 1 {
            nodes[0] = 0.0;
            weights[0] = 2.0;
            break;
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_is_exact() {
        let q = Quadrature::default();
        let r = q.integrate(|x| x.powi(7) - 3.0 * x * x, -1.0, 2.0).unwrap();
        let exact = (2f64.powi(8) - 1.0) / 8.0 - (8.0 + 1.0);
        assert!((r.value - exact).abs() < 1e-12);
    }

    #[test]
    fn infinite_range_and_singular_endpoint() {
        let q = Quadrature::default();
        let r = q.integrate_to_infinity(|x| (-x).exp(), 0.0).unwrap();
        assert!((r.value - 1.0).abs() < 1e-10);
        let s = q
            .integrate_left_singular(|x| x.powf(-0.5), 0.0, 4.0, 4.0)
            .unwrap();
        assert!((s.value - 4.0).abs() < 1e-10);
    }

    #[test]
    fn reports_failure_instead_of_garbage() {
        let q = Quadrature {
            max_panels: 8,
            ..Quadrature::default()
        };
        assert!(matches!(
            q.integrate(|x| (1.0 / x).sin(), 1e-6, 1.0),
            Err(Error::Numeric { .. })
        ));
    }

    #[test]
    fn gauss_legendre_integrates_degree_2n_minus_1() {
        for n in [1, 2, 5, 16, 32] {
            let (x, w) = gauss_legendre(n);
            let deg = 2 * n - 1;
            let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg as i32 - 1)).sum();
            let exact = if (deg - 1) % 2 == 0 { 2.0 / deg as f64 } else { 0.0 };
            assert!((s - exact).abs() < 1e-13, "n={n}: {s} vs {exact}");
            assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-13);
        }
    }
}
