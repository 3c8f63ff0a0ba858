//! Event-driven simulation of the truncated Lévy path `X_t = -ct + Σ_{s≤t} ℓ_s`
//! and exact queries on it: running and future infima, excursions of `X - I`
//! and the inverse local time.

use std::io::{BufRead, Write};
use std::sync::OnceLock;

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Error, Result};
use crate::levy_model::TruncatedMechanism;
use crate::rng::{stream, StreamRng};

/// Infinite stream of `(time, size)` jumps of the compound Poisson part.
pub struct JumpStream<'a> {
    tm: &'a TruncatedMechanism,
    rng: StreamRng,
    t: f64,
}

impl<'a> JumpStream<'a> {
    pub fn new(tm: &'a TruncatedMechanism, rng: StreamRng) -> Self {
        Self { tm, rng, t: 0.0 }
    }

    /// Stream number `index` of run `seed`.
    pub fn indexed(tm: &'a TruncatedMechanism, seed: u64, index: u64) -> Self {
        Self::new(tm, stream(seed, index))
    }
}

impl Iterator for JumpStream<'_> {
    type Item = (f64, f64);

    #[inline]
    fn next(&mut self) -> Option<(f64, f64)> {
        let gap: f64 = self.rng.sample(Exp1);
        self.t += gap / self.tm.jump_rate();
        Some((self.t, self.tm.sample_jump(&mut self.rng)))
    }
}

/// Simulates the path on `(0, T]` from stream 0 of `seed`.
pub fn simulate_path(tm: &TruncatedMechanism, horizon: f64, seed: u64) -> Result<LevyPath> {
    simulate_indexed(tm, horizon, seed, 0)
}

/// Simulates path number `index` of a Monte Carlo run. A longer horizon with
/// the same `(seed, index)` extends the same path.
pub fn simulate_indexed(tm: &TruncatedMechanism, horizon: f64, seed: u64, index: u64) -> Result<LevyPath> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(domain(format!("horizon must be positive, got {horizon}")));
    }
    let events: Vec<(f64, f64)> = JumpStream::indexed(tm, seed, index)
        .take_while(|&(s, _)| s <= horizon)
        .collect();
    let mut path = LevyPath::from_events(tm.drift_rate(), horizon, &events)?;
    path.epsilon = Some(tm.epsilon());
    path.seed = Some(seed);
    Ok(path)
}

/// Maximal interval `(alpha, beta)` on which `X - I > 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcursionInterval {
    pub alpha: f64,
    pub beta: f64,
    /// `-I_alpha`, the local time at which the excursion starts.
    pub depth: f64,
    /// Jumps `first_jump..end_jump` fall inside the excursion.
    pub first_jump: usize,
    pub end_jump: usize,
    /// The path ended before `X` returned to `I`; `beta` is then the horizon.
    pub censored: bool,
}

/// Range-minimum segment tree.
#[derive(Debug)]
struct RangeMin {
    n: usize,
    tree: Vec<f64>,
}

impl RangeMin {
    fn new(values: &[f64]) -> Self {
        let n = values.len();
        let mut tree = vec![f64::INFINITY; 2 * n.max(1)];
        tree[n..n + n].copy_from_slice(values);
        for i in (1..n).rev() {
            tree[i] = tree[2 * i].min(tree[2 * i + 1]);
        }
        Self { n, tree }
    }

    /// Minimum over `lo..hi`.
    fn query(&self, lo: usize, hi: usize) -> f64 {
        let (mut l, mut r) = (lo + self.n, hi + self.n);
        let mut m = f64::INFINITY;
        while l < r {
            if l & 1 == 1 {
                m = m.min(self.tree[l]);
                l += 1;
            }
            if r & 1 == 1 {
                r -= 1;
                m = m.min(self.tree[r]);
            }
            l >>= 1;
            r >>= 1;
        }
        m
    }
}

/// A simulated path: drift `-c` between upward jumps.
#[derive(Debug)]
pub struct LevyPath {
    drift: f64,
    horizon: f64,
    times: Vec<f64>,
    sizes: Vec<f64>,
    /// `cum[i] = Σ_{j<i} ℓ_j`.
    cum: Vec<f64>,
    /// `X_{s_i-}`.
    before: Vec<f64>,
    /// `low[i] = min(0, X_{s_0-}, …, X_{s_{i-1}-})`.
    low: Vec<f64>,
    range_min: OnceLock<RangeMin>,
    pub epsilon: Option<f64>,
    pub seed: Option<u64>,
}

impl Clone for LevyPath {
    fn clone(&self) -> Self {
        Self {
            drift: self.drift,
            horizon: self.horizon,
            times: self.times.clone(),
            sizes: self.sizes.clone(),
            cum: self.cum.clone(),
            before: self.before.clone(),
            low: self.low.clone(),
            range_min: OnceLock::new(),
            epsilon: self.epsilon,
            seed: self.seed,
        }
    }
}

impl LevyPath {
    pub fn from_events(drift: f64, horizon: f64, events: &[(f64, f64)]) -> Result<Self> {
        if !(drift > 0.0 && drift.is_finite()) {
            return Err(domain(format!("drift rate must be positive, got {drift}")));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(domain(format!("horizon must be positive, got {horizon}")));
        }
        let n = events.len();
        let mut times = Vec::with_capacity(n);
        let mut sizes = Vec::with_capacity(n);
        let mut cum = Vec::with_capacity(n + 1);
        let mut before = Vec::with_capacity(n);
        let mut low = Vec::with_capacity(n + 1);
        let mut total = 0.0;
        let mut m = 0.0_f64;
        cum.push(0.0);
        low.push(0.0);
        let mut prev = 0.0;
        for &(s, l) in events {
            if !(s > prev && s <= horizon) {
                return Err(domain(format!("jump times must increase inside (0, T]; got {s} after {prev}")));
            }
            if !(l > 0.0 && l.is_finite()) {
                return Err(domain(format!("jump sizes must be positive, got {l}")));
            }
            let x = total - drift * s;
            m = m.min(x);
            times.push(s);
            sizes.push(l);
            before.push(x);
            low.push(m);
            total += l;
            cum.push(total);
            prev = s;
        }
        Ok(Self {
            drift,
            horizon,
            times,
            sizes,
            cum,
            before,
            low,
            range_min: OnceLock::new(),
            epsilon: None,
            seed: None,
        })
    }

    pub fn drift(&self) -> f64 {
        self.drift
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_jumps(&self) -> usize {
        self.times.len()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn sizes(&self) -> &[f64] {
        &self.sizes
    }

    pub fn events(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times.iter().copied().zip(self.sizes.iter().copied())
    }

    /// Number of jumps at times `≤ t`.
    #[inline]
    pub fn jumps_up_to(&self, t: f64) -> usize {
        self.times.partition_point(|&s| s <= t)
    }

    /// `X_t` (right-continuous).
    #[inline]
    pub fn value(&self, t: f64) -> f64 {
        self.cum[self.jumps_up_to(t)] - self.drift * t
    }

    /// `X_{s_i-}` for jump `i`.
    #[inline]
    pub fn before_jump(&self, i: usize) -> f64 {
        self.before[i]
    }

    /// `X_{s_i}` for jump `i`.
    #[inline]
    pub fn after_jump(&self, i: usize) -> f64 {
        self.before[i] + self.sizes[i]
    }

    /// Running infimum `I_t = inf_{[0,t]} X`.
    pub fn infimum(&self, t: f64) -> f64 {
        let k = self.jumps_up_to(t);
        self.low[k].min(self.value(t))
    }

    /// `I_t^s = inf_{[s,t]} X`.
    pub fn future_infimum(&self, s: f64, t: f64) -> Result<f64> {
        if !(s <= t) {
            return Err(domain(format!("future infimum needs s <= t, got s = {s}, t = {t}")));
        }
        let lo = self.jumps_up_to(s);
        let hi = self.jumps_up_to(t);
        let inner = if hi > lo {
            self.range_min.get_or_init(|| RangeMin::new(&self.before)).query(lo, hi)
        } else {
            f64::INFINITY
        };
        Ok(self.value(s).min(self.value(t)).min(inner))
    }

    /// Excursion intervals of `X - I` away from 0, in time order.
    pub fn excursions(&self) -> Vec<ExcursionInterval> {
        let n = self.n_jumps();
        let mut out = Vec::new();
        let mut i = 0;
        while i < n {
            let level = self.before[i];
            let start = i;
            let mut j = i + 1;
            while j < n && self.before[j] > level {
                j += 1;
            }
            // X after the last jump of the excursion drifts back down to `level`.
            let last = j - 1;
            let back = self.times[last] + (self.after_jump(last) - level) / self.drift;
            let censored = back > self.horizon;
            out.push(ExcursionInterval {
                alpha: self.times[start],
                beta: if censored { self.horizon } else { back },
                depth: -level,
                first_jump: start,
                end_jump: j,
                censored,
            });
            i = j;
        }
        out
    }

    /// First time `t ≤ T` with `X_t ≤ level`, for `level ≤ 0`.
    pub fn hitting_time(&self, level: f64) -> Option<f64> {
        if level >= 0.0 {
            return Some(0.0);
        }
        // Segment k runs from the k-th jump (or 0) to the next jump (or T).
        let n = self.n_jumps();
        let k = self.low[1..].partition_point(|&m| m > level);
        if k < n {
            let (start, x0) = if k == 0 { (0.0, 0.0) } else { (self.times[k - 1], self.after_jump(k - 1)) };
            return Some(start + (x0 - level) / self.drift);
        }
        let (start, x0) = if n == 0 { (0.0, 0.0) } else { (self.times[n - 1], self.after_jump(n - 1)) };
        let t = start + (x0 - level) / self.drift;
        (t <= self.horizon).then_some(t)
    }

    /// Right-continuous inverse of `-I`: `τ_r = inf{t : -I_t > r}`.
    pub fn inverse_local_time(&self, r: f64) -> Result<f64> {
        if !(r >= 0.0) {
            return Err(domain(format!("local time must be non-negative, got {r}")));
        }
        let available = -self.infimum(self.horizon);
        if r >= available {
            return Err(Error::HorizonExhausted { needed: r, available });
        }
        Ok(self.hitting_time(-r).expect("level above the final infimum is hit"))
    }

    /// Keeps the jumps larger than the coarse truncation level, with the
    /// coarse drift: an exact sample of the coarse path.
    pub fn thin(&self, coarse: &TruncatedMechanism) -> Result<LevyPath> {
        let eps = coarse.epsilon();
        let events: Vec<(f64, f64)> = self.events().filter(|&(_, l)| l > eps).collect();
        let mut p = LevyPath::from_events(coarse.drift_rate(), self.horizon, &events)?;
        p.epsilon = Some(eps);
        p.seed = self.seed;
        Ok(p)
    }

    /// CSV dump: a `#` header line with `c`, `eps`, `T`, `seed`, then `s,ell` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        writeln!(
            out,
            "# c={},eps={},T={},seed={}",
            self.drift,
            opt(self.epsilon.map(|e| e.to_string())),
            self.horizon,
            opt(self.seed.map(|s| s.to_string()))
        )?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["s", "ell"])?;
        for (s, l) in self.events() {
            w.write_record([s.to_string(), l.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(mut input: R) -> Result<LevyPath> {
        let mut header = String::new();
        input.read_line(&mut header)?;
        let meta = header
            .trim()
            .strip_prefix('#')
            .ok_or_else(|| config("path csv", "missing `#` header line"))?;
        let mut drift = None;
        let mut horizon = None;
        let mut eps = None;
        let mut seed = None;
        for kv in meta.trim().split(',') {
            let (k, v) = kv.split_once('=').ok_or_else(|| config("path csv", "malformed header"))?;
            let num = || v.parse::<f64>().map_err(|_| config(format!("path csv header {k}"), "not a number"));
            match k.trim() {
                "c" => drift = Some(num()?),
                "T" => horizon = Some(num()?),
                "eps" if v != "none" => eps = Some(num()?),
                "seed" if v != "none" => {
                    seed = Some(v.parse::<u64>().map_err(|_| config("path csv header seed", "not an integer"))?)
                }
                _ => {}
            }
        }
        let mut rdr = csv::Reader::from_reader(input);
        let mut events = Vec::new();
        for rec in rdr.deserialize::<(f64, f64)>() {
            events.push(rec?);
        }
        let mut p = LevyPath::from_events(
            drift.ok_or_else(|| config("path csv header", "missing c"))?,
            horizon.ok_or_else(|| config("path csv header", "missing T"))?,
            &events,
        )?;
        p.epsilon = eps;
        p.seed = seed;
        Ok(p)
    }
}

/// First time the streamed path reaches `level < 0`, or `None` if that takes
/// longer than `cap`. Nothing is stored.
pub fn first_passage(jumps: impl Iterator<Item = (f64, f64)>, drift: f64, level: f64, cap: f64) -> Option<f64> {
    let (mut t, mut x) = (0.0, 0.0);
    for (s, l) in jumps {
        let at_jump = x - drift * (s - t);
        if at_jump <= level {
            let hit = t + (x - level) / drift;
            return (hit <= cap).then_some(hit);
        }
        if s > cap {
            return None;
        }
        t = s;
        x = at_jump + l;
    }
    let hit = t + (x - level) / drift;
    (hit <= cap).then_some(hit)
}

/// Hitting times of several decreasing levels along one streamed path.
pub fn first_passages(
    jumps: impl Iterator<Item = (f64, f64)>,
    drift: f64,
    levels: &[f64],
    cap: f64,
) -> Vec<Option<f64>> {
    let mut out = vec![None; levels.len()];
    let mut next = 0;
    let (mut t, mut x) = (0.0, 0.0);
    let finish = |t: f64, x: f64, upto: f64, next: &mut usize, out: &mut Vec<Option<f64>>| {
        while *next < levels.len() && x - drift * (upto - t) <= levels[*next] {
            let hit = t + (x - levels[*next]) / drift;
            out[*next] = (hit <= cap).then_some(hit);
            *next += 1;
        }
    };
    for (s, l) in jumps {
        let end = s.min(cap);
        finish(t, x, end, &mut next, &mut out);
        if next == levels.len() || s > cap {
            break;
        }
        x -= drift * (s - t);
        x += l;
        t = s;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::levy_model::LevyMechanism;

    /// Brute-force `X` on a uniform grid, for oracles only.
    fn grid_values(p: &LevyPath, n: usize) -> Vec<(f64, f64)> {
        (0..=n)
            .map(|k| {
                let t = p.horizon() * k as f64 / n as f64;
                (t, p.value(t))
            })
            .collect()
    }

    #[test]
    fn no_jump_path() {
        let p = LevyPath::from_events(2.0, 5.0, &[]).unwrap();
        for t in [0.0, 1.0, 3.5] {
            assert_eq!(p.infimum(t), -2.0 * t);
        }
        assert!(p.excursions().is_empty());
        assert_eq!(p.inverse_local_time(0.0).unwrap(), 0.0);
        assert!((p.inverse_local_time(3.0).unwrap() - 1.5).abs() < 1e-15);
        assert!(matches!(p.inverse_local_time(10.0), Err(Error::HorizonExhausted { .. })));
    }

    #[test]
    fn single_jump_against_grid() {
        let (c, s, l) = (1.0, 0.5, 2.0);
        let p = LevyPath::from_events(c, 4.0, &[(s, l)]).unwrap();
        let n = 1_000_000;
        let grid = grid_values(&p, n);
        let res = p.horizon() / n as f64 * c;
        let mut run = f64::INFINITY;
        for &(t, x) in &grid {
            run = run.min(x);
            assert!((p.infimum(t) - run).abs() <= res + 1e-12);
        }
        let ex = p.excursions();
        assert_eq!(ex.len(), 1);
        assert!((ex[0].beta - ex[0].alpha - l / c).abs() < 1e-12);
        assert!(!ex[0].censored);
        assert!(p.infimum(4.0) <= p.value(4.0));
    }

    #[test]
    fn future_infimum_against_grid() {
        let tm = LevyMechanism::stable(1.5).truncate(1e-2).unwrap();
        let p = simulate_path(&tm, 1.0, 11).unwrap();
        let n = 1_000_000;
        let grid = grid_values(&p, n);
        let res = p.drift() * p.horizon() / n as f64;
        let mut rng = stream(3, 0);
        for _ in 0..100 {
            let a: f64 = rng.random();
            let b: f64 = rng.random();
            let (s, t) = (a.min(b), a.max(b));
            let brute = grid
                .iter()
                .filter(|(u, _)| *u >= s && *u <= t)
                .map(|&(_, x)| x)
                .fold(p.value(s).min(p.value(t)), f64::min);
            let exact = p.future_infimum(s, t).unwrap();
            assert!(exact <= brute + 1e-12 && brute - exact <= res + 1e-12);
        }
        assert_eq!(p.future_infimum(0.3, 0.3).unwrap(), p.value(0.3));
        assert!((p.future_infimum(0.0, 0.7).unwrap() - p.infimum(0.7)).abs() < 1e-15);
        assert!(p.future_infimum(0.5, 0.2).is_err());
    }

    #[test]
    fn excursions_partition_time() {
        let tm = LevyMechanism::stable(1.5).truncate(1e-3).unwrap();
        let p = simulate_path(&tm, 0.5, 2).unwrap();
        let ex = p.excursions();
        assert!(ex.len() > 10);
        for w in ex.windows(2) {
            assert!(w[1].depth > w[0].depth);
            assert!(w[1].alpha >= w[0].beta);
        }
        // Off the excursions X = I; the excursion count of jumps covers all jumps.
        let covered: usize = ex.iter().map(|e| e.end_jump - e.first_jump).sum();
        assert_eq!(covered, p.n_jumps());
        let mut rng = stream(9, 1);
        for _ in 0..1000 {
            let t = 0.5 * rng.random::<f64>();
            let inside = ex.iter().any(|e| t > e.alpha && t < e.beta);
            let gap = p.value(t) - p.infimum(t);
            assert_eq!(inside, gap > 0.0, "t = {t}, gap = {gap}");
        }
    }

    #[test]
    fn tau_is_strictly_increasing_and_hits_levels() {
        let tm = LevyMechanism::stable(1.5).truncate(1e-3).unwrap();
        let p = simulate_path(&tm, 2.0, 4).unwrap();
        let top = -p.infimum(2.0);
        let mut last = -1.0;
        for k in 0..200 {
            let r = top * k as f64 / 200.0;
            let tau = p.inverse_local_time(r).unwrap();
            assert!(tau > last);
            assert!((p.infimum(tau) + r).abs() < 1e-9);
            last = tau;
        }
        let levels = [-0.01, -0.05, -top * 0.9];
        let streamed = first_passages(JumpStream::indexed(&tm, 4, 0), tm.drift_rate(), &levels, 2.0);
        // The streamed sum accumulates in a different order: agree to rounding.
        let close = |a: Option<f64>, b: Option<f64>| (a.unwrap() - b.unwrap()).abs() < 1e-12;
        for (lv, got) in levels.iter().zip(streamed) {
            assert!(close(got, p.hitting_time(*lv)));
            assert!(close(got, first_passage(JumpStream::indexed(&tm, 4, 0), tm.drift_rate(), *lv, 2.0)));
        }
    }

    #[test]
    fn csv_round_trip_and_thinning() {
        let m = LevyMechanism::stable(1.5);
        let fine = m.truncate(1e-3).unwrap();
        let coarse = m.truncate(1e-2).unwrap();
        let p = simulate_path(&fine, 0.2, 8).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let q = LevyPath::read_csv(buf.as_slice()).unwrap();
        assert_eq!(q.times(), p.times());
        assert_eq!(q.sizes(), p.sizes());
        assert_eq!(q.drift(), p.drift());
        assert_eq!(q.seed, Some(8));
        let t = p.thin(&coarse).unwrap();
        assert!(t.sizes().iter().all(|&l| l > 1e-2));
        assert_eq!(t.drift(), coarse.drift_rate());
    }

    #[test]
    fn longer_horizon_extends_the_same_path() {
        let tm = LevyMechanism::stable(1.5).truncate(1e-2).unwrap();
        let a = simulate_indexed(&tm, 1.0, 5, 3).unwrap();
        let b = simulate_indexed(&tm, 2.0, 5, 3).unwrap();
        assert_eq!(a.times(), &b.times()[..a.n_jumps()]);
    }
}
