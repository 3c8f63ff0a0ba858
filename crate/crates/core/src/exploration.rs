//! The exploration process `ρ`, its dual `η` and the height `H`, built from a
//! path by a stack sweep.
//!
//! Each jump `ℓ` pushes a frame of mass `ℓ` one level above the current top;
//! the drift consumes mass from the top frame at rate `c`. A frame at level
//! `j` sits at height `base + j/c`, where `base` is the height of the part of
//! the initial measure that is still alive. Once the stack is empty the drift
//! erodes the initial measure from the top down.

use std::io::Write;
use std::ops::ControlFlow;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::measure_core::{AtomicMeasure, TestFunction};
use crate::path_sim::{ExcursionInterval, LevyPath};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    /// Position in the stack, 1 at the bottom.
    pub level: u32,
    pub orig: f64,
    pub rem: f64,
    /// `f` at the frame's height.
    fval: f64,
}

/// A stretch of time on which no frame or atom changes except the top one,
/// which loses mass at the constant rate `c`. The height is constant and the
/// integrals `⟨ρ,1⟩`, `⟨ρ,f⟩`, `⟨η,1⟩` are affine in time.
#[derive(Clone, Copy, Debug)]
pub struct Piece {
    pub t0: f64,
    pub t1: f64,
    pub height: f64,
    /// Height of the surviving initial measure below the stack.
    pub base: f64,
    /// Number of frames; 0 outside excursions.
    pub level: u32,
    pub rho_mass: f64,
    pub rho_f: f64,
    pub eta_mass: f64,
    pub mass_slope: f64,
    pub f_slope: f64,
    pub eta_slope: f64,
    /// `-I` at `t0`.
    pub local_time: f64,
    /// Start of the current excursion of `X - I`, if inside one.
    pub excursion_start: Option<f64>,
}

impl Piece {
    #[inline]
    pub fn duration(&self) -> f64 {
        self.t1 - self.t0
    }

    #[inline]
    pub fn is_zero_state(&self) -> bool {
        self.rho_mass <= 0.0 && self.level == 0
    }

    #[inline]
    pub fn rho_f_at(&self, t: f64) -> f64 {
        self.rho_f + self.f_slope * (t - self.t0)
    }

    #[inline]
    pub fn rho_mass_at(&self, t: f64) -> f64 {
        self.rho_mass + self.mass_slope * (t - self.t0)
    }

    #[inline]
    pub fn eta_mass_at(&self, t: f64) -> f64 {
        self.eta_mass + self.eta_slope * (t - self.t0)
    }
}

/// Callbacks of the sweep. Returning `Break` stops it.
pub trait Visitor {
    fn piece(&mut self, _piece: &Piece) -> ControlFlow<()> {
        ControlFlow::Continue(())
    }

    /// Called after the jump at `t` has been pushed.
    fn jump(&mut self, _t: f64, _ell: f64, _state: &Explorer<'_>) -> ControlFlow<()> {
        ControlFlow::Continue(())
    }
}

/// The running state of the sweep.
#[derive(Clone, Debug)]
pub struct Explorer<'f> {
    c: f64,
    f: Option<&'f TestFunction>,
    t: f64,
    x: f64,
    local_time: f64,
    /// Surviving initial measure, bottom to top; the top atom may be partly eroded.
    mu_atoms: Vec<(f64, f64)>,
    mu_mass: f64,
    mu_f: f64,
    base: f64,
    frames: Vec<Frame>,
    rho0_mass: f64,
    rho0_f: f64,
    eta_mass: f64,
    excursion_start: Option<f64>,
    /// `f` at the frame heights of the current base, by level.
    fcache: Vec<f64>,
    fcache_base: f64,
}

impl<'f> Explorer<'f> {
    /// Starts at time 0 from `ρ_0 = μ`. With `f` given, `⟨ρ,f⟩` is tracked.
    pub fn new(c: f64, mu: &AtomicMeasure, f: Option<&'f TestFunction>) -> Self {
        Self::resume(c, 0.0, 0.0, 0.0, mu, f)
    }

    /// Starts at time `t` with `X_t = x`, `-I_t = local_time`, empty stack and
    /// surviving initial measure `mu_rest`.
    pub fn resume(
        c: f64,
        t: f64,
        x: f64,
        local_time: f64,
        mu_rest: &AtomicMeasure,
        f: Option<&'f TestFunction>,
    ) -> Self {
        let mu_atoms = mu_rest.atoms().to_vec();
        let mu_mass = mu_rest.total_mass();
        let mu_f = f.map_or(0.0, |f| mu_rest.integrate(f));
        Self {
            c,
            f,
            t,
            x,
            local_time,
            mu_atoms,
            mu_mass,
            mu_f,
            base: 0.0,
            frames: Vec::new(),
            rho0_mass: 0.0,
            rho0_f: 0.0,
            eta_mass: 0.0,
            excursion_start: None,
            fcache: Vec::new(),
            fcache_base: f64::NAN,
        }
    }

    pub fn drift(&self) -> f64 {
        self.c
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    /// `X_t`.
    pub fn value(&self) -> f64 {
        self.x
    }

    /// `-I_t`.
    pub fn local_time(&self) -> f64 {
        self.local_time
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn excursion_start(&self) -> Option<f64> {
        self.excursion_start
    }

    #[inline]
    fn mu_height(&self) -> f64 {
        self.mu_atoms.last().map_or(0.0, |a| a.0)
    }

    #[inline]
    fn level_height(&self, level: u32) -> f64 {
        self.base + level as f64 / self.c
    }

    /// `H_t`, the top of the support of `ρ_t`.
    pub fn height(&self) -> f64 {
        match self.frames.last() {
            Some(top) => self.level_height(top.level),
            None => self.mu_height(),
        }
    }

    pub fn rho_mass(&self) -> f64 {
        self.mu_mass + self.rho0_mass
    }

    pub fn rho_f(&self) -> f64 {
        self.mu_f + self.rho0_f
    }

    pub fn eta_mass(&self) -> f64 {
        self.eta_mass
    }

    /// Surviving part of the initial measure, `k_{-I_t} μ`.
    pub fn initial_part(&self) -> AtomicMeasure {
        AtomicMeasure::from_sorted_unchecked(self.mu_atoms.clone())
    }

    /// `ρ⁰_t`, with heights measured from 0.
    pub fn rho0(&self) -> AtomicMeasure {
        AtomicMeasure::from_sorted_unchecked(
            self.frames
                .iter()
                .map(|fr| (fr.level as f64 / self.c, fr.rem))
                .collect(),
        )
    }

    /// `ρ_t = [k_{-I_t} μ, ρ⁰_t]`.
    pub fn rho(&self) -> AtomicMeasure {
        let mut atoms = self.mu_atoms.clone();
        for fr in &self.frames {
            let h = self.level_height(fr.level);
            match atoms.last_mut() {
                Some(last) if last.0 == h => last.1 += fr.rem,
                _ => atoms.push((h, fr.rem)),
            }
        }
        AtomicMeasure::from_sorted_unchecked(atoms)
    }

    /// `η_t`: consumed mass `orig - rem` of each frame, at the frame's height.
    pub fn eta(&self) -> AtomicMeasure {
        let atoms: Vec<(f64, f64)> = self
            .frames
            .iter()
            .map(|fr| (self.level_height(fr.level), fr.orig - fr.rem))
            .collect();
        AtomicMeasure::from_atoms(atoms).expect("finite masses")
    }

    fn piece(&self, t1: f64) -> Piece {
        let (level, mass_slope, f_slope, eta_slope) = match self.frames.last() {
            Some(top) => (top.level, -self.c, -self.c * top.fval, self.c),
            None => match self.mu_atoms.last() {
                Some(&(h, _)) => (0, -self.c, -self.c * self.f.map_or(0.0, |f| f.eval(h)), 0.0),
                None => (0, 0.0, 0.0, 0.0),
            },
        };
        Piece {
            t0: self.t,
            t1,
            height: self.height(),
            base: if self.frames.is_empty() { self.mu_height() } else { self.base },
            level,
            rho_mass: self.rho_mass(),
            rho_f: self.rho_f(),
            eta_mass: self.eta_mass,
            mass_slope,
            f_slope,
            eta_slope,
            local_time: self.local_time,
            excursion_start: self.excursion_start,
        }
    }

    /// Lets the drift act up to `t_end`, reporting each piece.
    pub fn advance<V: Visitor + ?Sized>(&mut self, t_end: f64, v: &mut V) -> ControlFlow<()> {
        while self.t < t_end {
            if let Some(&top) = self.frames.last() {
                let to_pop = top.rem / self.c;
                let popping = to_pop <= t_end - self.t;
                let t1 = if popping { self.t + to_pop } else { t_end };
                v.piece(&self.piece(t1))?;
                let used = if popping { top.rem } else { self.c * (t1 - self.t) };
                self.x -= self.c * (t1 - self.t);
                self.t = t1;
                if popping {
                    self.frames.pop();
                    if self.frames.is_empty() {
                        self.rho0_mass = 0.0;
                        self.rho0_f = 0.0;
                        self.eta_mass = 0.0;
                        self.excursion_start = None;
                    } else {
                        self.rho0_mass -= used;
                        self.rho0_f -= used * top.fval;
                        self.eta_mass -= top.orig - used;
                    }
                } else {
                    let fr = self.frames.last_mut().expect("non-empty");
                    fr.rem -= used;
                    self.rho0_mass -= used;
                    self.rho0_f -= used * top.fval;
                    self.eta_mass += used;
                }
            } else if let Some(&(h, m)) = self.mu_atoms.last() {
                let to_empty = m / self.c;
                let emptying = to_empty <= t_end - self.t;
                let t1 = if emptying { self.t + to_empty } else { t_end };
                v.piece(&self.piece(t1))?;
                let used = if emptying { m } else { self.c * (t1 - self.t) };
                let fh = self.f.map_or(0.0, |f| f.eval(h));
                self.x -= self.c * (t1 - self.t);
                self.local_time += self.c * (t1 - self.t);
                self.t = t1;
                if emptying {
                    self.mu_atoms.pop();
                    if self.mu_atoms.is_empty() {
                        self.mu_mass = 0.0;
                        self.mu_f = 0.0;
                        continue;
                    }
                } else {
                    self.mu_atoms.last_mut().expect("non-empty").1 -= used;
                }
                self.mu_mass -= used;
                self.mu_f -= used * fh;
            } else {
                v.piece(&self.piece(t_end))?;
                self.x -= self.c * (t_end - self.t);
                self.local_time += self.c * (t_end - self.t);
                self.t = t_end;
            }
        }
        ControlFlow::Continue(())
    }

    fn f_at_level(&mut self, level: u32) -> f64 {
        let Some(f) = self.f else { return 0.0 };
        if self.fcache_base.to_bits() != self.base.to_bits() {
            self.fcache_base = self.base;
            self.fcache.clear();
        }
        let i = level as usize;
        while self.fcache.len() <= i {
            let h = self.level_height(self.fcache.len() as u32);
            self.fcache.push(f.eval(h));
        }
        self.fcache[i]
    }

    /// Drift up to `s`, then a jump of size `ell`.
    pub fn jump<V: Visitor + ?Sized>(&mut self, s: f64, ell: f64, v: &mut V) -> ControlFlow<()> {
        self.advance(s, v)?;
        if self.frames.is_empty() {
            self.base = self.mu_height();
            self.excursion_start = Some(s);
        }
        let level = self.frames.len() as u32 + 1;
        let fval = self.f_at_level(level);
        self.frames.push(Frame { level, orig: ell, rem: ell, fval });
        self.rho0_mass += ell;
        self.rho0_f += ell * fval;
        self.x += ell;
        v.jump(s, ell, self)
    }

    /// Feeds a jump stream until `horizon`.
    pub fn run<V: Visitor + ?Sized>(
        &mut self,
        jumps: impl IntoIterator<Item = (f64, f64)>,
        horizon: f64,
        v: &mut V,
    ) -> ControlFlow<()> {
        for (s, ell) in jumps {
            if s > horizon {
                break;
            }
            self.jump(s, ell, v)?;
        }
        self.advance(horizon, v)
    }
}

/// Per-event summary of the trajectory, taken right after each jump.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EventSummary {
    pub t: f64,
    pub total_mass: f64,
    pub height: f64,
    pub n_atoms: usize,
    pub eta_mass: f64,
}

/// State of the exploration at one time.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Snapshot {
    pub t: f64,
    pub rho: AtomicMeasure,
    pub eta: AtomicMeasure,
    pub height: f64,
}

/// One excursion of `X - I` with the state of `ρ` when it starts.
#[derive(Clone, Debug)]
pub struct ExcursionPiece {
    pub interval: ExcursionInterval,
    /// `ρ_{α-} = k_{-I_α} μ`.
    pub start: AtomicMeasure,
}

/// The exploration process of a stored path, with query access at any time.
#[derive(Debug)]
pub struct ExplorationTrajectory {
    path: LevyPath,
    initial: AtomicMeasure,
    events: Vec<EventSummary>,
    excursions: Vec<ExcursionPiece>,
    sigma: Option<f64>,
}

/// Absolute tolerance of the mass bookkeeping checks.
pub const MASS_TOLERANCE: f64 = 1e-9;

struct Recorder<'a> {
    path: &'a LevyPath,
    mu_mass: f64,
    events: Vec<EventSummary>,
    starts: Vec<AtomicMeasure>,
    sigma: Option<f64>,
    error: Option<Error>,
}

impl Visitor for Recorder<'_> {
    fn piece(&mut self, p: &Piece) -> ControlFlow<()> {
        if self.sigma.is_none() && p.is_zero_state() {
            self.sigma = Some(p.t0);
        }
        ControlFlow::Continue(())
    }

    fn jump(&mut self, t: f64, _ell: f64, st: &Explorer<'_>) -> ControlFlow<()> {
        let i = self.events.len();
        if st.frames.len() == 1 {
            let mut before = st.initial_part();
            if before.len() != st.mu_atoms.len() {
                before = AtomicMeasure::zero();
            }
            self.starts.push(before);
        }
        let x = self.path.after_jump(i);
        let inf = self.path.infimum(t);
        let expected = (self.mu_mass + inf).max(0.0) + (x - inf);
        let got = st.rho_mass();
        if (got - expected).abs() > MASS_TOLERANCE {
            self.error = Some(Error::Consistency(format!(
                "mass identity broken at t = {t}: <rho,1> = {got}, expected {expected}"
            )));
            return ControlFlow::Break(());
        }
        if (st.value() - x).abs() > MASS_TOLERANCE {
            self.error = Some(Error::Consistency(format!("path value drifted at t = {t}")));
            return ControlFlow::Break(());
        }
        self.events.push(EventSummary {
            t,
            total_mass: got,
            height: st.height(),
            n_atoms: st.mu_atoms.len() + st.frames.len(),
            eta_mass: st.eta_mass(),
        });
        ControlFlow::Continue(())
    }
}

impl ExplorationTrajectory {
    /// Sweeps the whole path from `ρ_0 = mu`, checking the mass identity
    /// `⟨ρ_t,1⟩ = (⟨μ,1⟩ + I_t)₊ + X_t - I_t` after every jump.
    pub fn explore(path: LevyPath, mu: AtomicMeasure) -> Result<Self> {
        let mut rec = Recorder {
            path: &path,
            mu_mass: mu.total_mass(),
            events: Vec::with_capacity(path.n_jumps()),
            starts: Vec::new(),
            sigma: if mu.is_zero() { Some(0.0) } else { None },
            error: None,
        };
        let mut ex = Explorer::new(path.drift(), &mu, None);
        let _ = ex.run(path.events(), path.horizon(), &mut rec);
        if let Some(e) = rec.error {
            return Err(e);
        }
        let intervals = path.excursions();
        if intervals.len() != rec.starts.len() {
            return Err(Error::Consistency(format!(
                "{} excursions on the path, {} seen by the stack",
                intervals.len(),
                rec.starts.len()
            )));
        }
        let excursions = intervals
            .into_iter()
            .zip(rec.starts)
            .map(|(interval, start)| ExcursionPiece { interval, start })
            .collect();
        let (events, sigma) = (rec.events, rec.sigma);
        Ok(Self { path, initial: mu, events, excursions, sigma })
    }

    pub fn path(&self) -> &LevyPath {
        &self.path
    }

    pub fn initial(&self) -> &AtomicMeasure {
        &self.initial
    }

    pub fn events(&self) -> &[EventSummary] {
        &self.events
    }

    /// First time `ρ_t = 0`, if reached before the horizon.
    pub fn sigma(&self) -> Option<f64> {
        self.sigma
    }

    pub fn excursion_decomposition(&self) -> &[ExcursionPiece] {
        &self.excursions
    }

    /// Index of the excursion whose closed interval `[α, β]` contains `t`.
    fn excursion_at(&self, t: f64) -> Option<usize> {
        let k = self.excursions.partition_point(|e| e.interval.alpha <= t);
        (k > 0 && t <= self.excursions[k - 1].interval.beta).then(|| k - 1)
    }

    /// Replays the stack from the start of the excursion containing `t`.
    fn replay(&self, t: f64) -> Result<Explorer<'static>> {
        let horizon = self.path.horizon();
        if !(t >= 0.0 && t <= horizon) {
            return Err(Error::HorizonExhausted { needed: t, available: horizon });
        }
        let (mut ex, jumps) = match self.excursion_at(t) {
            Some(i) => {
                let e = &self.excursions[i];
                let a = e.interval.alpha;
                let ex = Explorer::resume(
                    self.path.drift(),
                    a,
                    self.path.before_jump(e.interval.first_jump),
                    e.interval.depth,
                    &e.start,
                    None,
                );
                (ex, e.interval.first_jump..e.interval.end_jump)
            }
            None => {
                let lt = -self.path.infimum(t);
                let rest = self.initial.erase(lt.min(self.initial.total_mass()));
                let ex = Explorer::resume(self.path.drift(), t, self.path.value(t), lt, &rest, None);
                return Ok(ex);
            }
        };
        for i in jumps {
            let s = self.path.times()[i];
            if s > t {
                break;
            }
            let _ = ex.jump(s, self.path.sizes()[i], &mut NoVisit);
        }
        let _ = ex.advance(t, &mut NoVisit);
        Ok(ex)
    }

    pub fn state_at(&self, t: f64) -> Result<Snapshot> {
        let ex = self.replay(t)?;
        Ok(Snapshot { t, rho: ex.rho(), eta: ex.eta(), height: ex.height() })
    }

    pub fn rho_at(&self, t: f64) -> Result<AtomicMeasure> {
        Ok(self.replay(t)?.rho())
    }

    pub fn height_at(&self, t: f64) -> Result<f64> {
        Ok(self.replay(t)?.height())
    }

    /// `η_t`.
    pub fn dual_eta(&self, t: f64) -> Result<AtomicMeasure> {
        Ok(self.replay(t)?.eta())
    }

    /// `ρ^i_u = ρ⁰_{(α_i + u) ∧ β_i}` for excursion `i`.
    pub fn excursion_state(&self, i: usize, u: f64) -> Result<AtomicMeasure> {
        let e = &self.excursions[i].interval;
        let t = (e.alpha + u).min(e.beta);
        if t >= e.beta && !e.censored {
            return Ok(AtomicMeasure::zero());
        }
        Ok(self.replay(t)?.rho0())
    }

    /// CSV rows `t,total_mass,H,n_atoms` at the event times.
    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "total_mass", "H", "n_atoms"])?;
        for e in &self.events {
            w.write_record([e.t.to_string(), e.total_mass.to_string(), e.height.to_string(), e.n_atoms.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

struct NoVisit;
impl Visitor for NoVisit {}

/// Height at `t` computed without the stack: the number of jumps `s ≤ t` with
/// `X_{s-} < I_t^s`, divided by `c`, on top of the height of `k_{-I_t} μ`.
pub fn ladder_height(path: &LevyPath, mu: &AtomicMeasure, t: f64) -> f64 {
    let inf = path.infimum(t);
    let base = mu.partial_height(-inf);
    let mut m = path.value(t);
    let mut count = 0u32;
    let mut j = path.jumps_up_to(t);
    while j > 0 && m > inf {
        j -= 1;
        let before = path.before_jump(j);
        if before < m {
            count += 1;
            m = before;
        }
    }
    if count == 0 {
        // Outside excursions the height is that of the surviving initial measure.
        return base;
    }
    base + count as f64 / path.drift()
}
