//! Ground-truth point processes and Ogata thinning.
//!
//! Two families are supported:
//!
//! - inhomogeneous Poisson with `λ(t) = A (b + sin(ω π t))`,
//! - multivariate Hawkes with exponential kernels,
//!   `λ_i(t) = μ_i + Σ_j Σ_{t_k ∈ type j, t_k < t} α_ij exp(-β_ij (t - t_k))`.
//!
//! `alpha[i][j]` is the jump in the intensity of type `i` caused by an event
//! of type `j`. Intensities are left-continuous: an event at `t` does not
//! count towards `λ(t)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Event, EventSequence};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoissonParams {
    pub a: f64,
    pub b: f64,
    pub omega: f64,
}

impl PoissonParams {
    /// Validates positivity of `A` and non-negativity of the intensity on a
    /// grid over `[0, horizon]`.
    pub fn new(a: f64, b: f64, omega: f64, horizon: f64) -> Result<Self> {
        let p = Self { a, b, omega };
        p.check(horizon)?;
        Ok(p)
    }

    fn check(&self, horizon: f64) -> Result<()> {
        if !(self.a.is_finite() && self.a > 0.0) {
            return Err(Error::Config(format!("poisson A must be positive, got {}", self.a)));
        }
        if !self.b.is_finite() || !self.omega.is_finite() {
            return Err(Error::Config("poisson b and omega must be finite".into()));
        }
        const GRID: usize = 10_000;
        for i in 0..=GRID {
            let t = horizon * i as f64 / GRID as f64;
            if self.rate(t) < 0.0 {
                return Err(Error::Config(format!(
                    "poisson intensity negative at t={t} (A={}, b={}, omega={})",
                    self.a, self.b, self.omega
                )));
            }
        }
        Ok(())
    }

    pub fn rate(&self, t: f64) -> f64 {
        self.a * (self.b + (self.omega * std::f64::consts::PI * t).sin())
    }

    pub fn integrated_rate(&self, t0: f64, t1: f64) -> f64 {
        let w = self.omega * std::f64::consts::PI;
        let base = self.a * self.b * (t1 - t0);
        if w == 0.0 {
            return base;
        }
        base - self.a / w * ((w * t1).cos() - (w * t0).cos())
    }

    fn upper_bound(&self) -> f64 {
        if self.omega == 0.0 {
            self.a * self.b
        } else {
            self.a * (self.b + 1.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HawkesParams {
    pub mu: Vec<f64>,
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
}

impl HawkesParams {
    pub fn new(mu: Vec<f64>, alpha: Vec<Vec<f64>>, beta: Vec<Vec<f64>>) -> Result<Self> {
        let p = Self { mu, alpha, beta };
        p.check()?;
        Ok(p)
    }

    pub fn univariate(mu: f64, alpha: f64, beta: f64) -> Result<Self> {
        Self::new(vec![mu], vec![vec![alpha]], vec![vec![beta]])
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    fn check(&self) -> Result<()> {
        let d = self.mu.len();
        if d == 0 {
            return Err(Error::Config("hawkes needs at least one dimension".into()));
        }
        if self.alpha.len() != d || self.beta.len() != d {
            return Err(Error::Config(format!("hawkes alpha/beta must be {d}x{d}")));
        }
        for i in 0..d {
            if self.alpha[i].len() != d || self.beta[i].len() != d {
                return Err(Error::Config(format!("hawkes alpha/beta must be {d}x{d}")));
            }
            if !(self.mu[i].is_finite() && self.mu[i] >= 0.0) {
                return Err(Error::Config(format!("hawkes mu[{i}] must be >= 0")));
            }
            for j in 0..d {
                if !(self.alpha[i][j].is_finite() && self.alpha[i][j] >= 0.0) {
                    return Err(Error::Config(format!("hawkes alpha[{i}][{j}] must be >= 0")));
                }
                if !(self.beta[i][j].is_finite() && self.beta[i][j] > 0.0) {
                    return Err(Error::Config(format!("hawkes beta[{i}][{j}] must be > 0")));
                }
            }
        }
        let rho = self.branching_spectral_radius();
        if rho >= 1.0 {
            log::warn!("hawkes process is not stationary: spectral radius of alpha/beta is {rho:.4}");
        }
        Ok(())
    }

    /// Spectral radius of the branching matrix `α/β` (power iteration; the
    /// matrix is non-negative so the Perron root dominates).
    pub fn branching_spectral_radius(&self) -> f64 {
        let d = self.dim();
        let m: Vec<f64> = (0..d * d)
            .map(|k| self.alpha[k / d][k % d] / self.beta[k / d][k % d])
            .collect();
        let mut v = vec![1.0; d];
        let mut rho = 0.0;
        for _ in 0..500 {
            let w: Vec<f64> = (0..d)
                .map(|i| (0..d).map(|j| m[i * d + j] * v[j]).sum::<f64>())
                .collect();
            let norm = w.iter().map(|x| x.abs()).fold(0.0, f64::max);
            if norm == 0.0 {
                return 0.0;
            }
            rho = norm / v.iter().map(|x| x.abs()).fold(0.0, f64::max);
            v = w.into_iter().map(|x| x / norm).collect();
        }
        rho
    }

    /// Per-type excitation at `t` from events strictly before `t`
    /// (or at or before `t` when `inclusive`).
    fn rates_direct(&self, t: f64, history: &[Event], inclusive: bool) -> Vec<f64> {
        let d = self.dim();
        let mut out = self.mu.clone();
        for e in history {
            if e.time > t || (!inclusive && e.time == t) {
                continue;
            }
            for (i, r) in out.iter_mut().enumerate().take(d) {
                *r += self.alpha[i][e.mark] * (-self.beta[i][e.mark] * (t - e.time)).exp();
            }
        }
        out
    }
}

/// Recursive excitation state for exponential kernels.
#[derive(Debug, Clone)]
struct HawkesState<'a> {
    p: &'a HawkesParams,
    time: f64,
    // exc[i * d + j]: current excitation of type i by past events of type j
    exc: Vec<f64>,
}

impl<'a> HawkesState<'a> {
    fn new(p: &'a HawkesParams) -> Self {
        let d = p.dim();
        Self {
            p,
            time: 0.0,
            exc: vec![0.0; d * d],
        }
    }

    fn d(&self) -> usize {
        self.p.dim()
    }

    /// Compensator per type over `[self.time, t]` assuming no events inside.
    fn compensator_to(&self, t: f64) -> Vec<f64> {
        let d = self.d();
        let dt = t - self.time;
        (0..d)
            .map(|i| {
                let mut c = self.p.mu[i] * dt;
                for j in 0..d {
                    let b = self.p.beta[i][j];
                    c += self.exc[i * d + j] / b * (1.0 - (-b * dt).exp());
                }
                c
            })
            .collect()
    }

    fn advance_to(&mut self, t: f64) {
        let d = self.d();
        let dt = t - self.time;
        for i in 0..d {
            for j in 0..d {
                self.exc[i * d + j] *= (-self.p.beta[i][j] * dt).exp();
            }
        }
        self.time = t;
    }

    fn rates(&self) -> Vec<f64> {
        let d = self.d();
        (0..d)
            .map(|i| self.p.mu[i] + self.exc[i * d..(i + 1) * d].iter().sum::<f64>())
            .collect()
    }

    fn add_event(&mut self, mark: usize) {
        let d = self.d();
        for i in 0..d {
            self.exc[i * d + mark] += self.p.alpha[i][mark];
        }
    }
}

/// A process whose conditional intensity is known in closed form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GroundTruthProcess {
    Poisson(PoissonParams),
    Hawkes(HawkesParams),
}

impl GroundTruthProcess {
    /// Re-runs the parameter checks (used after deserialisation).
    pub fn validate(&self, horizon: f64) -> Result<()> {
        match self {
            GroundTruthProcess::Poisson(p) => p.check(horizon),
            GroundTruthProcess::Hawkes(h) => h.check(),
        }
    }

    pub fn num_types(&self) -> usize {
        match self {
            GroundTruthProcess::Poisson(_) => 1,
            GroundTruthProcess::Hawkes(h) => h.dim(),
        }
    }

    /// Per-type intensity at `t` given the history (events strictly before `t`
    /// contribute).
    pub fn intensity(&self, t: f64, history: &[Event]) -> Result<Vec<f64>> {
        if let Some(last) = history.last() {
            if t < last.time {
                return Err(Error::InvalidArgument(format!(
                    "query time {t} precedes history end {}",
                    last.time
                )));
            }
        }
        Ok(match self {
            GroundTruthProcess::Poisson(p) => vec![p.rate(t)],
            GroundTruthProcess::Hawkes(h) => h.rates_direct(t, history, false),
        })
    }

    /// Integrated intensity per type over `[t0, t1]`. Only history events at or
    /// before `t0` are used; none may fall inside `(t0, t1)`.
    pub fn compensator(&self, t0: f64, t1: f64, history: &[Event]) -> Result<Vec<f64>> {
        if t1 < t0 {
            return Err(Error::InvalidArgument(format!("compensator bounds reversed: {t0} > {t1}")));
        }
        if history.iter().any(|e| e.time > t0 && e.time < t1) {
            return Err(Error::InvalidArgument(format!(
                "history has events inside ({t0}, {t1})"
            )));
        }
        Ok(match self {
            GroundTruthProcess::Poisson(p) => vec![p.integrated_rate(t0, t1)],
            GroundTruthProcess::Hawkes(h) => {
                let d = h.dim();
                let mut out: Vec<f64> = h.mu.iter().map(|m| m * (t1 - t0)).collect();
                for e in history.iter().filter(|e| e.time <= t0) {
                    for (i, o) in out.iter_mut().enumerate().take(d) {
                        let (a, b) = (h.alpha[i][e.mark], h.beta[i][e.mark]);
                        *o += a / b * ((-b * (t0 - e.time)).exp() - (-b * (t1 - e.time)).exp());
                    }
                }
                out
            }
        })
    }

    /// Ogata thinning on `(0, t_end]`.
    pub fn thinning_sample(&self, t_end: f64, rng: &mut RngStream) -> Result<EventSequence> {
        let mut events = Vec::new();
        match self {
            GroundTruthProcess::Poisson(p) => {
                let bound = p.upper_bound();
                if bound <= 0.0 {
                    return Ok(EventSequence::new(events, t_end));
                }
                let mut t = 0.0;
                loop {
                    t += rng.exponential(bound);
                    if t > t_end {
                        break;
                    }
                    let rate = p.rate(t);
                    if !rate.is_finite() {
                        return Err(Error::Numerical(format!("non-finite intensity at t={t}")));
                    }
                    if rng.uniform01() < rate / bound {
                        events.push(Event::new(t, 0));
                    }
                }
            }
            GroundTruthProcess::Hawkes(h) => {
                let mut state = HawkesState::new(h);
                let mut bound: f64 = h.mu.iter().sum();
                let mut t = 0.0;
                while bound > 0.0 {
                    if !bound.is_finite() {
                        return Err(Error::Numerical(format!("non-finite intensity bound at t={t}")));
                    }
                    t += rng.exponential(bound);
                    if t > t_end {
                        break;
                    }
                    state.advance_to(t);
                    let rates = state.rates();
                    let total: f64 = rates.iter().sum();
                    if !total.is_finite() {
                        return Err(Error::Numerical(format!("non-finite intensity at t={t}")));
                    }
                    if rng.uniform01() < total / bound {
                        let mark = if rates.len() == 1 { 0 } else { rng.categorical(&rates) };
                        events.push(Event::new(t, mark));
                        state.add_event(mark);
                        bound = state.rates().iter().sum();
                    } else {
                        bound = total;
                    }
                }
            }
        }
        Ok(EventSequence::new(events, t_end))
    }

    /// Total (summed over types) compensator between consecutive events,
    /// starting from 0. These are the time-rescaled intervals.
    pub fn interval_compensators(&self, events: &[Event]) -> Vec<f64> {
        match self {
            GroundTruthProcess::Poisson(p) => {
                let mut prev = 0.0;
                events
                    .iter()
                    .map(|e| {
                        let z = p.integrated_rate(prev, e.time);
                        prev = e.time;
                        z
                    })
                    .collect()
            }
            GroundTruthProcess::Hawkes(h) => {
                let mut state = HawkesState::new(h);
                events
                    .iter()
                    .map(|e| {
                        let z = state.compensator_to(e.time).iter().sum();
                        state.advance_to(e.time);
                        state.add_event(e.mark);
                        z
                    })
                    .collect()
            }
        }
    }

    /// CIF-form log-likelihood: `Σ log λ(t_i, k_i) − Σ_k Λ_k(0, T)`.
    /// Returns `-inf` when some event falls where its type has zero intensity.
    pub fn loglik(&self, seq: &EventSequence) -> Result<f64> {
        seq.validate(self.num_types())?;
        let t_end = seq.t_end;
        match self {
            GroundTruthProcess::Poisson(p) => {
                let mut ll = 0.0;
                for e in &seq.events {
                    let r = p.rate(e.time);
                    if r <= 0.0 {
                        return Ok(f64::NEG_INFINITY);
                    }
                    ll += r.ln();
                }
                Ok(ll - p.integrated_rate(0.0, t_end))
            }
            GroundTruthProcess::Hawkes(h) => {
                let mut state = HawkesState::new(h);
                let mut ll = 0.0;
                let mut comp = 0.0;
                for e in &seq.events {
                    comp += state.compensator_to(e.time).iter().sum::<f64>();
                    state.advance_to(e.time);
                    let r = state.rates()[e.mark];
                    if r <= 0.0 {
                        return Ok(f64::NEG_INFINITY);
                    }
                    ll += r.ln();
                    state.add_event(e.mark);
                }
                comp += state.compensator_to(t_end).iter().sum::<f64>();
                Ok(ll - comp)
            }
        }
    }

    /// `n` independent thinning samples; sequence `i` uses sub-stream `i`.
    pub fn make_synthetic_dataset(
        &self,
        n: usize,
        t_end: f64,
        rng: &RngStream,
    ) -> Result<Vec<EventSequence>> {
        if n == 0 {
            return Err(Error::InvalidArgument("n must be ≥ 1".into()));
        }
        self.validate(t_end)?;
        (0..n)
            .map(|i| self.thinning_sample(t_end, &mut rng.substream(i as u64)))
            .collect()
    }
}

/// Appendix-style reference processes used throughout the tests and CLI.
pub mod presets {
    use super::*;

    pub fn poisson() -> GroundTruthProcess {
        GroundTruthProcess::Poisson(PoissonParams {
            a: 5.0,
            b: 1.0,
            omega: 1.0 / 50.0,
        })
    }

    pub fn hawkes() -> GroundTruthProcess {
        GroundTruthProcess::Hawkes(HawkesParams::univariate(2.5, 1.0, 2.0).expect("valid"))
    }

    pub fn multi_hawkes() -> GroundTruthProcess {
        GroundTruthProcess::Hawkes(
            HawkesParams::new(
                vec![0.4, 0.4],
                vec![vec![1.0, 0.5], vec![0.1, 1.0]],
                vec![vec![2.0, 2.0], vec![2.0, 2.0]],
            )
            .expect("valid"),
        )
    }

    /// Homogeneous Poisson with the given rate (a Hawkes process with no excitation).
    pub fn homogeneous(rate: f64) -> GroundTruthProcess {
        GroundTruthProcess::Hawkes(HawkesParams::univariate(rate, 0.0, 1.0).expect("valid"))
    }
}
