//! Autoregressive sampling and speculative (draft, verify, resample)
//! sampling.
//!
//! One speculative iteration drafts `γ` events from the draft model, scores
//! them with a single target forward pass, accepts the longest prefix that
//! passes both the interval and mark tests, and replaces the first rejected
//! event by a draw from the residual distribution. Every run splits its
//! random stream into independent draft, verify and residual sub-streams.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Event, EventSequence};
use crate::model::{MarkDistribution, MixtureParams, ModelCheckpoint, NextEventDistribution};
use crate::numeric::ratio_from_logs;
use crate::rng::{labels, RngStream};

/// Proposal budget of the residual interval sampler.
pub const RESIDUAL_MAX_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectionPolicy {
    /// Resample only what was rejected at the first failing position.
    #[default]
    PositionWise,
    /// Resample both interval and mark from the residuals on any rejection.
    Alg1Literal,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleRunStats {
    pub wall_seconds: f64,
    pub drafted: usize,
    pub accepted: usize,
    pub target_forwards: usize,
    pub draft_forwards: usize,
    pub iterations: usize,
    pub residual_fallbacks: usize,
}

impl SampleRunStats {
    /// Accepted over drafted events, `None` before anything was drafted.
    pub fn acceptance_rate(&self) -> Option<f64> {
        (self.drafted > 0).then(|| self.accepted as f64 / self.drafted as f64)
    }

    fn absorb(&mut self, other: &SampleRunStats) {
        self.drafted += other.drafted;
        self.accepted += other.accepted;
        self.target_forwards += other.target_forwards;
        self.draft_forwards += other.draft_forwards;
        self.iterations += other.iterations;
        self.residual_fallbacks += other.residual_fallbacks;
    }
}

#[derive(Debug, Clone)]
pub struct DraftCandidate {
    pub interval: f64,
    pub time: f64,
    pub mark: usize,
    pub log_g_draft: f64,
    pub draft_interval: MixtureParams,
    pub draft_marks: MarkDistribution,
}

#[derive(Debug, Clone)]
pub struct DraftBatch {
    pub candidates: Vec<DraftCandidate>,
    pub forward_passes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcceptanceRecord {
    pub interval_ratio: f64,
    pub mark_ratio: f64,
    pub eps_interval: f64,
    pub eps_mark: f64,
}

impl AcceptanceRecord {
    pub fn interval_accepted(&self) -> bool {
        self.eps_interval < self.interval_ratio
    }

    pub fn mark_accepted(&self) -> bool {
        self.eps_mark < self.mark_ratio
    }
}

#[derive(Debug, Clone)]
pub struct VerificationOutcome {
    pub accepted: usize,
    pub replacement: Option<Event>,
    pub records: Vec<AcceptanceRecord>,
    pub drafted: usize,
    pub residual_fallbacks: usize,
}

/// Length of the accepted prefix: the first position whose interval or mark
/// test fails, or the number of records when all pass.
pub fn accepted_prefix_len(records: &[AcceptanceRecord]) -> usize {
    records
        .iter()
        .position(|r| !(r.interval_accepted() && r.mark_accepted()))
        .unwrap_or(records.len())
}

/// A residual interval draw and how it was obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualDraw {
    pub value: f64,
    pub attempts: usize,
    pub fell_back: bool,
}

/// Draws from `norm(max(0, g_T − g_D))` by proposing from `g_T` and accepting
/// with probability `max(0, g_T − g_D) / g_T`. After
/// [`RESIDUAL_MAX_ATTEMPTS`] proposals a plain `g_T` draw is returned.
pub fn residual_interval_sample(
    target: &MixtureParams,
    draft: &MixtureParams,
    rng: &mut RngStream,
) -> Result<ResidualDraw> {
    for attempt in 1..=RESIDUAL_MAX_ATTEMPTS {
        let (tau, log_t) = target.sample(rng);
        let log_d = draft.logpdf(tau)?;
        if log_t.is_nan() || log_d.is_nan() || log_t == f64::INFINITY || log_d == f64::INFINITY {
            return Err(Error::Numerical(format!(
                "non-finite densities at interval {tau}: target {log_t}, draft {log_d}"
            )));
        }
        let threshold = (1.0 - ratio_from_logs(log_d, log_t)).max(0.0);
        if rng.uniform01() < threshold {
            return Ok(ResidualDraw {
                value: tau,
                attempts: attempt,
                fell_back: false,
            });
        }
    }
    log::warn!(
        "residual interval sampler exhausted {RESIDUAL_MAX_ATTEMPTS} proposals; using a target draw"
    );
    Ok(ResidualDraw {
        value: target.sample(rng).0,
        attempts: RESIDUAL_MAX_ATTEMPTS,
        fell_back: true,
    })
}

/// `norm(max(0, f_T − f_D))`.
pub fn residual_mark_distribution(
    target: &MarkDistribution,
    draft: &MarkDistribution,
) -> Result<Vec<f64>> {
    if target.num_marks() != draft.num_marks() {
        return Err(Error::InvalidArgument("mark distributions differ in size".into()));
    }
    let pos: Vec<f64> = target
        .probs
        .iter()
        .zip(&draft.probs)
        .map(|(t, d)| (t - d).max(0.0))
        .collect();
    let z: f64 = pos.iter().sum();
    if !(z > 0.0) {
        return Err(Error::Numerical("residual mark distribution has zero mass".into()));
    }
    Ok(pos.into_iter().map(|p| p / z).collect())
}

pub fn residual_mark_sample(
    target: &MarkDistribution,
    draft: &MarkDistribution,
    rng: &mut RngStream,
) -> Result<usize> {
    let residual = residual_mark_distribution(target, draft)?;
    Ok(rng.categorical(&residual))
}

fn sample_next(dist: &NextEventDistribution, rng: &mut RngStream) -> (f64, usize) {
    let (tau, _) = dist.interval.sample(rng);
    let mark = dist.mark.sample(rng);
    (tau, mark)
}

fn check_history(history: &[Event], t_end: f64, k: usize) -> Result<()> {
    crate::events::validate_events(history, t_end.max(history.last().map_or(0.0, |e| e.time)), k)
        .map_err(Error::from)
}

/// Plain autoregressive sampling from `target` on `(last history time, t_end]`.
/// The returned sequence holds only the newly sampled events.
pub fn ar_sample(
    target: &ModelCheckpoint,
    t_end: f64,
    rng: &mut RngStream,
    history: &[Event],
) -> Result<(EventSequence, SampleRunStats)> {
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(Error::InvalidArgument(format!("t_end must be positive, got {t_end}")));
    }
    check_history(history, t_end, target.config.num_marks)?;
    let start = Instant::now();
    let mut stats = SampleRunStats::default();
    let mut events = history.to_vec();
    let mut last = events.last().map_or(0.0, |e| e.time);
    loop {
        let dist = target.next_event_distribution(&events)?;
        stats.target_forwards += 1;
        let (tau, mark) = sample_next(&dist, rng);
        let t = last + tau;
        if t > t_end {
            break;
        }
        events.push(Event::new(t, mark));
        last = t;
    }
    stats.wall_seconds = start.elapsed().as_secs_f64();
    let fresh = events.split_off(history.len());
    Ok((EventSequence::new(fresh, t_end), stats))
}

/// Samples `gamma` candidates autoregressively from the draft model.
pub fn draft(
    draft_model: &ModelCheckpoint,
    history: &[Event],
    gamma: usize,
    rng: &mut RngStream,
) -> Result<DraftBatch> {
    if gamma == 0 {
        return Err(Error::InvalidArgument("gamma must be at least 1".into()));
    }
    let mut events = history.to_vec();
    let mut last = events.last().map_or(0.0, |e| e.time);
    let mut candidates = Vec::with_capacity(gamma);
    for _ in 0..gamma {
        let dist = draft_model.next_event_distribution(&events)?;
        let (tau, log_g) = dist.interval.sample(rng);
        if !log_g.is_finite() {
            return Err(Error::Numerical(format!("draft density {log_g} at interval {tau}")));
        }
        let mark = dist.mark.sample(rng);
        let time = last + tau;
        if time <= last {
            // the interval vanished against a large time stamp
            return Err(Error::Numerical(format!("draft interval {tau} lost at time {last}")));
        }
        events.push(Event::new(time, mark));
        last = time;
        candidates.push(DraftCandidate {
            interval: tau,
            time,
            mark,
            log_g_draft: log_g,
            draft_interval: dist.interval,
            draft_marks: dist.mark,
        });
    }
    Ok(DraftBatch {
        candidates,
        forward_passes: gamma,
    })
}

/// Acceptance ratios of every candidate against target distributions.
fn ratios(
    batch: &DraftBatch,
    target: &[NextEventDistribution],
) -> Result<Vec<(f64, f64)>> {
    batch
        .candidates
        .iter()
        .zip(target)
        .map(|(c, t)| {
            let log_t = t.interval.logpdf(c.interval)?;
            if !log_t.is_finite() || !c.log_g_draft.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite interval density: target {log_t}, draft {}",
                    c.log_g_draft
                )));
            }
            let ft = t.mark.prob(c.mark);
            let fd = c.draft_marks.prob(c.mark);
            if !(fd > 0.0) || !ft.is_finite() {
                return Err(Error::Numerical(format!("mark probabilities {ft} / {fd}")));
            }
            Ok((ratio_from_logs(log_t, c.log_g_draft), ft / fd))
        })
        .collect()
}

/// Verifies a draft batch with one target forward pass over
/// `history + candidates[..γ−1]` and resolves the first rejection.
pub fn verify(
    target: &ModelCheckpoint,
    history: &[Event],
    batch: &DraftBatch,
    verify_rng: &mut RngStream,
    residual_rng: &mut RngStream,
    policy: RejectionPolicy,
) -> Result<VerificationOutcome> {
    let gamma = batch.candidates.len();
    let mut events = history.to_vec();
    events.extend(batch.candidates[..gamma - 1].iter().map(|c| Event::new(c.time, c.mark)));
    let dists = target.next_event_distributions(&events, history.len())?;
    let ratio_pairs = ratios(batch, &dists)?;
    let records: Vec<AcceptanceRecord> = ratio_pairs
        .iter()
        .map(|&(interval_ratio, mark_ratio)| AcceptanceRecord {
            interval_ratio,
            mark_ratio,
            eps_interval: verify_rng.uniform01(),
            eps_mark: verify_rng.uniform01(),
        })
        .collect();
    let accepted = accepted_prefix_len(&records);
    let mut outcome = VerificationOutcome {
        accepted,
        replacement: None,
        records,
        drafted: gamma,
        residual_fallbacks: 0,
    };
    if accepted == gamma {
        return Ok(outcome);
    }
    let l = accepted;
    let cand = &batch.candidates[l];
    let rec = outcome.records[l];
    let dist = &dists[l];
    let base = if l == 0 {
        history.last().map_or(0.0, |e| e.time)
    } else {
        batch.candidates[l - 1].time
    };
    let interval_ok = rec.interval_accepted() && policy == RejectionPolicy::PositionWise;
    let tau = if interval_ok {
        cand.interval
    } else {
        let draw = residual_interval_sample(&dist.interval, &cand.draft_interval, residual_rng)?;
        outcome.residual_fallbacks += usize::from(draw.fell_back);
        draw.value
    };
    let mark_ok = rec.mark_accepted() && policy == RejectionPolicy::PositionWise;
    let mark = if mark_ok {
        cand.mark
    } else {
        match residual_mark_sample(&dist.mark, &cand.draft_marks, residual_rng) {
            Ok(k) => k,
            Err(Error::Numerical(_)) => {
                log::warn!("residual mark distribution is empty; using a target draw");
                outcome.residual_fallbacks += 1;
                dist.mark.sample(residual_rng)
            }
            Err(e) => return Err(e),
        }
    };
    outcome.replacement = Some(Event::new(base + tau, mark));
    Ok(outcome)
}

/// Sub-streams used by one speculative run.
struct SdStreams {
    draft: RngStream,
    verify: RngStream,
    residual: RngStream,
}

impl SdStreams {
    fn new(rng: &RngStream) -> Self {
        Self {
            draft: rng.substream(labels::DRAFT),
            verify: rng.substream(labels::VERIFY),
            residual: rng.substream(labels::RESIDUAL),
        }
    }
}

fn sd_iteration(
    target: &ModelCheckpoint,
    draft_model: &ModelCheckpoint,
    events: &mut Vec<Event>,
    gamma: usize,
    streams: &mut SdStreams,
    policy: RejectionPolicy,
    stats: &mut SampleRunStats,
) -> Result<()> {
    let batch = draft(draft_model, events, gamma, &mut streams.draft)?;
    let outcome = verify(
        target,
        events,
        &batch,
        &mut streams.verify,
        &mut streams.residual,
        policy,
    )?;
    stats.absorb(&SampleRunStats {
        drafted: outcome.drafted,
        accepted: outcome.accepted,
        target_forwards: 1,
        draft_forwards: batch.forward_passes,
        iterations: 1,
        residual_fallbacks: outcome.residual_fallbacks,
        wall_seconds: 0.0,
    });
    events.extend(
        batch.candidates[..outcome.accepted]
            .iter()
            .map(|c| Event::new(c.time, c.mark)),
    );
    events.extend(outcome.replacement);
    Ok(())
}

fn check_pair(target: &ModelCheckpoint, draft_model: &ModelCheckpoint, gamma: usize) -> Result<()> {
    if target.config.num_marks != draft_model.config.num_marks {
        return Err(Error::Config(format!(
            "target has {} marks, draft has {}",
            target.config.num_marks, draft_model.config.num_marks
        )));
    }
    if gamma == 0 {
        return Err(Error::InvalidArgument("gamma must be at least 1".into()));
    }
    Ok(())
}

/// Speculative sampling on `(last history time, t_end]`. The returned sequence
/// holds only the newly sampled events.
pub fn tpp_sd_sample(
    target: &ModelCheckpoint,
    draft_model: &ModelCheckpoint,
    t_end: f64,
    gamma: usize,
    rng: &RngStream,
    history: &[Event],
    policy: RejectionPolicy,
) -> Result<(EventSequence, SampleRunStats)> {
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(Error::InvalidArgument(format!("t_end must be positive, got {t_end}")));
    }
    check_pair(target, draft_model, gamma)?;
    check_history(history, t_end, target.config.num_marks)?;
    let start = Instant::now();
    let mut streams = SdStreams::new(rng);
    let mut stats = SampleRunStats::default();
    let mut events = history.to_vec();
    while events.last().map_or(0.0, |e| e.time) <= t_end {
        sd_iteration(target, draft_model, &mut events, gamma, &mut streams, policy, &mut stats)?;
    }
    let mut fresh = events.split_off(history.len());
    fresh.retain(|e| e.time <= t_end);
    stats.wall_seconds = start.elapsed().as_secs_f64();
    if stats.residual_fallbacks > 0 {
        log::warn!("{} residual fallbacks in this run", stats.residual_fallbacks);
    }
    Ok((EventSequence::new(fresh, t_end), stats))
}

/// The next event after `history` under plain target sampling.
pub fn ar_next_event(
    target: &ModelCheckpoint,
    history: &[Event],
    rng: &mut RngStream,
) -> Result<Event> {
    let dist = target.next_event_distribution(history)?;
    let (tau, mark) = sample_next(&dist, rng);
    Ok(Event::new(history.last().map_or(0.0, |e| e.time) + tau, mark))
}

/// The first event emitted by one speculative iteration after `history`.
pub fn sd_next_event(
    target: &ModelCheckpoint,
    draft_model: &ModelCheckpoint,
    history: &[Event],
    gamma: usize,
    rng: &RngStream,
    policy: RejectionPolicy,
) -> Result<(Event, SampleRunStats)> {
    check_pair(target, draft_model, gamma)?;
    let mut streams = SdStreams::new(rng);
    let mut stats = SampleRunStats::default();
    let mut events = history.to_vec();
    sd_iteration(target, draft_model, &mut events, gamma, &mut streams, policy, &mut stats)?;
    Ok((events[history.len()], stats))
}
