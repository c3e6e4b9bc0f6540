//! Goodness-of-fit and distance metrics.

use serde::{Deserialize, Serialize};

use crate::classical::GroundTruthProcess;
use crate::error::{Error, Result};
use crate::events::{Event, EventSequence};
use crate::model::ModelCheckpoint;
use crate::rng::RngStream;
use crate::sampler::{ar_next_event, sd_next_event, RejectionPolicy};

/// Critical value of the one-sample KS test at the 95% level.
pub const KS_C95: f64 = 1.36;

/// Compensator increments `z_i` of a sequence under `process`; `z_1`
/// integrates from time zero.
pub fn time_rescale(seq: &EventSequence, process: &GroundTruthProcess) -> Vec<f64> {
    process.interval_compensators(&seq.events)
}

/// Rescaled intervals of many sequences pooled into one sample.
pub fn pooled_time_rescale(seqs: &[EventSequence], process: &GroundTruthProcess) -> Vec<f64> {
    seqs.iter().flat_map(|s| time_rescale(s, process)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KsReport {
    pub d_ks: f64,
    pub n: usize,
    pub band: f64,
    pub pass: bool,
    /// `(F(z_(i)), F_n(z_(i)))` in increasing order.
    pub plot: Vec<(f64, f64)>,
}

/// One-sample KS statistic against `Exp(1)`.
pub fn ks_statistic(z: &[f64]) -> Result<KsReport> {
    if z.is_empty() {
        return Err(Error::InvalidArgument("KS statistic needs at least one sample".into()));
    }
    let mut s = z.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    let mut plot = Vec::with_capacity(s.len());
    for (i, &x) in s.iter().enumerate() {
        let f = -(-x.max(0.0)).exp_m1();
        let hi = (i + 1) as f64 / n;
        let lo = i as f64 / n;
        d = d.max((hi - f).abs()).max((lo - f).abs());
        plot.push((f, hi));
    }
    let band = KS_C95 / n.sqrt();
    Ok(KsReport {
        d_ks: d,
        n: s.len(),
        band,
        pass: d < band,
        plot,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoSampleKs {
    pub d: f64,
    pub p_value: f64,
}

/// Two-sample KS statistic with the asymptotic Kolmogorov p-value
/// (Stephens' small-sample correction).
pub fn ks_two_sample(xs: &[f64], ys: &[f64]) -> Result<TwoSampleKs> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::InvalidArgument("two-sample KS needs nonempty samples".into()));
    }
    let mut a = xs.to_vec();
    let mut b = ys.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let en = (n * m / (n + m)).sqrt();
    let p_value = kolmogorov_survival((en + 0.12 + 0.11 / en) * d);
    Ok(TwoSampleKs { d, p_value })
}

/// `P(K > λ)` for the Kolmogorov distribution.
fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=200 {
        let jf = j as f64;
        let term = (-2.0 * jf * jf * lambda * lambda).exp();
        sum += if j % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// 1-Wasserstein distance between two empirical distributions, as the
/// integral of the absolute quantile difference.
pub fn wasserstein_1d(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::InvalidArgument("Wasserstein distance needs nonempty samples".into()));
    }
    let mut a = xs.to_vec();
    let mut b = ys.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        let s: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        return Ok(s / a.len() as f64);
    }
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut q = 0.0;
    let mut total = 0.0;
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        total += (next - q) * (a[i] - b[j]).abs();
        q = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    Ok(total)
}

/// Earth mover's distance under the 0/1 ground metric, i.e. total variation.
/// Inputs may be probabilities or raw counts; both are normalised.
pub fn categorical_emd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::InvalidArgument(format!(
            "distributions have {} and {} categories",
            p.len(),
            q.len()
        )));
    }
    let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
    if !(sp > 0.0 && sq > 0.0) {
        return Err(Error::InvalidArgument("distributions must have positive mass".into()));
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a / sp - b / sq).abs()).sum::<f64>())
}

/// Mark frequencies over `k` categories.
pub fn mark_histogram(marks: impl IntoIterator<Item = usize>, k: usize) -> Vec<f64> {
    let mut h = vec![0.0; k];
    for m in marks {
        if m < k {
            h[m] += 1.0;
        }
    }
    h
}

/// Total log-likelihood over total event count.
pub fn mean_loglik_per_event<F>(seqs: &[EventSequence], scorer: F) -> Result<f64>
where
    F: Fn(&EventSequence) -> Result<f64>,
{
    let events: usize = seqs.iter().map(EventSequence::len).sum();
    if events == 0 {
        return Err(Error::InvalidArgument("no events to score".into()));
    }
    let mut total = 0.0;
    for s in seqs {
        total += scorer(s)?;
    }
    Ok(total / events as f64)
}

/// `|L_A − L_B|` with per-event mean log-likelihoods.
pub fn likelihood_discrepancy<A, B>(seqs: &[EventSequence], a: A, b: B) -> Result<f64>
where
    A: Fn(&EventSequence) -> Result<f64>,
    B: Fn(&EventSequence) -> Result<f64>,
{
    Ok((mean_loglik_per_event(seqs, a)? - mean_loglik_per_event(seqs, b)?).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NextEventDivergence {
    pub time_distance: f64,
    pub mark_distance: f64,
}

/// Compares `repetitions` next-event draws after the first `m_hist` events of
/// `history`: plain target sampling against speculative sampling with
/// `draft`, or against a second independent target run when `draft` is
/// `None`.
pub fn next_event_divergence(
    target: &ModelCheckpoint,
    draft: Option<&ModelCheckpoint>,
    history: &[Event],
    m_hist: usize,
    repetitions: usize,
    gamma: usize,
    rng: &RngStream,
) -> Result<NextEventDivergence> {
    if history.len() < m_hist {
        return Err(Error::InvalidArgument(format!(
            "history has {} events, {m_hist} required",
            history.len()
        )));
    }
    if repetitions == 0 {
        return Err(Error::InvalidArgument("repetitions must be at least 1".into()));
    }
    let prefix = &history[..m_hist];
    let k = target.config.num_marks;
    let mut ar_rng = rng.substream(1);
    let mut base = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        base.push(ar_next_event(target, prefix, &mut ar_rng)?);
    }
    let other_root = rng.substream(2);
    let mut other = Vec::with_capacity(repetitions);
    match draft {
        Some(d) => {
            for r in 0..repetitions {
                let (e, _) = sd_next_event(
                    target,
                    d,
                    prefix,
                    gamma,
                    &other_root.substream(r as u64),
                    RejectionPolicy::PositionWise,
                )?;
                other.push(e);
            }
        }
        None => {
            let mut second = other_root;
            for _ in 0..repetitions {
                other.push(ar_next_event(target, prefix, &mut second)?);
            }
        }
    }
    let ta: Vec<f64> = base.iter().map(|e| e.time).collect();
    let tb: Vec<f64> = other.iter().map(|e| e.time).collect();
    Ok(NextEventDivergence {
        time_distance: wasserstein_1d(&ta, &tb)?,
        mark_distance: categorical_emd(
            &mark_histogram(base.iter().map(|e| e.mark), k),
            &mark_histogram(other.iter().map(|e| e.mark), k),
        )?,
    })
}

/// Named scalar metrics of one evaluation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub delta_loglik_ar: Option<f64>,
    pub delta_loglik_sd: Option<f64>,
    pub ws_time: Option<f64>,
    pub emd_mark: Option<f64>,
    pub acceptance_rate: Option<f64>,
    pub t_ar: Option<f64>,
    pub t_sd: Option<f64>,
}

impl MetricRecord {
    pub const COLUMNS: [&'static str; 8] = [
        "delta_loglik_ar",
        "delta_loglik_sd",
        "ws_time",
        "emd_mark",
        "acceptance_rate",
        "t_ar",
        "t_sd",
        "speedup",
    ];

    /// `T_AR / T_SD` when both timings are present.
    pub fn speedup(&self) -> Option<f64> {
        match (self.t_ar, self.t_sd) {
            (Some(a), Some(s)) if s > 0.0 => Some(a / s),
            _ => None,
        }
    }

    /// Values in [`Self::COLUMNS`] order, empty strings for missing metrics.
    pub fn row(&self) -> Vec<String> {
        [
            self.delta_loglik_ar,
            self.delta_loglik_sd,
            self.ws_time,
            self.emd_mark,
            self.acceptance_rate,
            self.t_ar,
            self.t_sd,
            self.speedup(),
        ]
        .iter()
        .map(|v| v.map_or_else(String::new, |x| x.to_string()))
        .collect()
    }
}
