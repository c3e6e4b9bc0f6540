mod common;

use proptest::prelude::*;
use tppsd_core::classical::presets;
use tppsd_core::eval::{categorical_emd, ks_two_sample, mark_histogram};
use tppsd_core::model::{MarkDistribution, ModelCheckpoint, ModelConfig};
use tppsd_core::sampler::{
    ar_next_event, ar_sample, draft, residual_interval_sample, residual_mark_distribution,
    sd_next_event, tpp_sd_sample, verify, RejectionPolicy,
};
use tppsd_core::{Event, RngStream};

use common::{cumulative, density, random_mixture, residual_cdf};

fn probs(raw: &[f64]) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    raw.iter().map(|x| x / total).collect()
}

/// Law of the emitted mark at a rejected position, enumerated exactly: the
/// drafted mark survives its own test with probability min(1, f_T/f_D) unless
/// the policy discards it after an interval rejection.
fn emitted_mark_law(ft: &[f64], fd: &[f64], p_interval_reject: f64, policy: RejectionPolicy) -> Vec<f64> {
    let target = MarkDistribution::new(ft.to_vec()).unwrap();
    let draft_marks = MarkDistribution::new(fd.to_vec()).unwrap();
    let residual = residual_mark_distribution(&target, &draft_marks).ok();
    let keep = match policy {
        RejectionPolicy::PositionWise => 1.0,
        RejectionPolicy::Alg1Literal => 1.0 - p_interval_reject,
    };
    let accept: Vec<f64> = ft.iter().zip(fd).map(|(t, d)| keep * d * (t / d).min(1.0)).collect();
    let reject_mass = 1.0 - accept.iter().sum::<f64>();
    (0..ft.len())
        .map(|k| accept[k] + reject_mass * residual.as_ref().map_or(0.0, |r| r[k]))
        .collect()
}

proptest! {
    #[test]
    fn position_wise_mark_law_is_the_target(
        raw_t in prop::collection::vec(1e-3f64..1.0, 2..=4),
        raw_d in prop::collection::vec(1e-3f64..1.0, 4),
        p_rej in 0.0f64..1.0,
    ) {
        let ft = probs(&raw_t);
        let fd = probs(&raw_d[..ft.len()]);
        let law = emitted_mark_law(&ft, &fd, p_rej, RejectionPolicy::PositionWise);
        for (a, b) in law.iter().zip(&ft) {
            prop_assert!((a - b).abs() < 1e-12, "{law:?} vs {ft:?}");
        }
    }
}

#[test]
fn literal_algorithm_biases_marks_after_interval_rejections() {
    let ft = [0.5, 0.3, 0.2];
    let fd = [0.2, 0.3, 0.5];
    let law = emitted_mark_law(&ft, &fd, 0.5, RejectionPolicy::Alg1Literal);
    let err: f64 = law.iter().zip(&ft).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err > 0.05, "{law:?}");
    let exact = emitted_mark_law(&ft, &fd, 0.0, RejectionPolicy::Alg1Literal);
    assert!(exact.iter().zip(&ft).all(|(a, b)| (a - b).abs() < 1e-12));
}

fn small_pair(seed: u64, k: usize) -> (ModelCheckpoint, ModelCheckpoint) {
    let root = RngStream::new(seed, 0);
    let t = ModelCheckpoint::init(ModelConfig::new(8, 3, k, 2, 2), &mut root.substream(1)).unwrap();
    let d = ModelCheckpoint::init(ModelConfig::new(8, 3, k, 1, 1), &mut root.substream(2)).unwrap();
    (t, d)
}

#[test]
fn interval_acceptance_rate_converges_to_overlap_mass() {
    let (target, draft_model) = small_pair(11, 2);
    let history = [Event::new(0.4, 0), Event::new(1.1, 1), Event::new(1.5, 0)];
    let gt = target.next_event_distribution(&history).unwrap().interval;
    let gd = draft_model.next_event_distribution(&history).unwrap().interval;
    let (_, acc) = cumulative(&[&gt, &gd], |t| density(&gt, t).min(density(&gd, t)), 40_000);
    let beta = acc[acc.len() - 1];
    let trials = 10_000;
    let root = RngStream::new(5, 0);
    let (mut dr, mut vr, mut rr) = (root.substream(1), root.substream(2), root.substream(3));
    let mut hits = 0;
    for _ in 0..trials {
        let batch = draft(&draft_model, &history, 1, &mut dr).unwrap();
        let out = verify(&target, &history, &batch, &mut vr, &mut rr, RejectionPolicy::PositionWise).unwrap();
        hits += usize::from(out.records[0].interval_accepted());
    }
    let rate = hits as f64 / trials as f64;
    let sigma = (beta * (1.0 - beta) / trials as f64).sqrt();
    assert!(beta > 0.05 && beta < 0.999, "degenerate overlap {beta}");
    assert!((rate - beta).abs() < 3.0 * sigma, "rate {rate}, beta {beta}, sigma {sigma}");
}

#[test]
fn residual_interval_draws_follow_the_quadrature_law() {
    let mut rng = RngStream::new(21, 0);
    for _ in 0..4 {
        let gt = random_mixture(&mut rng, 4);
        let gd = random_mixture(&mut rng, 4);
        let (cdf, z) = residual_cdf(&gt, &gd);
        assert!(z > 1e-3);
        let mut draw_rng = rng.substream(7);
        let draws: Vec<f64> = (0..10_000)
            .map(|_| residual_interval_sample(&gt, &gd, &mut draw_rng).unwrap().value)
            .collect();
        let d = common::ks_distance(&draws, cdf);
        assert!(d < 0.02, "KS {d} with residual mass {z}");
    }
}

#[test]
fn sd_next_event_matches_ar_in_law() {
    let history = [Event::new(0.3, 1), Event::new(0.9, 0), Event::new(2.2, 2)];
    for seed in [1u64, 2, 3] {
        let (target, draft_model) = small_pair(100 + seed, 3);
        let n = 2000;
        let mut ar_rng = RngStream::new(seed, 1);
        let ar: Vec<Event> = (0..n).map(|_| ar_next_event(&target, &history, &mut ar_rng).unwrap()).collect();
        let sd_root = RngStream::new(seed, 2);
        let sd: Vec<Event> = (0..n)
            .map(|i| {
                sd_next_event(&target, &draft_model, &history, 4, &sd_root.substream(i as u64), RejectionPolicy::PositionWise)
                    .unwrap()
                    .0
            })
            .collect();
        let times = |v: &[Event]| v.iter().map(|e| e.time).collect::<Vec<_>>();
        let ks = ks_two_sample(&times(&ar), &times(&sd)).unwrap();
        assert!(ks.p_value > 0.01, "seed {seed}: {ks:?}");
        let emd = categorical_emd(
            &mark_histogram(ar.iter().map(|e| e.mark), 3),
            &mark_histogram(sd.iter().map(|e| e.mark), 3),
        )
        .unwrap();
        assert!(emd < 0.06, "seed {seed}: emd {emd}");
    }
}

#[test]
fn one_target_forward_per_iteration() {
    let (target, draft_model) = small_pair(3, 2);
    for gamma in [1, 3, 8] {
        let (seq, stats) =
            tpp_sd_sample(&target, &draft_model, 15.0, gamma, &RngStream::new(4, 0), &[], RejectionPolicy::PositionWise)
                .unwrap();
        assert_eq!(stats.target_forwards, stats.iterations);
        assert_eq!(stats.draft_forwards, gamma * stats.iterations);
        assert_eq!(stats.drafted, gamma * stats.iterations);
        assert!(seq.validate(2).is_ok());
    }
}

#[test]
fn every_sampler_is_reproducible_under_a_seed() {
    let (target, draft_model) = small_pair(8, 2);
    for policy in [RejectionPolicy::PositionWise, RejectionPolicy::Alg1Literal] {
        let run = || tpp_sd_sample(&target, &draft_model, 12.0, 5, &RngStream::new(6, 1), &[], policy).unwrap().0;
        assert_eq!(run(), run());
    }
    let ar = || ar_sample(&target, 12.0, &mut RngStream::new(6, 1), &[]).unwrap().0;
    assert_eq!(ar(), ar());
    let process = presets::multi_hawkes();
    let thin = || process.thinning_sample(30.0, &mut RngStream::new(6, 1)).unwrap();
    assert_eq!(thin(), thin());
}

#[test]
fn speculative_continuation_respects_history() {
    let (target, draft_model) = small_pair(9, 2);
    let history = [Event::new(1.0, 0), Event::new(2.5, 1)];
    let (seq, _) =
        tpp_sd_sample(&target, &draft_model, 8.0, 4, &RngStream::new(1, 0), &history, RejectionPolicy::PositionWise)
            .unwrap();
    assert!(seq.events.iter().all(|e| e.time > 2.5 && e.time <= 8.0));
}
