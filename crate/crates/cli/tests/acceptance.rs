//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use tempfile::TempDir;
use tppsd_cli::args::{BenchArgs, PolicyArg};
use tppsd_cli::commands::{bench_rows, BENCH_COLUMNS};
use tppsd_cli::construct::layered_pair;
use tppsd_core::autodiff::Tensor;
use tppsd_core::classical::presets;
use tppsd_core::eval::{categorical_emd, ks_statistic, ks_two_sample, mark_histogram, pooled_time_rescale};
use tppsd_core::model::{AttentionVariant, EncodingVariant, MarkDistribution, ModelCheckpoint, ModelConfig};
use tppsd_core::sampler::{
    ar_next_event, ar_sample, residual_interval_sample, residual_mark_distribution, sd_next_event,
    tpp_sd_sample, RejectionPolicy,
};
use tppsd_core::train::{nll_batch, per_event_loglik, train, TrainConfig};
use tppsd_core::{Event, EventSequence, RngStream};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn thinning_fidelity() -> Verdict {
    let processes = [
        ("poisson", presets::poisson()),
        ("hawkes", presets::hawkes()),
        ("multi-hawkes", presets::multi_hawkes()),
    ];
    let mut all = true;
    let mut parts = Vec::new();
    for (name, process) in processes {
        let mut passes = 0;
        let mut ds = Vec::new();
        for seed in [1u64, 2, 3] {
            let seqs = process.make_synthetic_dataset(500, 100.0, &RngStream::new(seed, 0)).unwrap();
            let report = ks_statistic(&pooled_time_rescale(&seqs, &process)).unwrap();
            passes += usize::from(report.pass);
            ds.push(format!("{:.4}/{:.4}", report.d_ks, report.band));
        }
        all &= passes >= 2;
        parts.push(format!("{name} {passes}/3 [{}]", ds.join(" ")));
    }
    verdict(all, parts.join("; "))
}

fn residual_oracle() -> Verdict {
    let mut rng = RngStream::new(2024, 0);
    let mut worst: f64 = 0.0;
    for pair in 0..20u64 {
        let gt = common::random_mixture(&mut rng, 4);
        let gd = common::random_mixture(&mut rng, 4);
        let (cdf, _) = common::residual_cdf(&gt, &gd);
        let mut draws_rng = RngStream::new(2024, 100 + pair);
        let draws: Vec<f64> = (0..10_000)
            .map(|_| residual_interval_sample(&gt, &gd, &mut draws_rng).unwrap().value)
            .collect();
        worst = worst.max(common::ks_distance(&draws, cdf));
    }
    verdict(worst < 0.02, format!("20 pairs, max KS distance {worst:.4} (limit 0.02)"))
}

fn mark_law_exactness() -> Verdict {
    let mut rng = RngStream::new(77, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let k = 2 + (rng.uniform01() * 3.0) as usize;
        let draw = |rng: &mut RngStream| {
            let raw: Vec<f64> = (0..k).map(|_| 1e-3 + rng.uniform01()).collect();
            let total: f64 = raw.iter().sum();
            raw.iter().map(|x| x / total).collect::<Vec<f64>>()
        };
        let ft = draw(&mut rng);
        let fd = draw(&mut rng);
        let target = MarkDistribution::new(ft.clone()).unwrap();
        let draft = MarkDistribution::new(fd.clone()).unwrap();
        let accept: Vec<f64> = ft.iter().zip(&fd).map(|(t, d)| d * (t / d).min(1.0)).collect();
        let reject = 1.0 - accept.iter().sum::<f64>();
        let residual = residual_mark_distribution(&target, &draft).ok();
        for j in 0..k {
            let law = accept[j] + reject * residual.as_ref().map_or(0.0, |r| r[j]);
            worst = worst.max((law - ft[j]).abs());
        }
    }
    verdict(worst < 1e-12, format!("50 pairs, max abs error {worst:.2e}"))
}

fn sd_matches_ar() -> Verdict {
    let history = [Event::new(0.5, 0), Event::new(1.2, 2), Event::new(2.0, 1)];
    let mut p_ok = 0;
    let mut emd_ok = true;
    let mut parts = Vec::new();
    for pair in 0..5u64 {
        let root = RngStream::new(500 + pair, 0);
        let target = ModelCheckpoint::init(ModelConfig::new(16, 8, 3, 2, 4), &mut root.substream(1)).unwrap();
        let draft = ModelCheckpoint::init(ModelConfig::new(16, 8, 3, 1, 1), &mut root.substream(2)).unwrap();
        let mut ar_rng = root.substream(3);
        let ar: Vec<Event> = (0..2000).map(|_| ar_next_event(&target, &history, &mut ar_rng).unwrap()).collect();
        let sd_root = root.substream(4);
        let mut drafted = 0;
        let mut accepted = 0;
        let sd: Vec<Event> = (0..2000u64)
            .map(|i| {
                let (e, s) =
                    sd_next_event(&target, &draft, &history, 5, &sd_root.substream(i), RejectionPolicy::PositionWise)
                        .unwrap();
                drafted += s.drafted;
                accepted += s.accepted;
                e
            })
            .collect();
        let times = |v: &[Event]| v.iter().map(|e| e.time).collect::<Vec<_>>();
        let ks = ks_two_sample(&times(&ar), &times(&sd)).unwrap();
        let emd = categorical_emd(
            &mark_histogram(ar.iter().map(|e| e.mark), 3),
            &mark_histogram(sd.iter().map(|e| e.mark), 3),
        )
        .unwrap();
        p_ok += usize::from(ks.p_value > 0.01);
        emd_ok &= emd < 0.06;
        parts.push(format!(
            "p={:.3} emd={:.3} alpha={:.2}",
            ks.p_value,
            emd,
            accepted as f64 / drafted as f64
        ));
    }
    verdict(p_ok >= 4 && emd_ok, format!("{p_ok}/5 with p>0.01; [{}]", parts.join("; ")))
}

fn controlled_speedup() -> Verdict {
    let (target, draft) = layered_pair(16, 8, 3, 20, 0.0, 5).unwrap();
    let reps = 3;
    let (mut t_ar, mut t_sd) = (0.0, 0.0);
    let (mut drafted, mut accepted) = (0, 0);
    let mut events = (0, 0);
    for r in 0..reps {
        let root = RngStream::new(5, r);
        let (a, sa) = ar_sample(&target, 100.0, &mut root.substream(4), &[]).unwrap();
        let (s, ss) = tpp_sd_sample(&target, &draft, 100.0, 10, &root, &[], RejectionPolicy::PositionWise).unwrap();
        t_ar += sa.wall_seconds;
        t_sd += ss.wall_seconds;
        drafted += ss.drafted;
        accepted += ss.accepted;
        events.0 += a.len();
        events.1 += s.len();
    }
    let alpha = accepted as f64 / drafted as f64;
    let speedup = t_ar / t_sd;
    verdict(
        accepted == drafted && speedup > 1.5,
        format!(
            "alpha={alpha} ({accepted}/{drafted}), S={speedup:.2} (T_AR={:.3}s, T_SD={:.3}s, events {}/{})",
            t_ar / reps as f64,
            t_sd / reps as f64,
            events.0,
            events.1
        ),
    )
}

fn is_unimodal(xs: &[f64]) -> bool {
    let peak = xs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    xs[..=peak].windows(2).all(|w| w[0] <= w[1]) && xs[peak..].windows(2).all(|w| w[0] >= w[1])
}

fn gamma_ablation() -> Verdict {
    let (target, draft) = layered_pair(16, 8, 3, 20, 0.15, 5).unwrap();
    let args = BenchArgs {
        target: PathBuf::new(),
        draft: PathBuf::new(),
        gammas: vec![1, 5, 10, 20, 40, 60],
        repetitions: 10,
        t_end: 100.0,
        seed: 6,
        policy: PolicyArg::PositionWise,
        m_hist: 20,
        draws: 0,
        out: PathBuf::new(),
    };
    let (rows, _, _) = bench_rows(&target, &draft, &args).unwrap();
    let col = |name: &str| {
        let i = BENCH_COLUMNS.iter().position(|c| *c == name).unwrap();
        rows.iter().map(|r| r[i].parse::<f64>().unwrap()).collect::<Vec<f64>>()
    };
    let alpha = col("alpha");
    let speedup = col("speedup");
    let alpha_ok = alpha.windows(2).all(|w| w[1] <= w[0]);
    let s_ok = is_unimodal(&speedup);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(",");
    verdict(
        alpha_ok && s_ok && alpha[0] < 1.0,
        format!("gamma 1,5,10,20,40,60: alpha [{}], S [{}]", fmt(&alpha), fmt(&speedup)),
    )
}

fn training_sanity() -> Verdict {
    let process = presets::homogeneous(2.0);
    let t_end = 20.0;
    let data = process.make_synthetic_dataset(100, t_end, &RngStream::new(31, 0)).unwrap();
    let (train_set, rest) = data.split_at(80);
    let (val_set, _) = rest.split_at(10);
    let model_config = ModelConfig::new(8, 4, 1, 1, 1);
    let config = TrainConfig {
        learning_rate: 1e-2,
        batch_size: 16,
        max_epochs: 150,
        patience: 15,
        seed: 3,
        ..TrainConfig::default()
    };
    let untrained = ModelCheckpoint::init(model_config.clone(), &mut RngStream::new(config.seed, 0).substream(1)).unwrap();
    let report = train(train_set, val_set, &model_config, &config).unwrap();
    let model_ll = per_event_loglik(&report.checkpoint, val_set).unwrap();
    let events: usize = val_set.iter().map(EventSequence::len).sum();
    let gt_ll = val_set.iter().map(|s| process.loglik(s).unwrap()).sum::<f64>() / events as f64;
    let d_ks = |ckpt: &ModelCheckpoint| {
        let seqs: Vec<EventSequence> = (0..20)
            .map(|i| ar_sample(ckpt, t_end, &mut RngStream::new(77, i), &[]).unwrap().0)
            .collect();
        ks_statistic(&pooled_time_rescale(&seqs, &process)).unwrap().d_ks
    };
    let (d_trained, d_untrained) = (d_ks(&report.checkpoint), d_ks(&untrained));
    let gap = (model_ll - gt_ll).abs();
    verdict(
        gap < 0.1 && d_trained < d_untrained,
        format!(
            "val loglik {model_ll:.4} vs ground truth {gt_ll:.4} (gap {gap:.4}), best epoch {}; D_KS trained {d_trained:.4} < untrained {d_untrained:.4}",
            report.best_epoch
        ),
    )
}

/// Central-difference gradient of the per-event negative log-likelihood,
/// evaluated independently of the tape.
fn numeric_gradient_check(ckpt: &ModelCheckpoint, seq: &EventSequence) -> (f64, String) {
    let analytic = nll_batch(ckpt, std::slice::from_ref(seq)).unwrap().grads;
    let n = seq.len().max(1) as f64;
    let loss = |c: &ModelCheckpoint| -c.sequence_loglik(seq).unwrap() / n;
    let mut worst = (0.0, String::new());
    for (name, t) in ckpt.tensors() {
        for i in 0..t.len() {
            let theta = t.data()[i];
            let h = 1e-5 * theta.abs().max(1.0);
            let perturbed = |delta: f64| {
                let mut c = ckpt.clone();
                let mut data = t.data().to_vec();
                data[i] += delta;
                c.set_tensor(name, Tensor::new(t.shape().to_vec(), data).unwrap()).unwrap();
                loss(&c)
            };
            let fd = (perturbed(h) - perturbed(-h)) / (2.0 * h);
            let a = analytic[name].data()[i];
            let rel = (a - fd).abs() / fd.abs().max(1e-8);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{i}] analytic {a:.6e} numeric {fd:.6e}"));
            }
        }
    }
    worst
}

fn gradient_correctness() -> Verdict {
    let variants = [
        (EncodingVariant::Thp, AttentionVariant::Standard),
        (EncodingVariant::Sahp, AttentionVariant::Standard),
        (EncodingVariant::Attnhp, AttentionVariant::Attnhp),
        (EncodingVariant::Thp, AttentionVariant::Attnhp),
        (EncodingVariant::Sahp, AttentionVariant::Attnhp),
    ];
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (i, (enc, att)) in variants.into_iter().enumerate() {
        let mut rng = RngStream::new(800 + i as u64, 0);
        let heads = 1 + i % 2;
        let ckpt = ModelCheckpoint::init(ModelConfig::new(4, 2, 2, heads, 2).with_variants(enc, att), &mut rng).unwrap();
        let mut t = 0.0;
        let events: Vec<Event> = (0..5)
            .map(|_| {
                t += 0.2 + rng.uniform01();
                Event::new(t, (rng.uniform01() * 2.0) as usize)
            })
            .collect();
        let seq = EventSequence::new(events, t + 0.7);
        let (rel, at) = numeric_gradient_check(&ckpt, &seq);
        worst = worst.max(rel);
        parts.push(format!("{rel:.1e} at {at}"));
    }
    verdict(worst < 1e-4, format!("max rel error {worst:.2e}; [{}]", parts.join("; ")))
}

fn tppsd(dir: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_tppsd"))
        .current_dir(dir)
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

/// Table contents with the named columns removed.
fn stable_cells(path: &Path, volatile: &[&str]) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    let keep: Vec<bool> = header.iter().map(|h| !volatile.contains(&h.as_str())).collect();
    let mut out = vec![header.iter().zip(&keep).filter(|(_, k)| **k).map(|(h, _)| h.clone()).collect()];
    for rec in r.records() {
        let rec = rec.unwrap();
        out.push(rec.iter().zip(&keep).filter(|(_, k)| **k).map(|(c, _)| c.to_string()).collect());
    }
    out
}

fn replay_determinism() -> Verdict {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    let commands: Vec<(&str, Vec<&str>)> = vec![
        ("process.manifest.json", vec!["init", "process", "--preset", "hawkes", "--out", "process.json"]),
        ("mc.manifest.json", vec!["init", "model-config", "--embed-dim", "4", "--components", "2", "--out", "mc.json"]),
        ("tc.manifest.json", vec!["init", "train-config", "--seed", "2", "--out", "tc.json"]),
        ("m.manifest.json", vec!["init", "model", "--embed-dim", "4", "--components", "2", "--seed", "1", "--out", "m.json"]),
        ("t.manifest.json", vec![
            "init", "layered-pair", "--embed-dim", "8", "--components", "2", "--target-layers", "4",
            "--noise", "0.2", "--target-out", "t.json", "--draft-out", "d.json",
        ]),
        ("data.manifest.json", vec!["simulate", "--process", "process.json", "--n", "20", "--t-end", "5", "--seed", "3", "--out", "data.jsonl"]),
        ("c.manifest.json", vec!["train", "--data", "data.jsonl", "--model-config", "mc.json", "--train-config", "tc.json", "--out", "c.json"]),
        ("ar.manifest.json", vec!["sample", "--mode", "ar", "--target", "t.json", "--t-end", "20", "--runs", "2", "--seed", "4", "--out", "ar.jsonl"]),
        ("sd.manifest.json", vec![
            "sample", "--mode", "sd", "--target", "t.json", "--draft", "d.json", "--gamma", "4",
            "--t-end", "20", "--runs", "2", "--seed", "4", "--out", "sd.jsonl",
        ]),
        ("ks.manifest.json", vec!["eval", "ks", "--data", "data.jsonl", "--process", "process.json", "--out", "ks.csv"]),
        ("ll.manifest.json", vec!["eval", "loglik", "--data", "data.jsonl", "--scorer-a", "process.json", "--scorer-b", "m.json", "--out", "ll.csv"]),
        ("ws.manifest.json", vec![
            "eval", "wasserstein", "--target", "t.json", "--draft", "d.json", "--history", "ar.jsonl",
            "--m-hist", "3", "--repetitions", "20", "--gamma", "3", "--out", "ws.csv",
        ]),
        ("bench.manifest.json", vec![
            "bench", "--target", "t.json", "--draft", "d.json", "--gammas", "1,4", "--repetitions", "2",
            "--t-end", "10", "--m-hist", "3", "--draws", "10", "--out", "bench.csv",
        ]),
    ];
    let mut failures = Vec::new();
    let mut compared = 0;
    let mut masked = 0;
    for (manifest, args) in &commands {
        if !tppsd(p, args) {
            failures.push(format!("{} failed to run", args[..2].join(" ")));
            continue;
        }
        let replay_dir = p.join(format!("replay-{manifest}"));
        let dir_arg = replay_dir.to_str().unwrap();
        if !tppsd(p, &["replay", manifest, "--out-dir", dir_arg]) {
            failures.push(format!("replay of {manifest} reported differences"));
            continue;
        }
        let recorded: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join(manifest)).unwrap()).unwrap();
        for out in recorded["outputs"].as_array().unwrap() {
            let original = PathBuf::from(out["path"].as_str().unwrap());
            let again = replay_dir.join(original.file_name().unwrap());
            let volatile: Vec<&str> = out
                .get("volatile_columns")
                .and_then(|v| v.as_array())
                .map(|v| v.iter().map(|c| c.as_str().unwrap()).collect())
                .unwrap_or_default();
            let same = if volatile.is_empty() {
                fs::read(&original).unwrap() == fs::read(&again).unwrap()
            } else {
                masked += 1;
                stable_cells(&original, &volatile) == stable_cells(&again, &volatile)
            };
            compared += 1;
            if !same {
                failures.push(format!("{} differs", original.display()));
            }
        }
    }
    verdict(
        failures.is_empty(),
        format!(
            "{} commands, {compared} outputs compared ({} byte-for-byte, {masked} with wall-clock columns excluded){}",
            commands.len(),
            compared - masked,
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("thinning fidelity", thinning_fidelity),
        ("residual interval sampler", residual_oracle),
        ("mark-law exactness", mark_law_exactness),
        ("SD matches AR in law", sd_matches_ar),
        ("speedup on layered construction", controlled_speedup),
        ("draft-length ablation shape", gamma_ablation),
        ("training sanity", training_sanity),
        ("gradient correctness", gradient_correctness),
        ("manifest replay determinism", replay_determinism),
    ];
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse::<usize>().ok())
        .collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let number = i + 1;
        if !selected.is_empty() && !selected.contains(&number) {
            continue;
        }
        let start = Instant::now();
        let v = run();
        let status = if v.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!v.pass);
        println!(
            "{status} criterion {number} ({name}, {:.1}s): {}",
            start.elapsed().as_secs_f64(),
            v.detail
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

