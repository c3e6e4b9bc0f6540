use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::Serialize;
use tppsd_core::classical::GroundTruthProcess;
use tppsd_core::eval::{
    ks_statistic, mean_loglik_per_event, next_event_divergence, pooled_time_rescale,
};
use tppsd_core::events::{read_sequences, write_sequences};
use tppsd_core::model::{ModelCheckpoint, ModelConfig};
use tppsd_core::rng::labels;
use tppsd_core::sampler::{ar_sample, tpp_sd_sample, RejectionPolicy, SampleRunStats};
use tppsd_core::train::{per_event_loglik, train, TrainConfig};
use tppsd_core::{EventSequence, RngStream};

use crate::args::*;
use crate::construct::layered_pair;
use crate::error::{CliError, CliResult};
use crate::manifest::{sibling, Artifact, RunManifest, MANIFEST_FORMAT_VERSION};

/// Columns of the sampling statistics table holding wall-clock seconds.
pub const SAMPLE_VOLATILE: [&str; 2] = ["t_ar", "t_sd"];
/// Columns of the ablation table holding wall-clock measurements.
pub const BENCH_VOLATILE: [&str; 3] = ["t_ar", "t_sd", "speedup"];
pub const BENCH_COLUMNS: [&str; 10] = [
    "gamma",
    "alpha",
    "t_ar",
    "t_sd",
    "speedup",
    "delta_loglik",
    "ws_time",
    "emd_mark",
    "drafted",
    "accepted",
];

/// What a command read and wrote.
#[derive(Debug, Default)]
pub struct Outcome {
    pub seed: Option<u64>,
    pub inputs: Vec<(&'static str, PathBuf)>,
    pub outputs: Vec<(&'static str, PathBuf, &'static [&'static str])>,
    pub timings: BTreeMap<String, f64>,
    pub metrics: BTreeMap<String, f64>,
}

impl Outcome {
    fn input(&mut self, role: &'static str, path: &Path) {
        self.inputs.push((role, path.to_path_buf()));
    }

    fn output(&mut self, role: &'static str, path: &Path) {
        self.outputs.push((role, path.to_path_buf(), &[]));
    }

    fn timed_output(&mut self, role: &'static str, path: &Path, volatile: &'static [&'static str]) {
        self.outputs.push((role, path.to_path_buf(), volatile));
    }

    pub fn manifest(&self, command: &Command) -> CliResult<RunManifest> {
        Ok(RunManifest {
            format_version: MANIFEST_FORMAT_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.seed,
            command: command.clone(),
            inputs: self
                .inputs
                .iter()
                .map(|(role, p)| Artifact::hash(role, p, &[]))
                .collect::<CliResult<_>>()?,
            outputs: self
                .outputs
                .iter()
                .map(|(role, p, v)| Artifact::hash(role, p, v))
                .collect::<CliResult<_>>()?,
            timings: self.timings.clone(),
            metrics: self.metrics.clone(),
        })
    }
}

impl Command {
    /// Copy with derived output paths filled in and every path absolute, so
    /// the manifest alone determines the run.
    pub fn resolved(&self) -> CliResult<Command> {
        let mut cmd = self.clone();
        match &mut cmd {
            Command::Train(a) => {
                a.report.get_or_insert_with(|| sibling(&a.out, "epochs.csv"));
            }
            Command::Sample(a) => {
                a.stats.get_or_insert_with(|| sibling(&a.out, "stats.csv"));
            }
            Command::Eval(EvalCommand::Ks(a)) => {
                a.plot.get_or_insert_with(|| sibling(&a.out, "plot.csv"));
            }
            _ => {}
        }
        for p in cmd.output_paths_mut() {
            absolutize(p)?;
        }
        for p in cmd_inputs(&mut cmd) {
            absolutize(p)?;
        }
        Ok(cmd)
    }

    /// Moves every output into `dir`, keeping file names.
    pub fn redirect_outputs(&mut self, dir: &Path) {
        for p in self.output_paths_mut() {
            if let Some(name) = p.file_name() {
                *p = dir.join(name);
            }
        }
    }

    /// The file the manifest is named after.
    pub fn primary_output(&self) -> Option<PathBuf> {
        let mut c = self.clone();
        c.output_paths_mut().first().map(|p| p.to_path_buf())
    }

    fn output_paths_mut(&mut self) -> Vec<&mut PathBuf> {
        match self {
            Command::Simulate(a) => vec![&mut a.out],
            Command::Train(a) => std::iter::once(&mut a.out).chain(a.report.as_mut()).collect(),
            Command::Sample(a) => std::iter::once(&mut a.out).chain(a.stats.as_mut()).collect(),
            Command::Eval(EvalCommand::Ks(a)) => std::iter::once(&mut a.out).chain(a.plot.as_mut()).collect(),
            Command::Eval(EvalCommand::Wasserstein(a)) => vec![&mut a.out],
            Command::Eval(EvalCommand::Loglik(a)) => vec![&mut a.out],
            Command::Bench(a) => vec![&mut a.out],
            Command::Init(InitCommand::Process { out, .. })
            | Command::Init(InitCommand::ModelConfig { out, .. })
            | Command::Init(InitCommand::TrainConfig { out, .. })
            | Command::Init(InitCommand::Model { out, .. }) => vec![out],
            Command::Init(InitCommand::LayeredPair {
                target_out, draft_out, ..
            }) => vec![target_out, draft_out],
            Command::Replay(_) => vec![],
        }
    }
}

fn absolutize(p: &mut PathBuf) -> CliResult<()> {
    *p = std::path::absolute(&*p).map_err(|e| CliError::data(p.display(), e))?;
    Ok(())
}

fn cmd_inputs(cmd: &mut Command) -> Vec<&mut PathBuf> {
    match cmd {
        Command::Simulate(a) => a.source.process.as_mut().into_iter().collect(),
        Command::Train(a) => [Some(&mut a.data), Some(&mut a.model_config), a.train_config.as_mut()]
            .into_iter()
            .flatten()
            .collect(),
        Command::Sample(a) => std::iter::once(&mut a.target).chain(a.draft.as_mut()).collect(),
        Command::Eval(EvalCommand::Ks(a)) => std::iter::once(&mut a.data).chain(a.source.process.as_mut()).collect(),
        Command::Eval(EvalCommand::Wasserstein(a)) => [Some(&mut a.target), a.draft.as_mut(), Some(&mut a.history)]
            .into_iter()
            .flatten()
            .collect(),
        Command::Eval(EvalCommand::Loglik(a)) => vec![&mut a.data, &mut a.scorer_a, &mut a.scorer_b],
        Command::Bench(a) => vec![&mut a.target, &mut a.draft],
        Command::Init(_) => vec![],
        Command::Replay(a) => vec![&mut a.manifest],
    }
}

fn load_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::data(path.display(), e))?;
    serde_json::from_str(&text).map_err(|e| CliError::data(path.display(), e))
}

fn save_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::data(path.display(), e))?;
    fs::write(path, text + "\n").map_err(|e| CliError::data(path.display(), e))
}

fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::data(path.display(), e))?;
    w.write_record(header).map_err(|e| CliError::data(path.display(), e))?;
    for row in rows {
        w.write_record(row).map_err(|e| CliError::data(path.display(), e))?;
    }
    w.flush().map_err(|e| CliError::data(path.display(), e))
}

fn cell(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

fn load_process(source: &ProcessSource, outcome: &mut Outcome) -> CliResult<GroundTruthProcess> {
    match (&source.process, source.preset) {
        (Some(path), _) => {
            outcome.input("process", path);
            load_json(path)
        }
        (None, Some(p)) => Ok(p.process()),
        (None, None) => Err(CliError::Usage("either --process or --preset is required".into())),
    }
}

fn load_checkpoint(role: &'static str, path: &Path, outcome: &mut Outcome) -> CliResult<ModelCheckpoint> {
    outcome.input(role, path);
    Ok(ModelCheckpoint::load(path)?)
}

fn load_sequences(role: &'static str, path: &Path, outcome: &mut Outcome) -> CliResult<Vec<EventSequence>> {
    outcome.input(role, path);
    Ok(read_sequences(path)?)
}

/// Runs one command. Paths are used as given; see [`Command::resolved`].
pub fn execute(cmd: &Command) -> CliResult<Outcome> {
    let mut outcome = Outcome::default();
    match cmd {
        Command::Simulate(a) => simulate(a, &mut outcome)?,
        Command::Train(a) => train_cmd(a, &mut outcome)?,
        Command::Sample(a) => sample(a, &mut outcome)?,
        Command::Eval(EvalCommand::Ks(a)) => eval_ks(a, &mut outcome)?,
        Command::Eval(EvalCommand::Wasserstein(a)) => eval_wasserstein(a, &mut outcome)?,
        Command::Eval(EvalCommand::Loglik(a)) => eval_loglik(a, &mut outcome)?,
        Command::Bench(a) => bench(a, &mut outcome)?,
        Command::Init(c) => init(c, &mut outcome)?,
        Command::Replay(_) => return Err(CliError::Usage("replay cannot be nested".into())),
    }
    Ok(outcome)
}

fn simulate(a: &SimulateArgs, outcome: &mut Outcome) -> CliResult<()> {
    let process = load_process(&a.source, outcome)?;
    let start = Instant::now();
    let seqs = process.make_synthetic_dataset(a.n, a.t_end, &RngStream::new(a.seed, 0))?;
    outcome.timings.insert("simulate".into(), start.elapsed().as_secs_f64());
    write_sequences(&a.out, &seqs)?;
    let events: usize = seqs.iter().map(EventSequence::len).sum();
    outcome.metrics.insert("sequences".into(), seqs.len() as f64);
    outcome.metrics.insert("events".into(), events as f64);
    outcome.seed = Some(a.seed);
    outcome.output("sequences", &a.out);
    println!("wrote {} sequences ({events} events) to {}", seqs.len(), a.out.display());
    Ok(())
}

/// Sizes of the in-order 80/10/10 split.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 8 / 10;
    let val = n / 10;
    (train, val, n - train - val)
}

fn train_cmd(a: &TrainArgs, outcome: &mut Outcome) -> CliResult<()> {
    let seqs = load_sequences("data", &a.data, outcome)?;
    let (n_train, n_val, _) = split_sizes(seqs.len());
    if n_train == 0 || n_val == 0 {
        return Err(CliError::Data(format!(
            "{}: {} sequences cannot be split 80/10/10",
            a.data.display(),
            seqs.len()
        )));
    }
    outcome.input("model_config", &a.model_config);
    let model_config: ModelConfig = load_json(&a.model_config)?;
    let mut config: TrainConfig = match &a.train_config {
        Some(p) => {
            outcome.input("train_config", p);
            load_json(p)?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    let (train_set, rest) = seqs.split_at(n_train);
    let (val_set, test_set) = rest.split_at(n_val);
    let start = Instant::now();
    let report = train(train_set, val_set, &model_config, &config)?;
    outcome.timings.insert("train".into(), start.elapsed().as_secs_f64());
    report.checkpoint.save(&a.out)?;
    let report_path = a.report.clone().unwrap_or_else(|| sibling(&a.out, "epochs.csv"));
    let rows: Vec<Vec<String>> = report
        .epochs
        .iter()
        .map(|e| vec![e.epoch.to_string(), e.train_loglik.to_string(), e.val_loglik.to_string()])
        .collect();
    write_table(&report_path, &["epoch", "train_loglik", "val_loglik"], &rows)?;
    outcome.seed = Some(config.seed);
    outcome.metrics.insert("best_epoch".into(), report.best_epoch as f64);
    outcome.metrics.insert("best_val_loglik".into(), report.best_val_loglik);
    if !test_set.is_empty() {
        let test = per_event_loglik(&report.checkpoint, test_set)?;
        outcome.metrics.insert("test_loglik".into(), test);
    }
    outcome.output("checkpoint", &a.out);
    outcome.output("epochs", &report_path);
    println!(
        "split {}/{}/{}; best epoch {} with validation log-likelihood {:.5} per event",
        train_set.len(),
        val_set.len(),
        test_set.len(),
        report.best_epoch,
        report.best_val_loglik
    );
    Ok(())
}

fn sample(a: &SampleArgs, outcome: &mut Outcome) -> CliResult<()> {
    if a.mode == SampleMode::Sd && a.draft.is_none() {
        return Err(CliError::Usage("--mode sd requires --draft".into()));
    }
    if a.runs == 0 {
        return Err(CliError::Usage("--runs must be at least 1".into()));
    }
    let target = load_checkpoint("target", &a.target, outcome)?;
    let draft = match (&a.draft, a.mode) {
        (Some(p), SampleMode::Sd) => Some(load_checkpoint("draft", p, outcome)?),
        _ => None,
    };
    let policy: RejectionPolicy = a.policy.into();
    let mut seqs = Vec::with_capacity(a.runs);
    let mut rows = Vec::with_capacity(a.runs);
    let mut total = SampleRunStats::default();
    let mut wall = 0.0;
    for run in 0..a.runs {
        let root = RngStream::new(a.seed, run as u64);
        let (seq, stats) = match &draft {
            None => ar_sample(&target, a.t_end, &mut root.substream(labels::TARGET), &[])?,
            Some(d) => tpp_sd_sample(&target, d, a.t_end, a.gamma, &root, &[], policy)?,
        };
        wall += stats.wall_seconds;
        total.drafted += stats.drafted;
        total.accepted += stats.accepted;
        let mut row = vec![run.to_string(), seq.len().to_string(), stats.target_forwards.to_string()];
        if draft.is_some() {
            row.extend([
                a.gamma.to_string(),
                stats.drafted.to_string(),
                stats.accepted.to_string(),
                cell(stats.acceptance_rate()),
                stats.draft_forwards.to_string(),
                stats.residual_fallbacks.to_string(),
                stats.wall_seconds.to_string(),
            ]);
        } else {
            row.push(stats.wall_seconds.to_string());
        }
        rows.push(row);
        seqs.push(seq);
    }
    let header: &[&str] = if draft.is_some() {
        &[
            "run",
            "events",
            "target_forwards",
            "gamma",
            "drafted",
            "accepted",
            "alpha",
            "draft_forwards",
            "residual_fallbacks",
            "t_sd",
        ]
    } else {
        &["run", "events", "target_forwards", "t_ar"]
    };
    write_sequences(&a.out, &seqs)?;
    let stats_path = a.stats.clone().unwrap_or_else(|| sibling(&a.out, "stats.csv"));
    write_table(&stats_path, header, &rows)?;
    let key = if draft.is_some() { "t_sd" } else { "t_ar" };
    outcome.timings.insert(key.into(), wall / a.runs as f64);
    if let Some(alpha) = total.acceptance_rate() {
        outcome.metrics.insert("alpha".into(), alpha);
    }
    outcome.seed = Some(a.seed);
    outcome.output("sequences", &a.out);
    outcome.timed_output("stats", &stats_path, &SAMPLE_VOLATILE);
    println!("wrote {} sequences to {}", seqs.len(), a.out.display());
    Ok(())
}

fn eval_ks(a: &KsArgs, outcome: &mut Outcome) -> CliResult<()> {
    let seqs = load_sequences("data", &a.data, outcome)?;
    let process = load_process(&a.source, outcome)?;
    for s in &seqs {
        process.validate(s.t_end)?;
        s.validate(process.num_types()).map_err(tppsd_core::Error::from)?;
    }
    let z = pooled_time_rescale(&seqs, &process);
    let report = ks_statistic(&z)?;
    write_table(
        &a.out,
        &["d_ks", "n", "band", "pass"],
        &[vec![
            report.d_ks.to_string(),
            report.n.to_string(),
            report.band.to_string(),
            report.pass.to_string(),
        ]],
    )?;
    let plot_path = a.plot.clone().unwrap_or_else(|| sibling(&a.out, "plot.csv"));
    let rows: Vec<Vec<String>> = report
        .plot
        .iter()
        .map(|(f, fe)| vec![f.to_string(), fe.to_string()])
        .collect();
    write_table(&plot_path, &["model_cdf", "empirical_cdf"], &rows)?;
    outcome.metrics.insert("d_ks".into(), report.d_ks);
    outcome.metrics.insert("band".into(), report.band);
    outcome.output("ks", &a.out);
    outcome.output("plot", &plot_path);
    println!(
        "D_KS = {:.5} over {} intervals, band {:.5}: {}",
        report.d_ks,
        report.n,
        report.band,
        if report.pass { "pass" } else { "reject" }
    );
    Ok(())
}

fn eval_wasserstein(a: &WassersteinArgs, outcome: &mut Outcome) -> CliResult<()> {
    let target = load_checkpoint("target", &a.target, outcome)?;
    let draft = match &a.draft {
        Some(p) => Some(load_checkpoint("draft", p, outcome)?),
        None => None,
    };
    let seqs = load_sequences("history", &a.history, outcome)?;
    let mut rows = Vec::new();
    let (mut ws_sum, mut emd_sum) = (0.0, 0.0);
    for (i, s) in seqs.iter().enumerate() {
        if s.len() < a.m_hist {
            log::warn!("sequence {i} has {} events, fewer than {}; skipped", s.len(), a.m_hist);
            continue;
        }
        let d = next_event_divergence(
            &target,
            draft.as_ref(),
            &s.events,
            a.m_hist,
            a.repetitions,
            a.gamma,
            &RngStream::new(a.seed, i as u64),
        )?;
        ws_sum += d.time_distance;
        emd_sum += d.mark_distance;
        rows.push(vec![i.to_string(), d.time_distance.to_string(), d.mark_distance.to_string()]);
    }
    if rows.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no sequence has at least {} events",
            a.history.display(),
            a.m_hist
        )));
    }
    write_table(&a.out, &["sequence", "ws_time", "emd_mark"], &rows)?;
    let n = rows.len() as f64;
    outcome.metrics.insert("ws_time".into(), ws_sum / n);
    outcome.metrics.insert("emd_mark".into(), emd_sum / n);
    outcome.seed = Some(a.seed);
    outcome.output("distances", &a.out);
    println!("mean D_WS^t = {:.5}, mean D_WS^k = {:.5} over {} histories", ws_sum / n, emd_sum / n, rows.len());
    Ok(())
}

enum Scorer {
    Model(ModelCheckpoint),
    Process(GroundTruthProcess),
}

impl Scorer {
    fn load(role: &'static str, path: &Path, outcome: &mut Outcome) -> CliResult<Self> {
        outcome.input(role, path);
        let text = fs::read_to_string(path).map_err(|e| CliError::data(path.display(), e))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::data(path.display(), e))?;
        if value.get("format_version").is_some() {
            Ok(Scorer::Model(ModelCheckpoint::from_json(&text)?))
        } else {
            serde_json::from_value(value)
                .map(Scorer::Process)
                .map_err(|e| CliError::data(path.display(), e))
        }
    }

    fn score(&self, seq: &EventSequence) -> tppsd_core::Result<f64> {
        match self {
            Scorer::Model(m) => m.sequence_loglik(seq),
            Scorer::Process(p) => p.loglik(seq),
        }
    }
}

fn eval_loglik(a: &LoglikArgs, outcome: &mut Outcome) -> CliResult<()> {
    let seqs = load_sequences("data", &a.data, outcome)?;
    let sa = Scorer::load("scorer_a", &a.scorer_a, outcome)?;
    let sb = Scorer::load("scorer_b", &a.scorer_b, outcome)?;
    let la = mean_loglik_per_event(&seqs, |s| sa.score(s))?;
    let lb = mean_loglik_per_event(&seqs, |s| sb.score(s))?;
    let delta = (la - lb).abs();
    let events: usize = seqs.iter().map(EventSequence::len).sum();
    write_table(
        &a.out,
        &["events", "loglik_a", "loglik_b", "delta_loglik"],
        &[vec![events.to_string(), la.to_string(), lb.to_string(), delta.to_string()]],
    )?;
    outcome.metrics.insert("delta_loglik".into(), delta);
    outcome.output("loglik", &a.out);
    println!("L_A = {la:.6}, L_B = {lb:.6}, delta = {delta:.6} per event");
    Ok(())
}

fn per_event(target: &ModelCheckpoint, seqs: &[EventSequence]) -> CliResult<Option<f64>> {
    if seqs.iter().all(EventSequence::is_empty) {
        return Ok(None);
    }
    Ok(Some(mean_loglik_per_event(seqs, |s| target.sequence_loglik(s))?))
}

/// Runs the sweep and returns the ablation rows in [`BENCH_COLUMNS`] order.
pub fn bench_rows(
    target: &ModelCheckpoint,
    draft: &ModelCheckpoint,
    a: &BenchArgs,
) -> CliResult<(Vec<Vec<String>>, f64, Vec<f64>)> {
    if a.gammas.is_empty() || a.gammas.contains(&0) {
        return Err(CliError::Usage("--gammas must be a nonempty list of positive integers".into()));
    }
    if a.repetitions == 0 {
        return Err(CliError::Usage("--repetitions must be at least 1".into()));
    }
    let policy: RejectionPolicy = a.policy.into();
    let reps = a.repetitions as f64;
    let mut ar_seqs = Vec::with_capacity(a.repetitions);
    let mut t_ar = 0.0;
    for r in 0..a.repetitions {
        let mut rng = RngStream::new(a.seed, r as u64).substream(labels::TARGET);
        let (seq, stats) = ar_sample(target, a.t_end, &mut rng, &[])?;
        t_ar += stats.wall_seconds / reps;
        ar_seqs.push(seq);
    }
    let l_ar = per_event(target, &ar_seqs)?;
    let history = &ar_seqs[0].events;
    let m_hist = a.m_hist.min(history.len());
    let mut rows = Vec::with_capacity(a.gammas.len());
    let mut t_sds = Vec::with_capacity(a.gammas.len());
    for &gamma in &a.gammas {
        let mut sd_seqs = Vec::with_capacity(a.repetitions);
        let mut total = SampleRunStats::default();
        let mut t_sd = 0.0;
        for r in 0..a.repetitions {
            let root = RngStream::new(a.seed, r as u64);
            let (seq, stats) = tpp_sd_sample(target, draft, a.t_end, gamma, &root, &[], policy)?;
            t_sd += stats.wall_seconds / reps;
            total.drafted += stats.drafted;
            total.accepted += stats.accepted;
            sd_seqs.push(seq);
        }
        let l_sd = per_event(target, &sd_seqs)?;
        let delta = l_ar.zip(l_sd).map(|(x, y)| (x - y).abs());
        let distance = if a.draws > 0 {
            let root = RngStream::new(a.seed, u64::MAX - gamma as u64);
            Some(next_event_divergence(target, Some(draft), history, m_hist, a.draws, gamma, &root)?)
        } else {
            None
        };
        let speedup = (t_sd > 0.0).then(|| t_ar / t_sd);
        rows.push(vec![
            gamma.to_string(),
            cell(total.acceptance_rate()),
            t_ar.to_string(),
            t_sd.to_string(),
            cell(speedup),
            cell(delta),
            cell(distance.map(|d| d.time_distance)),
            cell(distance.map(|d| d.mark_distance)),
            total.drafted.to_string(),
            total.accepted.to_string(),
        ]);
        t_sds.push(t_sd);
    }
    Ok((rows, t_ar, t_sds))
}

fn bench(a: &BenchArgs, outcome: &mut Outcome) -> CliResult<()> {
    let target = load_checkpoint("target", &a.target, outcome)?;
    let draft = load_checkpoint("draft", &a.draft, outcome)?;
    let (rows, t_ar, t_sds) = bench_rows(&target, &draft, a)?;
    write_table(&a.out, &BENCH_COLUMNS, &rows)?;
    outcome.timings.insert("t_ar".into(), t_ar);
    for (gamma, t) in a.gammas.iter().zip(&t_sds) {
        outcome.timings.insert(format!("t_sd.gamma{gamma}"), *t);
    }
    outcome.seed = Some(a.seed);
    outcome.timed_output("ablation", &a.out, &BENCH_VOLATILE);
    println!("wrote {} ablation rows to {}", rows.len(), a.out.display());
    Ok(())
}

fn init(c: &InitCommand, outcome: &mut Outcome) -> CliResult<()> {
    match c {
        InitCommand::Process { preset, out } => {
            save_json(out, &preset.process())?;
            outcome.output("process", out);
        }
        InitCommand::ModelConfig { shape, out } => {
            let config = model_config(shape);
            config.validate()?;
            save_json(out, &config)?;
            outcome.output("model_config", out);
        }
        InitCommand::TrainConfig { seed, out } => {
            let config = TrainConfig {
                seed: *seed,
                ..TrainConfig::default()
            };
            save_json(out, &config)?;
            outcome.seed = Some(*seed);
            outcome.output("train_config", out);
        }
        InitCommand::Model { shape, seed, out } => {
            let ckpt = ModelCheckpoint::init(model_config(shape), &mut RngStream::new(*seed, 0))?;
            ckpt.save(out)?;
            outcome.seed = Some(*seed);
            outcome.output("checkpoint", out);
        }
        InitCommand::LayeredPair {
            embed_dim,
            components,
            marks,
            target_layers,
            noise,
            seed,
            target_out,
            draft_out,
        } => {
            if !(*noise >= 0.0 && noise.is_finite()) {
                return Err(CliError::Usage("--noise must be a finite non-negative number".into()));
            }
            let (target, draft) = layered_pair(*embed_dim, *components, *marks, *target_layers, *noise, *seed)?;
            target.save(target_out)?;
            draft.save(draft_out)?;
            outcome.seed = Some(*seed);
            outcome.output("target", target_out);
            outcome.output("draft", draft_out);
        }
    }
    Ok(())
}

fn model_config(shape: &ModelShape) -> ModelConfig {
    ModelConfig::new(shape.embed_dim, shape.components, shape.marks, shape.heads, shape.layers)
        .with_variants(shape.encoding.into(), shape.attention.into())
}

/// Resolves, executes and records a command; returns the manifest path.
pub fn run_recorded(cmd: &Command, manifest: Option<&Path>) -> CliResult<PathBuf> {
    let cmd = cmd.resolved()?;
    let outcome = execute(&cmd)?;
    let path = match manifest {
        Some(p) => p.to_path_buf(),
        None => sibling(
            &cmd.primary_output().expect("recorded commands have outputs"),
            "manifest.json",
        ),
    };
    outcome.manifest(&cmd)?.save(&path)?;
    log::info!("manifest written to {}", path.display());
    Ok(path)
}

/// Per-output comparison of a replay with the recorded run.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayCheck {
    pub role: String,
    pub path: PathBuf,
    pub identical: bool,
}

pub fn replay(a: &ReplayArgs) -> CliResult<Vec<ReplayCheck>> {
    let manifest = RunManifest::load(&a.manifest)?;
    for input in &manifest.inputs {
        let now = crate::manifest::canonical_sha256(&input.path, &input.volatile_columns)?;
        if now != input.sha256 {
            return Err(CliError::Data(format!(
                "input {} ({}) changed since the recorded run",
                input.role,
                input.path.display()
            )));
        }
    }
    let mut cmd = manifest.command.clone();
    if let Some(dir) = &a.out_dir {
        fs::create_dir_all(dir).map_err(|e| CliError::data(dir.display(), e))?;
        cmd.redirect_outputs(&std::path::absolute(dir).map_err(|e| CliError::data(dir.display(), e))?);
    }
    let outcome = execute(&cmd)?;
    if outcome.outputs.len() != manifest.outputs.len() {
        return Err(CliError::Data("replay produced a different set of outputs".into()));
    }
    manifest
        .outputs
        .iter()
        .zip(&outcome.outputs)
        .map(|(recorded, (_, path, _))| {
            let now = crate::manifest::canonical_sha256(path, &recorded.volatile_columns)?;
            Ok(ReplayCheck {
                role: recorded.role.clone(),
                path: path.clone(),
                identical: now == recorded.sha256,
            })
        })
        .collect()
}
