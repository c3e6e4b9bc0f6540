use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use tppsd_core::classical::{presets, GroundTruthProcess};
use tppsd_core::model::{AttentionVariant, EncodingVariant};
use tppsd_core::sampler::RejectionPolicy;

#[derive(Debug, Parser)]
#[command(name = "tppsd", version, about = "Speculative sampling for Transformer temporal point processes")]
pub struct Cli {
    /// Where to write the run manifest. Defaults to `<main output>.manifest.json`.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Simulate sequences from a classical process by thinning.
    Simulate(SimulateArgs),
    /// Fit a model by maximum likelihood on an 80/10/10 split.
    Train(TrainArgs),
    /// Draw sequences autoregressively or speculatively.
    Sample(SampleArgs),
    /// Goodness-of-fit and distance metrics.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Sweep draft lengths and tabulate acceptance and speedup.
    Bench(BenchArgs),
    /// Write parameter, configuration and checkpoint files.
    #[command(subcommand)]
    Init(InitCommand),
    /// Re-run a command from its manifest and compare outputs.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Poisson,
    Hawkes,
    MultiHawkes,
}

impl Preset {
    pub fn process(self) -> GroundTruthProcess {
        match self {
            Preset::Poisson => presets::poisson(),
            Preset::Hawkes => presets::hawkes(),
            Preset::MultiHawkes => presets::multi_hawkes(),
        }
    }
}

/// A process given either by parameter file or by preset name.
#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[group(required = true, multiple = false)]
pub struct ProcessSource {
    /// Process parameter file (see `init process`).
    #[arg(long)]
    pub process: Option<PathBuf>,
    /// Built-in process.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub source: ProcessSource,
    /// Number of sequences.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 100.0)]
    pub t_end: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Sequence file, split in order into 80% train, 10% validation, 10% test.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model_config: PathBuf,
    /// Optimiser settings; defaults are used when omitted.
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    /// Overrides the seed of the training configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch log-likelihood table. Defaults to `<out stem>.epochs.csv`.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMode {
    Ar,
    Sd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyArg {
    PositionWise,
    Alg1Literal,
}

impl From<PolicyArg> for RejectionPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::PositionWise => RejectionPolicy::PositionWise,
            PolicyArg::Alg1Literal => RejectionPolicy::Alg1Literal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SampleArgs {
    #[arg(long, value_enum)]
    pub mode: SampleMode,
    #[arg(long)]
    pub target: PathBuf,
    /// Draft checkpoint, required with `--mode sd`.
    #[arg(long)]
    pub draft: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub gamma: usize,
    #[arg(long, default_value_t = 100.0)]
    pub t_end: f64,
    /// Number of independent sequences.
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = PolicyArg::PositionWise)]
    pub policy: PolicyArg,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-run statistics. Defaults to `<out stem>.stats.csv`.
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalCommand {
    /// Time-rescaling KS test of sequences against a classical process.
    Ks(KsArgs),
    /// Next-event Wasserstein (times) and EMD (marks) distances.
    Wasserstein(WassersteinArgs),
    /// Per-event log-likelihood discrepancy between two scorers.
    Loglik(LoglikArgs),
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct KsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub source: ProcessSource,
    #[arg(long)]
    pub out: PathBuf,
    /// `(F(z), F_n(z))` pairs. Defaults to `<out stem>.plot.csv`.
    #[arg(long)]
    pub plot: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct WassersteinArgs {
    #[arg(long)]
    pub target: PathBuf,
    /// Draft checkpoint; without it a second target run is the comparison.
    #[arg(long)]
    pub draft: Option<PathBuf>,
    /// Sequences providing the conditioning histories.
    #[arg(long)]
    pub history: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub m_hist: usize,
    #[arg(long, default_value_t = 100)]
    pub repetitions: usize,
    #[arg(long, default_value_t = 10)]
    pub gamma: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct LoglikArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint or process parameter file.
    #[arg(long)]
    pub scorer_a: PathBuf,
    /// Checkpoint or process parameter file.
    #[arg(long)]
    pub scorer_b: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct BenchArgs {
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub draft: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 5, 10, 20, 40, 60])]
    pub gammas: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub repetitions: usize,
    #[arg(long, default_value_t = 100.0)]
    pub t_end: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = PolicyArg::PositionWise)]
    pub policy: PolicyArg,
    /// History length for the next-event distances.
    #[arg(long, default_value_t = 100)]
    pub m_hist: usize,
    /// Draws per side for the next-event distances.
    #[arg(long, default_value_t = 100)]
    pub draws: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncodingArg {
    Thp,
    Sahp,
    Attnhp,
}

impl From<EncodingArg> for EncodingVariant {
    fn from(e: EncodingArg) -> Self {
        match e {
            EncodingArg::Thp => EncodingVariant::Thp,
            EncodingArg::Sahp => EncodingVariant::Sahp,
            EncodingArg::Attnhp => EncodingVariant::Attnhp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionArg {
    Standard,
    Attnhp,
}

impl From<AttentionArg> for AttentionVariant {
    fn from(a: AttentionArg) -> Self {
        match a {
            AttentionArg::Standard => AttentionVariant::Standard,
            AttentionArg::Attnhp => AttentionVariant::Attnhp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ModelShape {
    #[arg(long, default_value_t = 16)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 8)]
    pub components: usize,
    #[arg(long, default_value_t = 1)]
    pub marks: usize,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
    #[arg(long, value_enum, default_value_t = EncodingArg::Thp)]
    pub encoding: EncodingArg,
    #[arg(long, value_enum, default_value_t = AttentionArg::Standard)]
    pub attention: AttentionArg,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitCommand {
    /// Write the parameters of a built-in process.
    Process {
        #[arg(long, value_enum)]
        preset: Preset,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a model configuration file.
    ModelConfig {
        #[command(flatten)]
        shape: ModelShape,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a training configuration file with default settings.
    TrainConfig {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a randomly initialised checkpoint.
    Model {
        #[command(flatten)]
        shape: ModelShape,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a deep target and a one-layer draft that share embedding and heads
    /// and whose attention blocks contribute nothing.
    LayeredPair {
        #[arg(long, default_value_t = 16)]
        embed_dim: usize,
        #[arg(long, default_value_t = 8)]
        components: usize,
        #[arg(long, default_value_t = 1)]
        marks: usize,
        #[arg(long, default_value_t = 20)]
        target_layers: usize,
        /// Standard deviation of Gaussian noise added to the draft head biases.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        target_out: PathBuf,
        #[arg(long)]
        draft_out: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// Manifest written by an earlier run.
    pub manifest: PathBuf,
    /// Write outputs here (same file names) instead of over the originals.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}
