//! CDF-based Transformer TPP.
//!
//! Events are embedded as `onehot(k)·W + z(t)`, passed through causal
//! attention blocks, and every history row `h(t_i)` is decoded into a
//! log-normal mixture over the next inter-event interval and a categorical
//! distribution over the next mark. A learned begin-of-sequence vector plays
//! the role of `h(t_0)`, so the first event also has a distribution.
//!
//! Weights are stored in `out × in` layout (`y = W x + b`). The same tape-based
//! forward pass serves inference (all leaves constant) and training.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::events::{Event, EventSequence, ValidationError};
use crate::numeric::{log_normal_cdf, log_sum_exp, normal_cdf, LN_SQRT_2PI};
use crate::rng::RngStream;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Bounds applied to mixture scales after the exponential.
pub const SIGMA_MIN: f64 = 1e-4;
pub const SIGMA_MAX: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodingVariant {
    Thp,
    Sahp,
    Attnhp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionVariant {
    Standard,
    Attnhp,
}

fn default_attnhp_m() -> f64 {
    1.0
}

fn default_attnhp_scale() -> f64 {
    2000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub num_components: usize,
    pub num_marks: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub encoding: EncodingVariant,
    pub attention: AttentionVariant,
    #[serde(default = "default_attnhp_m")]
    pub attnhp_m: f64,
    #[serde(default = "default_attnhp_scale")]
    pub attnhp_scale: f64,
    /// Adds a tanh feed-forward sublayer after each attention block.
    #[serde(default)]
    pub feed_forward: bool,
}

impl ModelConfig {
    pub fn new(
        embed_dim: usize,
        num_components: usize,
        num_marks: usize,
        num_heads: usize,
        num_layers: usize,
    ) -> Self {
        Self {
            embed_dim,
            num_components,
            num_marks,
            num_heads,
            num_layers,
            encoding: EncodingVariant::Thp,
            attention: AttentionVariant::Standard,
            attnhp_m: default_attnhp_m(),
            attnhp_scale: default_attnhp_scale(),
            feed_forward: false,
        }
    }

    pub fn with_variants(mut self, encoding: EncodingVariant, attention: AttentionVariant) -> Self {
        self.encoding = encoding;
        self.attention = attention;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.embed_dim;
        if d < 2 || !d.is_multiple_of(2) {
            return Err(Error::Config(format!("embed_dim must be even and >= 2, got {d}")));
        }
        if self.num_heads == 0 || !d.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "num_heads {} must divide embed_dim {d}",
                self.num_heads
            )));
        }
        if self.num_components == 0 || self.num_marks == 0 || self.num_layers == 0 {
            return Err(Error::Config(
                "num_components, num_marks and num_layers must be >= 1".into(),
            ));
        }
        if !(self.attnhp_m > 0.0 && self.attnhp_scale > 0.0) {
            return Err(Error::Config("attnhp_m and attnhp_scale must be positive".into()));
        }
        Ok(())
    }

    fn attention_input_dim(&self) -> usize {
        match self.attention {
            AttentionVariant::Standard => self.embed_dim,
            AttentionVariant::Attnhp => 2 * self.embed_dim + 1,
        }
    }

    /// Every named parameter with its shape, in a fixed order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, m, k) = (self.embed_dim, self.num_components, self.num_marks);
        let mut out = vec![
            ("mark_embedding".to_string(), vec![k, d]),
            ("bos".to_string(), vec![d]),
        ];
        if self.encoding == EncodingVariant::Sahp {
            out.push(("sahp_freq".into(), vec![d]));
        }
        let din = self.attention_input_dim();
        for l in 0..self.num_layers {
            for p in ["wq", "wk", "wv"] {
                out.push((format!("layer{l}.{p}"), vec![d, din]));
            }
            if self.feed_forward {
                out.push((format!("layer{l}.ff1"), vec![d, d]));
                out.push((format!("layer{l}.ff1_bias"), vec![d]));
                out.push((format!("layer{l}.ff2"), vec![d, d]));
                out.push((format!("layer{l}.ff2_bias"), vec![d]));
            }
        }
        out.push(("decoder.e".into(), vec![3 * d, d]));
        for p in ["w", "mu", "sigma"] {
            out.push((format!("head.{p}"), vec![m, d]));
            out.push((format!("head.{p}_bias"), vec![m]));
        }
        out.push(("mark.hidden".into(), vec![d, d]));
        out.push(("mark.hidden_bias".into(), vec![d]));
        out.push(("mark.out".into(), vec![k, d]));
        out.push(("mark.out_bias".into(), vec![k]));
        out
    }
}

/// Log-normal mixture over a positive interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl MixtureParams {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, scales: Vec<f64>) -> Result<Self> {
        let p = Self {
            weights,
            means,
            scales,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.weights.len();
        if m == 0 || self.means.len() != m || self.scales.len() != m {
            return Err(Error::InvalidArgument("mixture component counts differ".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::InvalidArgument(format!("mixture weights sum to {total}")));
        }
        if self.scales.iter().any(|&s| !(s > 0.0 && s.is_finite()))
            || self.means.iter().any(|m| !m.is_finite())
        {
            return Err(Error::InvalidArgument("mixture scales must be positive and finite".into()));
        }
        Ok(())
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn logpdf(&self, tau: f64) -> Result<f64> {
        if !(tau > 0.0) {
            return Err(Error::InvalidArgument(format!("interval must be positive, got {tau}")));
        }
        let ln_tau = tau.ln();
        let comps: Vec<f64> = (0..self.weights.len())
            .map(|i| {
                let z = (ln_tau - self.means[i]) / self.scales[i];
                self.weights[i].ln() - self.scales[i].ln() - ln_tau - LN_SQRT_2PI - 0.5 * z * z
            })
            .collect();
        Ok(log_sum_exp(&comps))
    }

    pub fn pdf(&self, tau: f64) -> f64 {
        self.logpdf(tau).map_or(0.0, f64::exp)
    }

    pub fn cdf(&self, tau: f64) -> f64 {
        if tau <= 0.0 {
            return 0.0;
        }
        let ln_tau = tau.ln();
        (0..self.weights.len())
            .map(|i| self.weights[i] * normal_cdf((ln_tau - self.means[i]) / self.scales[i]))
            .sum()
    }

    /// `ln(1 − G(τ))`.
    pub fn log_survival(&self, tau: f64) -> f64 {
        if tau <= 0.0 {
            return 0.0;
        }
        let ln_tau = tau.ln();
        let terms: Vec<f64> = (0..self.weights.len())
            .map(|i| {
                self.weights[i].ln() + log_normal_cdf(-(ln_tau - self.means[i]) / self.scales[i])
            })
            .collect();
        log_sum_exp(&terms)
    }

    /// Draws an interval and returns it with the log-density of the whole
    /// mixture at that point.
    pub fn sample(&self, rng: &mut RngStream) -> (f64, f64) {
        let c = rng.categorical(&self.weights);
        let eps = rng.standard_normal();
        let tau = (self.means[c] + self.scales[c] * eps)
            .exp()
            .clamp(f64::MIN_POSITIVE, f64::MAX);
        let lp = self.logpdf(tau).unwrap_or(f64::NEG_INFINITY);
        (tau, lp)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkDistribution {
    pub probs: Vec<f64>,
}

impl MarkDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let total: f64 = probs.iter().sum();
        if probs.is_empty() || (total - 1.0).abs() > 1e-9 || probs.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "mark probabilities must form a simplex, sum is {total}"
            )));
        }
        Ok(Self { probs })
    }

    pub fn num_marks(&self) -> usize {
        self.probs.len()
    }

    pub fn prob(&self, k: usize) -> f64 {
        self.probs.get(k).copied().unwrap_or(0.0)
    }

    pub fn sample(&self, rng: &mut RngStream) -> usize {
        rng.categorical(&self.probs)
    }
}

/// Interval and mark distributions of the next event given one context.
#[derive(Debug, Clone, PartialEq)]
pub struct NextEventDistribution {
    pub interval: MixtureParams,
    pub mark: MarkDistribution,
}

/// Temporal encoding `z(t)`. `sahp_freq` supplies the learned per-dimension
/// frequencies and is only read for the SAHP variant.
pub fn temporal_encoding(t: f64, config: &ModelConfig, sahp_freq: Option<&[f64]>) -> Vec<f64> {
    let d = config.embed_dim;
    (0..d)
        .map(|j| {
            let e = (j - j % 2) as f64 / d as f64;
            match config.encoding {
                EncodingVariant::Thp => {
                    let arg = t / 10000f64.powf(e);
                    if j % 2 == 0 {
                        arg.sin()
                    } else {
                        arg.cos()
                    }
                }
                EncodingVariant::Sahp => {
                    let w = sahp_freq.map_or(1.0, |f| f[j]);
                    let arg = j as f64 / 10000f64.powf(e) + w * t;
                    if j % 2 == 0 {
                        arg.sin()
                    } else {
                        arg.cos()
                    }
                }
                EncodingVariant::Attnhp => {
                    let m = config.attnhp_m;
                    (t / m * (5.0 * config.attnhp_scale / m).powf(e)).sin()
                }
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    tensors: BTreeMap<String, Arc<Tensor>>,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

impl ModelCheckpoint {
    /// All parameters zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .parameter_shapes()
            .into_iter()
            .map(|(name, shape)| (name, Arc::new(Tensor::zeros(shape))))
            .collect();
        Ok(Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config,
            tensors,
        })
    }

    /// Matrices and the begin-of-sequence vector uniform in `±1/√D`, biases
    /// zero, SAHP frequencies one.
    pub fn init(config: ModelConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let bound = 1.0 / (config.embed_dim as f64).sqrt();
        let mut tensors = BTreeMap::new();
        for (name, shape) in config.parameter_shapes() {
            let t = if name == "sahp_freq" {
                Tensor::filled(shape, 1.0)
            } else if name.ends_with("bias") {
                Tensor::zeros(shape)
            } else {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| bound * (2.0 * rng.uniform01() - 1.0)).collect();
                Tensor::new(shape, data).expect("shape from config")
            };
            tensors.insert(name, Arc::new(t));
        }
        Ok(Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config,
            tensors,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found: self.format_version,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        self.config.validate()?;
        let expected = self.config.parameter_shapes();
        if expected.len() != self.tensors.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, config expects {}",
                self.tensors.len(),
                expected.len()
            )));
        }
        for (name, shape) in expected {
            let t = self
                .tensors
                .get(&name)
                .ok_or_else(|| Error::Config(format!("missing tensor {name}")))?;
            let n: usize = shape.iter().product();
            if t.shape() != shape.as_slice() || t.len() != n {
                return Err(Error::Config(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Numerical(format!("tensor {name} has non-finite values")));
            }
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<&Arc<Tensor>> {
        self.tensors.get(name)
    }

    pub fn tensors(&self) -> &BTreeMap<String, Arc<Tensor>> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut BTreeMap<String, Arc<Tensor>> {
        &mut self.tensors
    }

    /// Replaces a tensor, keeping the registered shape.
    pub fn set_tensor(&mut self, name: &str, t: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown tensor {name}")))?;
        if slot.shape() != t.shape() {
            return Err(Error::Config(format!(
                "tensor {name} has shape {:?}, got {:?}",
                slot.shape(),
                t.shape()
            )));
        }
        *slot = Arc::new(t);
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("encoding checkpoint", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let probe: VersionProbe =
            serde_json::from_str(text).map_err(|e| Error::json("reading checkpoint", e))?;
        if probe.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found: probe.format_version,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        let ckpt: Self =
            serde_json::from_str(text).map_err(|e| Error::json("reading checkpoint", e))?;
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.to_json()?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json { context, source } => Error::Json {
                context: format!("{}: {context}", path.display()),
                source,
            },
            other => other,
        })
    }

    pub fn temporal_encoding(&self, t: f64) -> Vec<f64> {
        let freq = self.tensor("sahp_freq").map(|f| f.data());
        temporal_encoding(t, &self.config, freq)
    }

    /// `X`: one row per event, `onehot(k_i)·W + z(t_i)`.
    pub fn embed_events(&self, events: &[Event]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let w = self.bind(&mut tape, false);
        let x = w.embed(&mut tape, events)?;
        Ok(tape.value(x).clone())
    }

    /// `H`: one history embedding per event after all attention layers.
    pub fn encode_history(&self, events: &[Event]) -> Result<Tensor> {
        if events.is_empty() {
            return Err(Error::InvalidArgument("history must hold at least one event".into()));
        }
        let mut tape = Tape::new();
        let w = self.bind(&mut tape, false);
        let h = w.encode(&mut tape, events)?;
        Ok(tape.value(h).clone())
    }

    pub fn mixture_head(&self, h: &[f64]) -> Result<MixtureParams> {
        Ok(self.decode_row(h)?.interval)
    }

    pub fn mark_head(&self, h: &[f64]) -> Result<MarkDistribution> {
        Ok(self.decode_row(h)?.mark)
    }

    fn decode_row(&self, h: &[f64]) -> Result<NextEventDistribution> {
        if h.len() != self.config.embed_dim {
            return Err(Error::InvalidArgument(format!(
                "history embedding has length {}, expected {}",
                h.len(),
                self.config.embed_dim
            )));
        }
        let mut tape = Tape::new();
        let w = self.bind(&mut tape, false);
        let ctx = tape.constant(Tensor::row(h.to_vec()));
        let heads = w.heads(&mut tape, ctx)?;
        Ok(heads.distributions(&tape).remove(0))
    }

    /// Distributions for contexts `first_context..=events.len()`, where
    /// context `c` conditions on the first `c` events (context 0 is the
    /// begin-of-sequence vector). One forward pass covers every position.
    pub fn next_event_distributions(
        &self,
        events: &[Event],
        first_context: usize,
    ) -> Result<Vec<NextEventDistribution>> {
        if first_context > events.len() {
            return Err(Error::InvalidArgument(format!(
                "context {first_context} beyond {} events",
                events.len()
            )));
        }
        let mut tape = Tape::new();
        let w = self.bind(&mut tape, false);
        let ctx = w.contexts(&mut tape, events)?;
        let ctx = tape.slice_rows(ctx, first_context, events.len() + 1)?;
        let heads = w.heads(&mut tape, ctx)?;
        Ok(heads.distributions(&tape))
    }

    /// Distribution of the event following `events`.
    pub fn next_event_distribution(&self, events: &[Event]) -> Result<NextEventDistribution> {
        Ok(self.next_event_distributions(events, events.len())?.remove(0))
    }

    /// Log-likelihood of a whole sequence on `(0, t_end]`, including the
    /// survival term after the last event.
    pub fn sequence_loglik(&self, seq: &EventSequence) -> Result<f64> {
        let mut tape = Tape::new();
        let w = self.bind(&mut tape, false);
        let ll = w.sequence_loglik(&mut tape, seq)?;
        Ok(tape.value(ll).item())
    }

    pub(crate) fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel<'_> {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.param_shared(Arc::clone(t))
                } else {
                    tape.constant_shared(Arc::clone(t))
                };
                (name.clone(), v)
            })
            .collect();
        BoundModel {
            config: &self.config,
            vars,
        }
    }
}

/// A checkpoint's tensors placed on a tape.
pub(crate) struct BoundModel<'a> {
    config: &'a ModelConfig,
    pub(crate) vars: BTreeMap<String, Var>,
}

struct HeadVars {
    log_weights: Var,
    means: Var,
    log_scales: Var,
    scales: Var,
    mark_log_probs: Var,
}

impl HeadVars {
    fn distributions(&self, tape: &Tape) -> Vec<NextEventDistribution> {
        let lw = tape.value(self.log_weights);
        let mu = tape.value(self.means);
        let sg = tape.value(self.scales);
        let lf = tape.value(self.mark_log_probs);
        (0..lw.rows())
            .map(|r| NextEventDistribution {
                interval: MixtureParams {
                    weights: lw.row_slice(r).iter().map(|x| x.exp()).collect(),
                    means: mu.row_slice(r).to_vec(),
                    scales: sg.row_slice(r).to_vec(),
                },
                mark: MarkDistribution {
                    probs: lf.row_slice(r).iter().map(|x| x.exp()).collect(),
                },
            })
            .collect()
    }
}

impl<'a> BoundModel<'a> {
    #[cfg(test)]
    pub(crate) fn from_vars(
        config: &'a ModelConfig,
        vars: impl IntoIterator<Item = (String, Var)>,
    ) -> Self {
        Self {
            config,
            vars: vars.into_iter().collect(),
        }
    }

    fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    fn temporal(&self, tape: &mut Tape, times: &[f64]) -> Result<Var> {
        let d = self.config.embed_dim;
        let n = times.len();
        if self.config.encoding != EncodingVariant::Sahp {
            let mut data = Vec::with_capacity(n * d);
            for &t in times {
                data.extend(temporal_encoding(t, self.config, None));
            }
            return Ok(tape.constant(Tensor::matrix(n, d, data)?));
        }
        // sin/cos(phase_j + w_j t), differentiable in w
        let phase: Vec<f64> = (0..d)
            .map(|j| j as f64 / 10000f64.powf((j - j % 2) as f64 / d as f64))
            .collect();
        let t_col = tape.constant(Tensor::column(times.to_vec()));
        let w = self.var("sahp_freq");
        let wt = tape.matmul(t_col, w)?;
        let ph = tape.constant(Tensor::row(phase));
        let arg = tape.add_row(wt, ph)?;
        let s = tape.sin(arg);
        let c = tape.cos(arg);
        let even: Vec<f64> = (0..d).map(|j| if j % 2 == 0 { 1.0 } else { 0.0 }).collect();
        let odd: Vec<f64> = even.iter().map(|x| 1.0 - x).collect();
        let even = tape.constant(Tensor::row(even));
        let even = tape.broadcast_rows(even, n)?;
        let odd = tape.constant(Tensor::row(odd));
        let odd = tape.broadcast_rows(odd, n)?;
        let s = tape.mul(s, even)?;
        let c = tape.mul(c, odd)?;
        Ok(tape.add(s, c)?)
    }

    fn embed_with(&self, tape: &mut Tape, events: &[Event], z: Var) -> Result<Var> {
        let k = self.config.num_marks;
        let mut onehot = vec![0.0; events.len() * k];
        for (i, e) in events.iter().enumerate() {
            if e.mark >= k {
                return Err(ValidationError::MarkOutOfRange {
                    index: i,
                    mark: e.mark,
                    k,
                }
                .into());
            }
            onehot[i * k + e.mark] = 1.0;
        }
        let oh = tape.constant(Tensor::matrix(events.len(), k, onehot)?);
        let we = tape.matmul(oh, self.var("mark_embedding"))?;
        Ok(tape.add(we, z)?)
    }

    fn embed(&self, tape: &mut Tape, events: &[Event]) -> Result<Var> {
        let times: Vec<f64> = events.iter().map(|e| e.time).collect();
        let z = self.temporal(tape, &times)?;
        self.embed_with(tape, events, z)
    }

    /// History embeddings, `n × D` for `n ≥ 1` events.
    fn encode(&self, tape: &mut Tape, events: &[Event]) -> Result<Var> {
        let times: Vec<f64> = events.iter().map(|e| e.time).collect();
        let z = self.temporal(tape, &times)?;
        let mut h = self.embed_with(tape, events, z)?;
        let n = events.len();
        let cfg = self.config;
        let heads = cfg.num_heads;
        let hd = cfg.embed_dim / heads;
        let inv_sqrt = 1.0 / (hd as f64).sqrt();
        let attnhp = cfg.attention == AttentionVariant::Attnhp;
        let ones = if attnhp {
            Some(tape.constant(Tensor::filled(vec![n, 1], 1.0)))
        } else {
            None
        };
        for l in 0..cfg.num_layers {
            let input = match ones {
                Some(ones) => tape.concat_cols(&[ones, z, h])?,
                None => h,
            };
            let q = tape.matmul_nt(input, self.var(&format!("layer{l}.wq")))?;
            let k = tape.matmul_nt(input, self.var(&format!("layer{l}.wk")))?;
            let v = tape.matmul_nt(input, self.var(&format!("layer{l}.wv")))?;
            let mut outs = Vec::with_capacity(heads);
            for hh in 0..heads {
                let (a, b) = (hh * hd, (hh + 1) * hd);
                let (qh, kh, vh) = if heads == 1 {
                    (q, k, v)
                } else {
                    (
                        tape.slice_cols(q, a, b)?,
                        tape.slice_cols(k, a, b)?,
                        tape.slice_cols(v, a, b)?,
                    )
                };
                let scores = tape.matmul_nt(qh, kh)?;
                let scores = tape.scale(scores, inv_sqrt);
                let att = tape.causal_softmax(scores, attnhp)?;
                outs.push(tape.matmul(att, vh)?);
            }
            let mut update = if heads == 1 {
                outs[0]
            } else {
                tape.concat_cols(&outs)?
            };
            if attnhp {
                update = tape.tanh(update);
            }
            h = tape.add(h, update)?;
            if cfg.feed_forward {
                let f = tape.affine(
                    h,
                    self.var(&format!("layer{l}.ff1")),
                    self.var(&format!("layer{l}.ff1_bias")),
                )?;
                let f = tape.tanh(f);
                let f = tape.affine(
                    f,
                    self.var(&format!("layer{l}.ff2")),
                    self.var(&format!("layer{l}.ff2_bias")),
                )?;
                h = tape.add(h, f)?;
            }
        }
        Ok(h)
    }

    /// `[bos; H]`, `(n + 1) × D`.
    fn contexts(&self, tape: &mut Tape, events: &[Event]) -> Result<Var> {
        let bos = self.var("bos");
        if events.is_empty() {
            return Ok(bos);
        }
        let h = self.encode(tape, events)?;
        Ok(tape.concat_rows(&[bos, h])?)
    }

    fn heads(&self, tape: &mut Tape, ctx: Var) -> Result<HeadVars> {
        let d = self.config.embed_dim;
        let e = tape.matmul_nt(ctx, self.var("decoder.e"))?;
        let e1 = tape.slice_cols(e, 0, d)?;
        let e2 = tape.slice_cols(e, d, 2 * d)?;
        let e3 = tape.slice_cols(e, 2 * d, 3 * d)?;
        let wl = tape.affine(e1, self.var("head.w"), self.var("head.w_bias"))?;
        let log_weights = tape.log_softmax_rows(wl)?;
        let means = tape.affine(e2, self.var("head.mu"), self.var("head.mu_bias"))?;
        let s = tape.affine(e3, self.var("head.sigma"), self.var("head.sigma_bias"))?;
        let log_scales = tape.clamp(s, SIGMA_MIN.ln(), SIGMA_MAX.ln());
        let scales = tape.exp(log_scales);
        let hid = tape.affine(ctx, self.var("mark.hidden"), self.var("mark.hidden_bias"))?;
        let hid = tape.tanh(hid);
        let logits = tape.affine(hid, self.var("mark.out"), self.var("mark.out_bias"))?;
        let mark_log_probs = tape.log_softmax_rows(logits)?;
        Ok(HeadVars {
            log_weights,
            means,
            log_scales,
            scales,
            mark_log_probs,
        })
    }

    /// Scalar log-likelihood node for one sequence.
    pub(crate) fn sequence_loglik(&self, tape: &mut Tape, seq: &EventSequence) -> Result<Var> {
        let events = &seq.events;
        let n = events.len();
        let mut ln_tau = Vec::with_capacity(n + 1);
        let mut prev = 0.0;
        for (i, e) in events.iter().enumerate() {
            let tau = e.time - prev;
            if !(tau > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "interval {i} is not positive ({tau})"
                )));
            }
            if e.mark >= self.config.num_marks {
                return Err(ValidationError::MarkOutOfRange {
                    index: i,
                    mark: e.mark,
                    k: self.config.num_marks,
                }
                .into());
            }
            ln_tau.push(tau.ln());
            prev = e.time;
        }
        let tail = seq.t_end - prev;
        if tail < 0.0 {
            return Err(ValidationError::ExceedsHorizon { index: n - 1 }.into());
        }
        let has_survival = tail > 0.0;
        ln_tau.push(if has_survival { tail.ln() } else { 0.0 });

        let ctx = self.contexts(tape, events)?;
        let hv = self.heads(tape, ctx)?;
        let m = self.config.num_components;

        let lt = tape.constant(Tensor::column(ln_tau.clone()));
        let lt = tape.broadcast_cols(lt, m)?;
        let diff = tape.sub(lt, hv.means)?;
        let z = tape.div(diff, hv.scales)?;

        let mut terms = Vec::new();
        if n > 0 {
            let zz = tape.mul(z, z)?;
            let half = tape.scale(zz, -0.5);
            let comp = tape.sub(hv.log_weights, hv.log_scales)?;
            let comp = tape.add(comp, half)?;
            let dens = tape.logsumexp_rows(comp);
            let dens = tape.slice_rows(dens, 0, n)?;
            // −ln τ − ln √(2π) per event does not depend on the parameters
            let shift: f64 = ln_tau[..n].iter().map(|x| -x - LN_SQRT_2PI).sum();
            let dens = tape.sum(dens);
            terms.push(tape.add_scalar(dens, shift));

            let lf = tape.slice_rows(hv.mark_log_probs, 0, n)?;
            let marks: Vec<usize> = events.iter().map(|e| e.mark).collect();
            let picked = tape.pick(lf, &marks)?;
            terms.push(tape.sum(picked));
        }
        if has_survival {
            let last_z = tape.slice_rows(z, n, n + 1)?;
            let neg = tape.scale(last_z, -1.0);
            let lphi = tape.log_normal_cdf(neg);
            let lw = tape.slice_rows(hv.log_weights, n, n + 1)?;
            let s = tape.add(lw, lphi)?;
            terms.push(tape.logsumexp_rows(s));
        }
        let mut total = match terms.first() {
            Some(&t) => t,
            None => return Ok(tape.constant(Tensor::scalar(0.0))),
        };
        for &t in &terms[1..] {
            total = tape.add(total, t)?;
        }
        Ok(total)
    }
}
