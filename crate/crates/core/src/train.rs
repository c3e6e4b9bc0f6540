//! Maximum-likelihood training with Adam and validation early stopping.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::events::EventSequence;
use crate::model::{BoundModel, ModelCheckpoint, ModelConfig};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            max_epochs: 200,
            patience: 20,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.epsilon > 0.0) {
            return Err(Error::Config("learning_rate and epsilon must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("batch_size, max_epochs and patience must be >= 1".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config("patience cannot exceed max_epochs".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates per named parameter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

/// One bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step(
    params: &mut BTreeMap<String, Arc<Tensor>>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(Error::InvalidArgument(format!(
                "gradient shape {:?} differs from parameter {name} {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::Numerical(format!("non-finite gradient for {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for (name, g) in grads {
        let p = Arc::make_mut(params.get_mut(name).expect("checked above"));
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for (i, (&gi, theta)) in g.data().iter().zip(p.data_mut()).enumerate() {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gi;
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            *theta -= config.learning_rate * mhat / (vhat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}

fn batch_loss(
    bound: &BoundModel<'_>,
    tape: &mut Tape,
    batch: &[EventSequence],
) -> Result<(Var, usize)> {
    let mut total: Option<Var> = None;
    let mut events = 0;
    for seq in batch {
        let ll = bound.sequence_loglik(tape, seq)?;
        events += seq.len();
        total = Some(match total {
            Some(t) => tape.add(t, ll)?,
            None => ll,
        });
    }
    let total = total.ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    Ok((tape.scale(total, -1.0 / events.max(1) as f64), events))
}

#[derive(Debug, Clone)]
pub struct BatchLoss {
    /// Negative log-likelihood per event (per batch when it has no events).
    pub loss: f64,
    pub events: usize,
    pub grads: BTreeMap<String, Tensor>,
}

/// Loss and parameter gradients of a batch. Each sequence is scored at its
/// own length, so no padded positions exist.
pub fn nll_batch(ckpt: &ModelCheckpoint, batch: &[EventSequence]) -> Result<BatchLoss> {
    let mut tape = Tape::new();
    let bound = ckpt.bind(&mut tape, true);
    let (loss, events) = batch_loss(&bound, &mut tape, batch)?;
    let g = tape.backward(loss)?;
    let grads = bound
        .vars
        .iter()
        .map(|(name, &v)| {
            let t = g
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec()));
            (name.clone(), t)
        })
        .collect();
    Ok(BatchLoss {
        loss: tape.value(loss).item(),
        events,
        grads,
    })
}

/// Total log-likelihood over total event count.
pub fn per_event_loglik(ckpt: &ModelCheckpoint, seqs: &[EventSequence]) -> Result<f64> {
    let mut total = 0.0;
    let mut events = 0;
    for s in seqs {
        total += ckpt.sequence_loglik(s)?;
        events += s.len();
    }
    Ok(total / events.max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loglik: f64,
    pub val_loglik: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loglik: f64,
    pub checkpoint: ModelCheckpoint,
}

/// Trains a freshly initialised model and returns the checkpoint with the
/// best validation per-event log-likelihood.
pub fn train(
    train_set: &[EventSequence],
    val_set: &[EventSequence],
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainReport> {
    let root = RngStream::new(config.seed, 0);
    let ckpt = ModelCheckpoint::init(model_config.clone(), &mut root.substream(1))?;
    train_from(ckpt, train_set, val_set, config)
}

/// Like [`train`], starting from an existing checkpoint.
pub fn train_from(
    mut ckpt: ModelCheckpoint,
    train_set: &[EventSequence],
    val_set: &[EventSequence],
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidArgument("training and validation sets must be nonempty".into()));
    }
    for s in train_set.iter().chain(val_set) {
        s.validate(ckpt.config.num_marks)?;
    }
    let mut shuffle_rng = RngStream::new(config.seed, 0).substream(2);
    let mut state = AdamState::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best_val = per_event_loglik(&ckpt, val_set)?;
    let mut best = ckpt.clone();
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut epochs = Vec::new();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut ll_sum = 0.0;
        let mut ev_sum = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<EventSequence> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let out = nll_batch(&ckpt, &batch)?;
            ll_sum -= out.loss * out.events.max(1) as f64;
            ev_sum += out.events;
            adam_step(ckpt.tensors_mut(), &out.grads, &mut state, config)?;
        }
        let val = per_event_loglik(&ckpt, val_set)?;
        let train_ll = ll_sum / ev_sum.max(1) as f64;
        log::debug!("epoch {epoch}: train {train_ll:.5} val {val:.5}");
        epochs.push(EpochRecord {
            epoch,
            train_loglik: train_ll,
            val_loglik: val,
        });
        if val > best_val {
            best_val = val;
            best = ckpt.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    best.validate()?;
    Ok(TrainReport {
        epochs,
        best_epoch,
        best_val_loglik: best_val,
        checkpoint: best,
    })
}
