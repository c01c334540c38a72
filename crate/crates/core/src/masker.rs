//! Per-task binary weight masks over a frozen network.
//!
//! Each weight `w_i` gets a logit `l_i`. The keep-probability is
//! `p_i = sigmoid(l_i)` and the hard mask is `m_i = 1` iff `p_i > 0.5`
//! (equivalently `l_i > 0`). Training runs the network on the hard-masked
//! weights and sends gradients back through the sigmoid (straight-through),
//! minimising
//!
//! ```text
//! total = mean_{s, a} (Q(s, a) - Q_masked(s, a))^2 + lambda * mean_i p_i
//! ```
//!
//! Only the logits move; weights and biases are read-only.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dqn::StateBuffer;
use crate::exec::Execution;
use crate::gridworld::{Observation, TaskContext};
use crate::qnet::{chain_to_logits, FlatWeights, MaskMode, Workspace};
use crate::seeds;
use crate::{Error, Result};

/// Samples per gradient chunk. Chunk partial sums are reduced in order, so
/// the result does not depend on how chunks are scheduled.
const CHUNK: usize = 32;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskLogits {
    l: Vec<f64>,
}

impl MaskLogits {
    pub fn new(l: Vec<f64>) -> Self {
        Self { l }
    }

    pub fn filled(n: usize, value: f64) -> Self {
        Self { l: vec![value; n] }
    }

    pub fn values(&self) -> &[f64] {
        &self.l
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.l
    }

    pub fn len(&self) -> usize {
        self.l.len()
    }

    pub fn is_empty(&self) -> bool {
        self.l.is_empty()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.l.iter().map(|l| sigmoid(*l)).collect()
    }

    /// `m_i = 1` iff `l_i > 0`. Thresholding the logit rather than the
    /// rounded sigmoid keeps tiny positive logits on.
    pub fn hard_mask(&self) -> Vec<bool> {
        self.l.iter().map(|l| *l > 0.0).collect()
    }

    pub fn density(&self) -> f64 {
        if self.l.is_empty() {
            return 0.0;
        }
        self.l.iter().filter(|l| **l > 0.0).count() as f64 / self.l.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskTrainConfig {
    /// Weight on the mean keep-probability.
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub logit_init_std: f64,
    pub seed: u64,
    /// States collected per task for the distillation dataset.
    pub states_per_task: usize,
    /// Exploration rate of the collection rollouts.
    pub collect_epsilon: f64,
}

impl Default for MaskTrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            learning_rate: 1e-2,
            batch_size: 128,
            epochs: 200,
            logit_init_std: 0.01,
            seed: 0,
            states_per_task: 4096,
            collect_epsilon: 0.3,
        }
    }
}

impl MaskTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("mask.lambda", "must be finite and >= 0"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("mask.learning_rate", "must be finite and > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("mask.batch_size", "must be positive"));
        }
        if !(self.logit_init_std >= 0.0 && self.logit_init_std.is_finite()) {
            return Err(Error::config("mask.logit_init_std", "must be finite and >= 0"));
        }
        if self.states_per_task == 0 {
            return Err(Error::config("mask.states_per_task", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.collect_epsilon) {
            return Err(Error::config("mask.collect_epsilon", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub q_value_loss: f64,
    pub sparsity_loss: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskProvenance {
    pub checkpoint_id: String,
    pub config: MaskTrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Subnetwork {
    pub task: TaskContext,
    pub mask: Vec<bool>,
    /// `w * m`, biases untouched.
    pub masked_weights: FlatWeights,
    pub provenance: Option<MaskProvenance>,
}

impl Subnetwork {
    pub fn density(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.mask.iter().filter(|m| **m).count() as f64 / self.mask.len() as f64
    }

    pub fn with_provenance(mut self, provenance: MaskProvenance) -> Self {
        self.provenance = Some(provenance);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the state before any update.
    pub epoch: usize,
    pub q_value_loss: f64,
    pub sparsity_loss: f64,
    pub total: f64,
    pub density: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskTrainLog {
    pub task_index: usize,
    /// The sparsity term is `sum_i p_i / sparsity_normalizer`.
    pub sparsity_normalizer: f64,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Clone, Debug)]
pub struct MaskRun {
    pub logits: MaskLogits,
    pub subnetwork: Subnetwork,
    pub log: MaskTrainLog,
}

/// Logits drawn from `Normal(0, std^2)`.
pub fn init_logits(n: usize, std: f64, seed: u64) -> Result<MaskLogits> {
    if n == 0 {
        return Err(Error::config("mask.logits", "need at least one logit"));
    }
    if !(std >= 0.0 && std.is_finite()) {
        return Err(Error::config("mask.logit_init_std", "must be finite and >= 0"));
    }
    if std == 0.0 {
        return Ok(MaskLogits::filled(n, 0.0));
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::config("mask.logit_init_std", e.to_string()))?;
    let mut rng = seeds::rng(seed, seeds::stream::MASK_INIT, 0);
    Ok(MaskLogits::new((0..n).map(|_| normal.sample(&mut rng)).collect()))
}

/// Hard-masked subnetwork `w' = w * m`.
pub fn extract(weights: &FlatWeights, logits: &MaskLogits, task: &TaskContext) -> Result<Subnetwork> {
    let masked = weights.masked_weights(logits, MaskMode::Eval)?;
    Ok(Subnetwork {
        task: task.clone(),
        mask: logits.hard_mask(),
        masked_weights: weights.with_weights(masked)?,
        provenance: None,
    })
}

/// Full-network Q-values for every observation; the distillation targets.
pub fn q_targets(weights: &FlatWeights, observations: &[Observation], exec: Execution) -> Result<Vec<Vec<f64>>> {
    for obs in observations {
        if obs.len() != weights.spec().input_dim {
            return Err(Error::Dimension {
                what: "network input",
                expected: weights.spec().input_dim,
                got: obs.len(),
            });
        }
    }
    let chunks = observations.len().div_ceil(CHUNK);
    let parts = exec.map_range(chunks, |c| {
        let mut ws = Workspace::new(weights.spec());
        let net = weights.network();
        observations[c * CHUNK..((c + 1) * CHUNK).min(observations.len())]
            .iter()
            .map(|o| net.forward(o.as_slice(), &mut ws).to_vec())
            .collect::<Vec<_>>()
    });
    Ok(parts.into_iter().flatten().collect())
}

/// Loss and straight-through logit gradient on a batch given precomputed
/// full-network targets.
fn loss_and_gradient(
    weights: &FlatWeights,
    logits: &MaskLogits,
    batch: &[&Observation],
    targets: &[&[f64]],
    lambda: f64,
    exec: Execution,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let n = weights.len();
    let actions = weights.spec().output_dim;
    let scale = 2.0 / (batch.len() * actions) as f64;
    let w_eff = weights.masked_weights(logits, MaskMode::Train)?;
    let chunks = batch.len().div_ceil(CHUNK);
    let parts = exec.map_range(chunks, |c| {
        let lo = c * CHUNK;
        let hi = (lo + CHUNK).min(batch.len());
        let net = weights.network_with(&w_eff);
        let mut ws = Workspace::new(weights.spec());
        let mut d_w = vec![0.0; n];
        let mut upstream = vec![0.0; actions];
        let mut sq = 0.0;
        for (obs, target) in batch[lo..hi].iter().zip(&targets[lo..hi]) {
            let q = net.forward(obs.as_slice(), &mut ws);
            for ((u, qm), qt) in upstream.iter_mut().zip(q).zip(target.iter()) {
                let diff = qm - qt;
                sq += diff * diff;
                *u = scale * diff;
            }
            net.backward(&mut ws, &upstream, &mut d_w, None);
        }
        (sq, d_w)
    });
    let mut sq_total = 0.0;
    let mut d_w_eff = vec![0.0; n];
    for (sq, d_w) in parts {
        sq_total += sq;
        for (a, b) in d_w_eff.iter_mut().zip(&d_w) {
            *a += b;
        }
    }
    let q_value_loss = sq_total / (batch.len() * actions) as f64;
    let sparsity_loss = logits.values().iter().map(|l| sigmoid(*l)).sum::<f64>() / n as f64;
    let total = q_value_loss + lambda * sparsity_loss;
    if !total.is_finite() {
        return Err(Error::NonFinite {
            what: "mask training loss",
            detail: format!("q_value_loss={q_value_loss}, sparsity_loss={sparsity_loss}"),
        });
    }
    let mut grad = chain_to_logits(&d_w_eff, weights.w(), logits.values());
    let sparsity_scale = lambda / n as f64;
    for (g, l) in grad.iter_mut().zip(logits.values()) {
        let p = sigmoid(*l);
        *g += sparsity_scale * p * (1.0 - p);
    }
    Ok((
        LossBreakdown {
            q_value_loss,
            sparsity_loss,
            total,
        },
        grad,
    ))
}

/// Loss of the hard-masked network on `observations` without updating.
pub fn evaluate_loss(
    weights: &FlatWeights,
    logits: &MaskLogits,
    observations: &[Observation],
    lambda: f64,
    exec: Execution,
) -> Result<LossBreakdown> {
    let targets = q_targets(weights, observations, exec)?;
    let batch: Vec<&Observation> = observations.iter().collect();
    let target_refs: Vec<&[f64]> = targets.iter().map(Vec::as_slice).collect();
    Ok(loss_and_gradient(weights, logits, &batch, &target_refs, lambda, exec)?.0)
}

/// Analytic gradient of the total loss with respect to the logits.
pub fn logit_gradient(
    weights: &FlatWeights,
    logits: &MaskLogits,
    batch: &[Observation],
    lambda: f64,
    exec: Execution,
) -> Result<Vec<f64>> {
    let targets = q_targets(weights, batch, exec)?;
    let obs: Vec<&Observation> = batch.iter().collect();
    let target_refs: Vec<&[f64]> = targets.iter().map(Vec::as_slice).collect();
    Ok(loss_and_gradient(weights, logits, &obs, &target_refs, lambda, exec)?.1)
}

fn check_logits(weights: &FlatWeights, logits: &MaskLogits) -> Result<()> {
    if logits.len() != weights.len() {
        return Err(Error::Dimension {
            what: "mask logits",
            expected: weights.len(),
            got: logits.len(),
        });
    }
    Ok(())
}

/// One gradient-descent step on the logits. Returns the loss measured
/// before the update.
pub fn mask_train_step(
    weights: &FlatWeights,
    logits: &mut MaskLogits,
    batch: &[Observation],
    cfg: &MaskTrainConfig,
    exec: Execution,
) -> Result<LossBreakdown> {
    check_logits(weights, logits)?;
    if batch.is_empty() {
        return Err(Error::config("mask.batch_size", "empty batch"));
    }
    let targets = q_targets(weights, batch, exec)?;
    let obs: Vec<&Observation> = batch.iter().collect();
    let target_refs: Vec<&[f64]> = targets.iter().map(Vec::as_slice).collect();
    step_with_targets(weights, logits, &obs, &target_refs, cfg, exec)
}

fn step_with_targets(
    weights: &FlatWeights,
    logits: &mut MaskLogits,
    batch: &[&Observation],
    targets: &[&[f64]],
    cfg: &MaskTrainConfig,
    exec: Execution,
) -> Result<LossBreakdown> {
    let (loss, grad) = loss_and_gradient(weights, logits, batch, targets, cfg.lambda, exec)?;
    for (l, g) in logits.values_mut().iter_mut().zip(&grad) {
        *l -= cfg.learning_rate * g;
    }
    Ok(loss)
}

/// Learns one task's mask from states collected under that task's context,
/// then extracts the hard subnetwork.
pub fn learn_mask(weights: &FlatWeights, states: &StateBuffer, cfg: &MaskTrainConfig, exec: Execution) -> Result<MaskRun> {
    cfg.validate()?;
    if states.observations.is_empty() {
        return Err(Error::config("mask.states_per_task", "state buffer is empty"));
    }
    let n = weights.len();
    let targets = q_targets(weights, &states.observations, exec)?;
    let mut logits = init_logits(n, cfg.logit_init_std, cfg.seed)?;

    let all_obs: Vec<&Observation> = states.observations.iter().collect();
    let all_targets: Vec<&[f64]> = targets.iter().map(Vec::as_slice).collect();
    let record = |epoch: usize, logits: &MaskLogits| -> Result<EpochRecord> {
        let (loss, _) = loss_and_gradient(weights, logits, &all_obs, &all_targets, cfg.lambda, exec)?;
        Ok(EpochRecord {
            epoch,
            q_value_loss: loss.q_value_loss,
            sparsity_loss: loss.sparsity_loss,
            total: loss.total,
            density: logits.density(),
        })
    };

    let mut epochs = vec![record(0, &logits)?];
    let mut order: Vec<usize> = (0..states.observations.len()).collect();
    let mut batch_obs = Vec::with_capacity(cfg.batch_size);
    let mut batch_targets = Vec::with_capacity(cfg.batch_size);
    for epoch in 1..=cfg.epochs {
        let mut rng = seeds::rng(cfg.seed, seeds::stream::MASK_SHUFFLE, epoch as u64);
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            batch_obs.clear();
            batch_targets.clear();
            batch_obs.extend(idx.iter().map(|&i| all_obs[i]));
            batch_targets.extend(idx.iter().map(|&i| all_targets[i]));
            step_with_targets(weights, &mut logits, &batch_obs, &batch_targets, cfg, exec)?;
        }
        epochs.push(record(epoch, &logits)?);
    }

    let subnetwork = extract(weights, &logits, &states.context)?;
    Ok(MaskRun {
        log: MaskTrainLog {
            task_index: states.context.index(),
            sparsity_normalizer: n as f64,
            epochs,
        },
        logits,
        subnetwork,
    })
}

/// Learns masks for several tasks; tasks are independent and run through
/// `exec`.
pub fn learn_masks(
    weights: &FlatWeights,
    buffers: &[StateBuffer],
    cfg: &MaskTrainConfig,
    exec: Execution,
) -> Result<Vec<MaskRun>> {
    // Inner loops stay sequential when tasks already fan out.
    let inner = if buffers.len() > 1 { Execution::Sequential } else { exec };
    exec.try_map_range(buffers.len(), |i| learn_mask(weights, &buffers[i], cfg, inner))
}
