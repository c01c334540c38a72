//! Double DQN training of the contextual Q-network, greedy evaluation, and
//! state collection for mask learning.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::gridworld::{Action, GridWorld, Observation, TaskContext};
use crate::qnet::{argmax, FlatWeights, GradientBundle, NetSpec, Workspace};
use crate::seeds;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Observation,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Observation,
    pub done: bool,
}

/// Fixed-capacity ring buffer with uniform sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.capacity == 0 {
            return;
        }
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// `batch_size` indices drawn uniformly with replacement.
    pub fn sample_indices<R: Rng>(&self, batch_size: usize, rng: &mut R) -> Vec<usize> {
        (0..batch_size).map(|_| rng.random_range(0..self.items.len())).collect()
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DqnConfig {
    pub gamma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub target_update_interval: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of `total_env_steps` over which epsilon decays linearly.
    pub exploration_fraction: f64,
    pub total_env_steps: usize,
    /// Environment steps collected before the first gradient update.
    pub learning_starts: usize,
    /// Environment steps between gradient updates.
    pub train_every: usize,
    pub grad_clip_norm: f64,
    /// Store episode timeouts as non-terminal so their targets bootstrap.
    pub bootstrap_timeouts: bool,
    /// Steps summed into each stored transition's reward; targets then
    /// bootstrap with `gamma^n_step`.
    pub n_step: usize,
    /// Environment steps between evaluation sweeps in the training log;
    /// 0 logs only the final sweep.
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub seed: u64,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            learning_rate: 0.1,
            batch_size: 64,
            buffer_capacity: 50_000,
            target_update_interval: 1_000,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            exploration_fraction: 0.5,
            total_env_steps: 200_000,
            learning_starts: 1_000,
            train_every: 1,
            grad_clip_norm: 10.0,
            bootstrap_timeouts: true,
            n_step: 1,
            eval_interval: 10_000,
            eval_episodes: 20,
            seed: 0,
        }
    }
}

impl DqnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("dqn.gamma", "must lie in (0, 1]"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("dqn.learning_rate", "must be finite and > 0"));
        }
        for (field, v) in [
            ("batch_size", self.batch_size),
            ("buffer_capacity", self.buffer_capacity),
            ("target_update_interval", self.target_update_interval),
            ("train_every", self.train_every),
            ("n_step", self.n_step),
        ] {
            if v == 0 {
                return Err(Error::config(format!("dqn.{field}"), "must be positive"));
            }
        }
        for (field, v) in [("epsilon_start", self.epsilon_start), ("epsilon_end", self.epsilon_end)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("dqn.{field}"), "must lie in [0, 1]"));
            }
        }
        if !(self.exploration_fraction > 0.0 && self.exploration_fraction <= 1.0) {
            return Err(Error::config("dqn.exploration_fraction", "must lie in (0, 1]"));
        }
        if self.grad_clip_norm.is_nan() || self.grad_clip_norm <= 0.0 {
            return Err(Error::config("dqn.grad_clip_norm", "must be > 0"));
        }
        Ok(())
    }

    /// Linear decay from `epsilon_start` to `epsilon_end`, then constant.
    pub fn epsilon_at(&self, step: usize) -> f64 {
        let horizon = self.exploration_fraction * self.total_env_steps as f64;
        let frac = if horizon <= 0.0 { 1.0 } else { (step as f64 / horizon).min(1.0) };
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

/// Double DQN targets: `r` for terminal transitions, otherwise
/// `r + gamma * Q_target(s', argmax_a Q_online(s', a))`.
pub fn double_dqn_target(batch: &[&Transition], online: &FlatWeights, target: &FlatWeights, gamma: f64) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::config("dqn.batch_size", "empty batch"));
    }
    if online.spec() != target.spec() {
        return Err(Error::Dimension {
            what: "target network weights",
            expected: online.len(),
            got: target.len(),
        });
    }
    let input_dim = online.spec().input_dim;
    let mut ws_online = Workspace::new(online.spec());
    let mut ws_target = Workspace::new(target.spec());
    let online_net = online.network();
    let target_net = target.network();
    batch
        .iter()
        .map(|t| {
            if t.done {
                return Ok(t.reward);
            }
            if t.next_obs.len() != input_dim {
                return Err(Error::Dimension {
                    what: "next observation",
                    expected: input_dim,
                    got: t.next_obs.len(),
                });
            }
            let a = argmax(online_net.forward(t.next_obs.as_slice(), &mut ws_online));
            let q = target_net.forward(t.next_obs.as_slice(), &mut ws_target)[a];
            Ok(t.reward + gamma * q)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub task_index: usize,
    pub normalized_return: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub entries: Vec<TrainLogEntry>,
    pub gradient_updates: usize,
    pub episodes: usize,
}

impl TrainingLog {
    /// Normalized returns of the last logged sweep, one per task.
    pub fn final_returns(&self) -> Vec<f64> {
        let Some(last) = self.entries.last().map(|e| e.step) else {
            return Vec::new();
        };
        self.entries
            .iter()
            .filter(|e| e.step == last)
            .map(|e| e.normalized_return)
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: FlatWeights,
    pub log: TrainingLog,
}

/// Seed of evaluation episode `episode` for `task` under base seed `base`.
pub fn episode_seed(base: u64, task: usize, episode: usize) -> u64 {
    seeds::derive(base, task as u64, episode as u64)
}

/// Runs one greedy episode and returns its undiscounted return.
pub fn greedy_episode(weights: &FlatWeights, world: &GridWorld, context: &TaskContext, episode_seed: u64) -> Result<f64> {
    let (mut state, _) = world.reset(context, episode_seed)?;
    let mut obs = vec![0.0; world.config().observation_len()];
    let mut ws = Workspace::new(weights.spec());
    let net = weights.network();
    let mut total = 0.0;
    loop {
        world.observe_into(&state, &mut obs);
        let a = argmax(net.forward(&obs, &mut ws));
        let (r, done) = world.step_in_place(&mut state, Action::ALL[a])?;
        total += r;
        if done {
            return Ok(total);
        }
    }
}

/// Greedy mean return over `episodes` seeded episodes.
pub fn evaluate(
    weights: &FlatWeights,
    world: &GridWorld,
    context: &TaskContext,
    episodes: usize,
    base_seed: u64,
    exec: Execution,
) -> Result<f64> {
    if episodes == 0 {
        return Err(Error::config("eval.episodes", "must be at least 1"));
    }
    check_net_matches_env(weights.spec(), world)?;
    let returns = exec.try_map_range(episodes, |e| {
        greedy_episode(weights, world, context, episode_seed(base_seed, context.index(), e))
    })?;
    Ok(returns.iter().sum::<f64>() / episodes as f64)
}

pub fn evaluate_normalized(
    weights: &FlatWeights,
    world: &GridWorld,
    context: &TaskContext,
    episodes: usize,
    base_seed: u64,
    exec: Execution,
) -> Result<f64> {
    let mean = evaluate(weights, world, context, episodes, base_seed, exec)?;
    Ok(world.config().normalize_return(mean))
}

fn check_net_matches_env(spec: &NetSpec, world: &GridWorld) -> Result<()> {
    let cfg = world.config();
    if spec.input_dim != cfg.observation_len() {
        return Err(Error::Dimension {
            what: "network input vs observation length",
            expected: cfg.observation_len(),
            got: spec.input_dim,
        });
    }
    if spec.output_dim != Action::COUNT {
        return Err(Error::Dimension {
            what: "network output vs action count",
            expected: Action::COUNT,
            got: spec.output_dim,
        });
    }
    Ok(())
}

fn epsilon_greedy(net_q: &[f64], epsilon: f64, rng: &mut ChaCha8Rng) -> usize {
    if rng.random::<f64>() < epsilon {
        rng.random_range(0..Action::COUNT)
    } else {
        argmax(net_q)
    }
}

/// Scratch state for one gradient update.
struct Learner {
    ws_obs: Workspace,
    ws_next_online: Workspace,
    ws_next_target: Workspace,
    grad: GradientBundle,
    upstream: Vec<f64>,
}

impl Learner {
    fn new(weights: &FlatWeights) -> Self {
        Self {
            ws_obs: Workspace::new(weights.spec()),
            ws_next_online: Workspace::new(weights.spec()),
            ws_next_target: Workspace::new(weights.spec()),
            grad: GradientBundle::zeros_like(weights),
            upstream: vec![0.0; weights.spec().output_dim],
        }
    }

    /// One SGD step on the mean squared TD error; returns the loss.
    fn update(
        &mut self,
        online: &mut FlatWeights,
        target: &FlatWeights,
        replay: &ReplayBuffer,
        indices: &[usize],
        cfg: &DqnConfig,
    ) -> Result<f64> {
        self.grad.fill_zero();
        let b = indices.len() as f64;
        let gamma_n = cfg.gamma.powi(cfg.n_step as i32);
        let mut loss = 0.0;
        {
            let online_net = online.network();
            let target_net = target.network();
            for &i in indices {
                let t = replay.get(i);
                let y = if t.done {
                    t.reward
                } else {
                    let a = argmax(online_net.forward(t.next_obs.as_slice(), &mut self.ws_next_online));
                    t.reward + gamma_n * target_net.forward(t.next_obs.as_slice(), &mut self.ws_next_target)[a]
                };
                let q = online_net.forward(t.obs.as_slice(), &mut self.ws_obs)[t.action];
                let diff = q - y;
                loss += diff * diff / b;
                self.upstream.fill(0.0);
                self.upstream[t.action] = 2.0 * diff / b;
                online_net.backward(
                    &mut self.ws_obs,
                    &self.upstream,
                    &mut self.grad.d_w,
                    Some(&mut self.grad.d_biases),
                );
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "TD loss",
                detail: format!("loss={loss}"),
            });
        }
        let norm = self.grad.norm();
        if norm > cfg.grad_clip_norm {
            self.grad.scale(cfg.grad_clip_norm / norm);
        }
        online.apply_gradient(&self.grad, cfg.learning_rate);
        Ok(loss)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum EpisodeEnd {
    Running,
    /// Cut off by the step cap; the last state still bootstraps.
    Truncated,
    Terminal,
}

/// Turns single steps into n-step transitions. Steps left over at a
/// truncation are dropped, since their bootstrap horizon would be shorter
/// than `n`.
struct NStep {
    n: usize,
    gamma: f64,
    window: VecDeque<(Observation, usize, f64)>,
}

impl NStep {
    fn new(n: usize, gamma: f64) -> Self {
        Self { n, gamma, window: VecDeque::with_capacity(n) }
    }

    fn discounted(&self) -> f64 {
        self.window
            .iter()
            .rev()
            .fold(0.0, |acc, (_, _, r)| r + self.gamma * acc)
    }

    fn push(&mut self, obs: Observation, action: usize, reward: f64, next_obs: &Observation, end: EpisodeEnd, out: &mut ReplayBuffer) {
        self.window.push_back((obs, action, reward));
        if end == EpisodeEnd::Terminal {
            while !self.window.is_empty() {
                let reward = self.discounted();
                let (obs, action, _) = self.window.pop_front().unwrap();
                out.push(Transition { obs, action, reward, next_obs: next_obs.clone(), done: true });
            }
            return;
        }
        if self.window.len() == self.n {
            let reward = self.discounted();
            let (obs, action, _) = self.window.pop_front().unwrap();
            out.push(Transition { obs, action, reward, next_obs: next_obs.clone(), done: false });
        }
        if end == EpisodeEnd::Truncated {
            self.window.clear();
        }
    }
}

/// Trains one network on all tasks, sampling a fresh uniform context every
/// episode. Deterministic for fixed configs.
pub fn train(env_config: &crate::gridworld::EnvConfig, net_spec: &NetSpec, cfg: &DqnConfig, exec: Execution) -> Result<TrainOutcome> {
    cfg.validate()?;
    let world = GridWorld::new(env_config.clone())?;
    net_spec.validate()?;
    check_net_matches_env(net_spec, &world)?;

    let mut online = FlatWeights::init(net_spec, cfg.seed)?;
    let mut target = online.clone();
    let mut rng = seeds::rng(cfg.seed, seeds::stream::DQN, 0);
    let mut replay = ReplayBuffer::new(cfg.buffer_capacity);
    let mut learner = Learner::new(&online);
    let mut ws = Workspace::new(net_spec);
    let mut log = TrainingLog::default();
    let contexts = TaskContext::all(env_config.num_tasks);
    let eval_base = seeds::derive(cfg.seed, seeds::stream::TRAIN_EVAL, 0);

    let log_sweep = |weights: &FlatWeights, step: usize, log: &mut TrainingLog| -> Result<()> {
        for ctx in &contexts {
            let normalized_return = evaluate_normalized(weights, &world, ctx, cfg.eval_episodes.max(1), eval_base, exec)?;
            log.entries.push(TrainLogEntry {
                step,
                task_index: ctx.index(),
                normalized_return,
            });
        }
        Ok(())
    };

    let mut pending = NStep::new(cfg.n_step, cfg.gamma);
    let mut episode: Option<(crate::gridworld::GridState, Observation)> = None;
    for step in 0..cfg.total_env_steps {
        let (mut state, obs) = match episode.take() {
            Some(e) => e,
            None => {
                let ctx = &contexts[rng.random_range(0..contexts.len())];
                log.episodes += 1;
                world.reset(ctx, rng.random())?
            }
        };
        let epsilon = cfg.epsilon_at(step);
        let action = {
            let q = online.network().forward(obs.as_slice(), &mut ws);
            epsilon_greedy(q, epsilon, &mut rng)
        };
        let (reward, done) = world.step_in_place(&mut state, Action::ALL[action])?;
        let next_obs = world.observe(&state);
        let end = match (done, cfg.bootstrap_timeouts && !world.at_goal(&state)) {
            (false, _) => EpisodeEnd::Running,
            (true, true) => EpisodeEnd::Truncated,
            (true, false) => EpisodeEnd::Terminal,
        };
        pending.push(obs, action, reward, &next_obs, end, &mut replay);
        if !done {
            episode = Some((state, next_obs));
        }

        if step >= cfg.learning_starts && step % cfg.train_every == 0 && replay.len() >= cfg.batch_size {
            let idx = replay.sample_indices(cfg.batch_size, &mut rng);
            learner.update(&mut online, &target, &replay, &idx, cfg)?;
            log.gradient_updates += 1;
        }
        if (step + 1) % cfg.target_update_interval == 0 {
            target = online.clone();
        }
        if cfg.eval_interval > 0 && (step + 1) % cfg.eval_interval == 0 && step + 1 < cfg.total_env_steps {
            log_sweep(&online, step + 1, &mut log)?;
        }
    }
    log_sweep(&online, cfg.total_env_steps, &mut log)?;
    Ok(TrainOutcome { weights: online, log })
}

/// Observations visited by one task's rollouts; the mask-training dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct StateBuffer {
    pub context: TaskContext,
    pub observations: Vec<Observation>,
}

/// Runs epsilon-greedy rollouts of the frozen network under a fixed context
/// and keeps every pre-action observation until `n_states` are stored.
pub fn collect_states(
    weights: &FlatWeights,
    world: &GridWorld,
    context: &TaskContext,
    n_states: usize,
    epsilon: f64,
    seed: u64,
) -> Result<StateBuffer> {
    if n_states == 0 {
        return Err(Error::config("mask.states_per_task", "must be positive"));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::config("mask.collect_epsilon", "must lie in [0, 1]"));
    }
    check_net_matches_env(weights.spec(), world)?;
    let mut rng = seeds::rng(seed, seeds::stream::COLLECT, context.index() as u64);
    let mut ws = Workspace::new(weights.spec());
    let net = weights.network();
    let mut observations = Vec::with_capacity(n_states);
    'outer: loop {
        let (mut state, mut obs) = world.reset(context, rng.random())?;
        loop {
            let q = net.forward(obs.as_slice(), &mut ws);
            let a = epsilon_greedy(q, epsilon, &mut rng);
            observations.push(obs);
            if observations.len() == n_states {
                break 'outer;
            }
            let (_, done) = world.step_in_place(&mut state, Action::ALL[a])?;
            if done {
                break;
            }
            obs = world.observe(&state);
        }
    }
    Ok(StateBuffer {
        context: context.clone(),
        observations,
    })
}
