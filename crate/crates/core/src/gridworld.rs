//! Fully observable K-colour object-collection gridworld.
//!
//! Each episode places the agent and `objects_per_color` objects of every
//! colour on distinct cells. The active task (a [`TaskContext`]) names one
//! colour; walking onto an object of that colour ends the episode with
//! `correct_reward`, walking onto any other colour removes the object and
//! costs `wrong_pickup_penalty`. Every step costs `step_penalty`.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seeds;
use crate::{Error, Result};

/// Colour names for the first four tasks; later tasks are named `task<i>`.
pub const COLOR_NAMES: [&str; 4] = ["red", "blue", "purple", "grey"];

/// Largest grid side accepted by [`GridWorld::optimal_return_oracle`].
pub const ORACLE_MAX_SIDE: usize = 6;

/// Largest number of non-target objects the oracle enumerates removal
/// subsets over.
const ORACLE_MAX_WRONG_OBJECTS: usize = 12;

pub fn task_name(index: usize) -> String {
    COLOR_NAMES
        .get(index)
        .map(|s| (*s).to_string())
        .unwrap_or_else(|| format!("task{index}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub grid_width: usize,
    pub grid_height: usize,
    pub num_tasks: usize,
    pub objects_per_color: usize,
    pub step_penalty: f64,
    pub wrong_pickup_penalty: f64,
    pub correct_reward: f64,
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            grid_width: 5,
            grid_height: 5,
            num_tasks: 4,
            objects_per_color: 1,
            step_penalty: -0.01,
            wrong_pickup_penalty: -0.1,
            correct_reward: 1.0,
            max_steps: 50,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, value) in [
            ("grid_width", self.grid_width),
            ("grid_height", self.grid_height),
            ("num_tasks", self.num_tasks),
            ("objects_per_color", self.objects_per_color),
            ("max_steps", self.max_steps),
        ] {
            if value == 0 {
                return Err(Error::config(format!("env.{field}"), "must be positive"));
            }
        }
        if self.num_tasks > u8::MAX as usize {
            return Err(Error::config("env.num_tasks", "at most 255 tasks are supported"));
        }
        let cells = self.grid_width * self.grid_height;
        let needed = self.num_tasks * self.objects_per_color + 1;
        if cells < needed {
            return Err(Error::config(
                "env.grid_width",
                format!("grid has {cells} cells but the agent and all objects need {needed}"),
            ));
        }
        if self.max_steps < self.grid_width + self.grid_height {
            return Err(Error::config(
                "env.max_steps",
                format!(
                    "must be at least grid_width + grid_height = {}",
                    self.grid_width + self.grid_height
                ),
            ));
        }
        for (field, value) in [
            ("step_penalty", self.step_penalty),
            ("wrong_pickup_penalty", self.wrong_pickup_penalty),
            ("correct_reward", self.correct_reward),
        ] {
            if !value.is_finite() {
                return Err(Error::config(format!("env.{field}"), "must be finite"));
            }
        }
        if self.correct_reward <= 0.0 {
            return Err(Error::config("env.correct_reward", "must be positive"));
        }
        if self.step_penalty > 0.0 {
            return Err(Error::config("env.step_penalty", "must be <= 0"));
        }
        if self.wrong_pickup_penalty > 0.0 {
            return Err(Error::config("env.wrong_pickup_penalty", "must be <= 0"));
        }
        Ok(())
    }

    pub fn cell_count(&self) -> usize {
        self.grid_width * self.grid_height
    }

    /// Channels per cell: one per colour plus agent presence.
    pub fn channels(&self) -> usize {
        self.num_tasks + 1
    }

    pub fn observation_len(&self) -> usize {
        self.cell_count() * self.channels() + self.num_tasks
    }

    /// Index of the first context slot; context slots are the trailing
    /// `num_tasks` observation entries.
    pub fn context_offset(&self) -> usize {
        self.cell_count() * self.channels()
    }

    /// Analytic, placement-independent return bounds `(r_min, r_max)`.
    ///
    /// `r_max` is a goal reached in one step; `r_min` is every wrong object
    /// collected followed by a timeout.
    pub fn return_bounds(&self) -> (f64, f64) {
        let r_max = self.correct_reward + self.step_penalty;
        let wrong = ((self.num_tasks - 1) * self.objects_per_color) as f64;
        let r_min = self.max_steps as f64 * self.step_penalty + wrong * self.wrong_pickup_penalty;
        (r_min, r_max)
    }

    pub fn normalize_return(&self, ret: f64) -> f64 {
        let (lo, hi) = self.return_bounds();
        (ret - lo) / (hi - lo)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskContext {
    index: usize,
    num_tasks: usize,
}

impl TaskContext {
    pub fn new(index: usize, num_tasks: usize) -> Result<Self> {
        if index >= num_tasks {
            return Err(Error::TaskOutOfRange { index, num_tasks });
        }
        Ok(Self { index, num_tasks })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn vector(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.num_tasks];
        v[self.index] = 1.0;
        v
    }

    pub fn all(num_tasks: usize) -> Vec<TaskContext> {
        (0..num_tasks)
            .map(|index| TaskContext { index, num_tasks })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const COUNT: usize = 4;
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GridState {
    pub agent_pos: (usize, usize),
    /// Row-major, one entry per cell.
    pub object_map: Vec<Option<u8>>,
    pub steps_elapsed: usize,
    pub terminated: bool,
    pub context: TaskContext,
}

/// Dense binary observation: per cell `num_tasks` colour channels plus one
/// agent channel, followed by the context one-hot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub features: Vec<f64>,
}

impl Observation {
    pub fn as_slice(&self) -> &[f64] {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// The trailing `num_tasks` entries.
    pub fn context_slice(&self, num_tasks: usize) -> &[f64] {
        &self.features[self.features.len() - num_tasks..]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub state: GridState,
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
}

/// An environment definition. Holds no episode state, so one instance can
/// serve any number of concurrent episodes.
#[derive(Clone, Debug)]
pub struct GridWorld {
    config: EnvConfig,
}

impl GridWorld {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn context(&self, index: usize) -> Result<TaskContext> {
        TaskContext::new(index, self.config.num_tasks)
    }

    fn check_context(&self, context: &TaskContext) -> Result<()> {
        if context.num_tasks != self.config.num_tasks {
            return Err(Error::Dimension {
                what: "task context",
                expected: self.config.num_tasks,
                got: context.num_tasks,
            });
        }
        Ok(())
    }

    /// Places the agent, then every object, on uniformly random free cells
    /// by rejection sampling from the episode's RNG stream.
    pub fn reset(&self, context: &TaskContext, episode_seed: u64) -> Result<(GridState, Observation)> {
        self.check_context(context)?;
        let cfg = &self.config;
        let cells = cfg.cell_count();
        let mut rng = seeds::rng(episode_seed, 0, 0);
        let mut object_map = vec![None; cells];
        let agent_cell = rng.random_range(0..cells);
        for color in 0..cfg.num_tasks {
            for _ in 0..cfg.objects_per_color {
                loop {
                    let cell = rng.random_range(0..cells);
                    if cell != agent_cell && object_map[cell].is_none() {
                        object_map[cell] = Some(color as u8);
                        break;
                    }
                }
            }
        }
        let state = GridState {
            agent_pos: (agent_cell / cfg.grid_width, agent_cell % cfg.grid_width),
            object_map,
            steps_elapsed: 0,
            terminated: false,
            context: context.clone(),
        };
        let obs = self.observe(&state);
        Ok((state, obs))
    }

    /// True when the agent stands on an object of the active colour.
    pub fn at_goal(&self, state: &GridState) -> bool {
        let cell = state.agent_pos.0 * self.config.grid_width + state.agent_pos.1;
        state.object_map[cell] == Some(state.context.index() as u8)
    }

    /// Advances `state` by one action, returning `(reward, done)`.
    pub fn step_in_place(&self, state: &mut GridState, action: Action) -> Result<(f64, bool)> {
        if state.terminated {
            return Err(Error::EpisodeTerminated);
        }
        let cfg = &self.config;
        let (r, c) = state.agent_pos;
        let (r, c) = match action {
            Action::Up => (r.saturating_sub(1), c),
            Action::Down => ((r + 1).min(cfg.grid_height - 1), c),
            Action::Left => (r, c.saturating_sub(1)),
            Action::Right => (r, (c + 1).min(cfg.grid_width - 1)),
        };
        state.agent_pos = (r, c);
        state.steps_elapsed += 1;

        let mut reward = cfg.step_penalty;
        let mut done = false;
        let cell = r * cfg.grid_width + c;
        if let Some(color) = state.object_map[cell] {
            if color as usize == state.context.index {
                reward += cfg.correct_reward;
                done = true;
            } else {
                reward += cfg.wrong_pickup_penalty;
                state.object_map[cell] = None;
            }
        }
        if state.steps_elapsed >= cfg.max_steps {
            done = true;
        }
        state.terminated = done;
        Ok((reward, done))
    }

    pub fn step(&self, state: &GridState, action: Action) -> Result<StepOutcome> {
        let mut next = state.clone();
        let (reward, done) = self.step_in_place(&mut next, action)?;
        let observation = self.observe(&next);
        Ok(StepOutcome {
            state: next,
            observation,
            reward,
            done,
        })
    }

    pub fn observe(&self, state: &GridState) -> Observation {
        let mut features = vec![0.0; self.config.observation_len()];
        self.observe_into(state, &mut features);
        Observation { features }
    }

    pub fn observe_into(&self, state: &GridState, features: &mut [f64]) {
        let cfg = &self.config;
        let ch = cfg.channels();
        features.fill(0.0);
        for (cell, obj) in state.object_map.iter().enumerate() {
            if let Some(color) = obj {
                features[cell * ch + *color as usize] = 1.0;
            }
        }
        let (r, c) = state.agent_pos;
        features[(r * cfg.grid_width + c) * ch + cfg.num_tasks] = 1.0;
        features[cfg.context_offset() + state.context.index] = 1.0;
    }

    /// Recovers `(agent_pos, object_map, context)` from an observation.
    pub fn decode(&self, obs: &Observation) -> Result<((usize, usize), Vec<Option<u8>>, TaskContext)> {
        let cfg = &self.config;
        if obs.len() != cfg.observation_len() {
            return Err(Error::Dimension {
                what: "observation",
                expected: cfg.observation_len(),
                got: obs.len(),
            });
        }
        let ch = cfg.channels();
        let mut agent = None;
        let mut objects = vec![None; cfg.cell_count()];
        for (cell, slot) in objects.iter_mut().enumerate() {
            let chunk = &obs.features[cell * ch..(cell + 1) * ch];
            if chunk[cfg.num_tasks] == 1.0 {
                if agent.is_some() {
                    return Err(malformed_obs("more than one agent cell"));
                }
                agent = Some((cell / cfg.grid_width, cell % cfg.grid_width));
            }
            let mut colors = chunk[..cfg.num_tasks].iter().enumerate().filter(|(_, v)| **v == 1.0);
            if let Some((color, _)) = colors.next() {
                *slot = Some(color as u8);
            }
            if colors.next().is_some() {
                return Err(malformed_obs("cell carries two colours"));
            }
        }
        let ctx = obs.context_slice(cfg.num_tasks);
        let hot: Vec<usize> = ctx
            .iter()
            .enumerate()
            .filter(|(_, v)| **v == 1.0)
            .map(|(i, _)| i)
            .collect();
        if hot.len() != 1 {
            return Err(malformed_obs("context is not one-hot"));
        }
        let agent = agent.ok_or_else(|| malformed_obs("no agent cell"))?;
        Ok((agent, objects, TaskContext::new(hot[0], cfg.num_tasks)?))
    }

    /// Best achievable episode return from the seeded start state.
    ///
    /// Exact forward dynamic programming over `(agent cell, set of removed
    /// wrong-colour objects)` for every time step up to `max_steps`, so
    /// routes through wrong-colour objects and timeouts are both covered.
    pub fn optimal_return_oracle(&self, context: &TaskContext, episode_seed: u64) -> Result<f64> {
        let cfg = &self.config;
        if cfg.grid_width > ORACLE_MAX_SIDE || cfg.grid_height > ORACLE_MAX_SIDE {
            return Err(Error::OracleTooLarge {
                width: cfg.grid_width,
                height: cfg.grid_height,
                max: ORACLE_MAX_SIDE,
            });
        }
        let (start, _) = self.reset(context, episode_seed)?;
        self.optimal_return_from(&start)
    }

    /// [`optimal_return_oracle`](Self::optimal_return_oracle) from an
    /// arbitrary start state.
    pub fn optimal_return_from(&self, start: &GridState) -> Result<f64> {
        let cfg = &self.config;
        if cfg.grid_width > ORACLE_MAX_SIDE || cfg.grid_height > ORACLE_MAX_SIDE {
            return Err(Error::OracleTooLarge {
                width: cfg.grid_width,
                height: cfg.grid_height,
                max: ORACLE_MAX_SIDE,
            });
        }
        let context = &start.context;
        let wrong_cells: Vec<usize> = start
            .object_map
            .iter()
            .enumerate()
            .filter(|(_, o)| matches!(o, Some(c) if *c as usize != context.index))
            .map(|(i, _)| i)
            .collect();
        if wrong_cells.len() > ORACLE_MAX_WRONG_OBJECTS {
            return Err(Error::config(
                "env.objects_per_color",
                "too many objects for exhaustive search",
            ));
        }
        let wrong_bit: HashMap<usize, u32> = wrong_cells
            .iter()
            .enumerate()
            .map(|(bit, cell)| (*cell, bit as u32))
            .collect();
        let w = cfg.grid_width;
        let h = cfg.grid_height;

        // Standing still against a wall is always possible, so a timeout with
        // no pickups is the fallback.
        let remaining = cfg.max_steps.saturating_sub(start.steps_elapsed);
        let mut best = remaining as f64 * cfg.step_penalty;
        let mut frontier: HashMap<(usize, u32), f64> = HashMap::new();
        frontier.insert((start.agent_pos.0 * w + start.agent_pos.1, 0), 0.0);
        for _t in 0..remaining {
            let mut next: HashMap<(usize, u32), f64> = HashMap::new();
            for (&(cell, removed), &acc) in &frontier {
                let (r, c) = (cell / w, cell % w);
                for a in Action::ALL {
                    let (nr, nc) = match a {
                        Action::Up => (r.saturating_sub(1), c),
                        Action::Down => ((r + 1).min(h - 1), c),
                        Action::Left => (r, c.saturating_sub(1)),
                        Action::Right => (r, (c + 1).min(w - 1)),
                    };
                    let ncell = nr * w + nc;
                    let mut value = acc + cfg.step_penalty;
                    let mut nremoved = removed;
                    match start.object_map[ncell] {
                        Some(color) if color as usize == context.index => {
                            best = best.max(value + cfg.correct_reward);
                            continue;
                        }
                        Some(_) => {
                            let bit = 1u32 << wrong_bit[&ncell];
                            if removed & bit == 0 {
                                value += cfg.wrong_pickup_penalty;
                                nremoved |= bit;
                            }
                        }
                        None => {}
                    }
                    let e = next.entry((ncell, nremoved)).or_insert(f64::NEG_INFINITY);
                    if value > *e {
                        *e = value;
                    }
                }
            }
            frontier = next;
        }
        Ok(best)
    }
}

fn malformed_obs(reason: &str) -> Error {
    Error::Malformed {
        what: "observation",
        reason: reason.to_string(),
    }
}
