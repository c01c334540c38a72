//! Structural statistics over a set of per-task masks, and the cross-task
//! return matrix.

use serde::{Deserialize, Serialize};

use crate::dqn::{episode_seed, greedy_episode};
use crate::exec::Execution;
use crate::gridworld::{task_name, EnvConfig, GridWorld, TaskContext};
use crate::masker::{MaskProvenance, Subnetwork};
use crate::qnet::{FlatWeights, NetSpec};
use crate::seeds;
use crate::{Error, Result};

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightCategory {
    /// Off in every task.
    Inactive,
    /// On in every task (K >= 2).
    GloballyShared,
    /// On in at least two tasks but not all.
    PartiallyShared,
    /// On in exactly one task.
    TaskSpecific,
}

impl WeightCategory {
    pub const ALL: [WeightCategory; 4] = [
        WeightCategory::Inactive,
        WeightCategory::GloballyShared,
        WeightCategory::PartiallyShared,
        WeightCategory::TaskSpecific,
    ];

    /// Category of a weight that is on in `active` of `tasks` masks.
    /// "Exactly one" is checked first, so with one task every active
    /// weight is task-specific.
    pub fn from_active_count(active: usize, tasks: usize) -> Self {
        match active {
            0 => WeightCategory::Inactive,
            1 => WeightCategory::TaskSpecific,
            a if a == tasks => WeightCategory::GloballyShared,
            _ => WeightCategory::PartiallyShared,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub inactive: usize,
    pub globally_shared: usize,
    pub partially_shared: usize,
    pub task_specific: usize,
}

impl CategoryCounts {
    pub fn get(&self, c: WeightCategory) -> usize {
        match c {
            WeightCategory::Inactive => self.inactive,
            WeightCategory::GloballyShared => self.globally_shared,
            WeightCategory::PartiallyShared => self.partially_shared,
            WeightCategory::TaskSpecific => self.task_specific,
        }
    }

    fn bump(&mut self, c: WeightCategory) {
        match c {
            WeightCategory::Inactive => self.inactive += 1,
            WeightCategory::GloballyShared => self.globally_shared += 1,
            WeightCategory::PartiallyShared => self.partially_shared += 1,
            WeightCategory::TaskSpecific => self.task_specific += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.inactive + self.globally_shared + self.partially_shared + self.task_specific
    }

    pub fn active(&self) -> usize {
        self.total() - self.inactive
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryFractions {
    pub inactive: f64,
    pub globally_shared: f64,
    pub partially_shared: f64,
    pub task_specific: f64,
}

/// Fractions over the active (not-inactive) weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActiveFractions {
    pub globally_shared: f64,
    pub partially_shared: f64,
    pub task_specific: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightTaxonomy {
    pub num_tasks: usize,
    pub num_weights: usize,
    pub counts: CategoryCounts,
    /// Denominator N. `inactive` here is the pruned-in-every-task share.
    pub fractions_of_all: CategoryFractions,
    /// Denominator N minus inactive; `None` when nothing is active.
    pub fractions_of_active: Option<ActiveFractions>,
    /// Per task: fraction of N switched off in that task's mask.
    pub pruned_fraction_per_task: Vec<f64>,
}

impl WeightTaxonomy {
    /// Mean over tasks of the per-task pruned fraction.
    pub fn mean_pruned_fraction(&self) -> f64 {
        self.pruned_fraction_per_task.iter().sum::<f64>() / self.pruned_fraction_per_task.len() as f64
    }
}

fn check_masks(masks: &[Vec<bool>]) -> Result<usize> {
    let first = masks
        .first()
        .ok_or_else(|| Error::config("masks", "need at least one task mask"))?;
    let n = first.len();
    for m in masks {
        if m.len() != n {
            return Err(Error::Dimension {
                what: "task mask",
                expected: n,
                got: m.len(),
            });
        }
    }
    Ok(n)
}

/// Category of every weight index.
pub fn classify(masks: &[Vec<bool>]) -> Result<Vec<WeightCategory>> {
    let n = check_masks(masks)?;
    let k = masks.len();
    Ok((0..n)
        .map(|i| WeightCategory::from_active_count(masks.iter().filter(|m| m[i]).count(), k))
        .collect())
}

pub fn taxonomy(masks: &[Vec<bool>]) -> Result<WeightTaxonomy> {
    let categories = classify(masks)?;
    let n = categories.len();
    let mut counts = CategoryCounts::default();
    for c in &categories {
        counts.bump(*c);
    }
    let of_n = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    let active = counts.active();
    let fractions_of_active = (active > 0).then(|| ActiveFractions {
        globally_shared: counts.globally_shared as f64 / active as f64,
        partially_shared: counts.partially_shared as f64 / active as f64,
        task_specific: counts.task_specific as f64 / active as f64,
    });
    Ok(WeightTaxonomy {
        num_tasks: masks.len(),
        num_weights: n,
        fractions_of_all: CategoryFractions {
            inactive: of_n(counts.inactive),
            globally_shared: of_n(counts.globally_shared),
            partially_shared: of_n(counts.partially_shared),
            task_specific: of_n(counts.task_specific),
        },
        fractions_of_active,
        pruned_fraction_per_task: masks
            .iter()
            .map(|m| of_n(m.iter().filter(|on| !**on).count()))
            .collect(),
        counts,
    })
}

/// Where the context one-hot sits in the network input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextLayout {
    pub input_dim: usize,
    /// Context slots are the trailing `num_context` inputs.
    pub num_context: usize,
}

impl ContextLayout {
    pub fn for_env(env: &EnvConfig) -> Self {
        Self {
            input_dim: env.observation_len(),
            num_context: env.num_tasks,
        }
    }

    pub fn first_context_column(&self) -> usize {
        self.input_dim - self.num_context
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextConnectionStats {
    /// First-layer weights sourced from context columns: K * hidden_dims[0].
    pub context_weight_count: usize,
    /// Per category, how many of its weights are context-connected.
    pub context_connected: CategoryCounts,
    /// Context-connected share of the task-specific weights; `None` when
    /// there are no task-specific weights.
    pub task_specific_context_fraction: Option<f64>,
    /// `[task][slot]`: task-specific context weights of `task` attached to
    /// context slot `slot`.
    pub task_specific_by_slot: Vec<Vec<usize>>,
    /// `[task][slot]`: context weights retained by `task`'s mask attached to
    /// slot `slot`.
    pub retained_by_slot: Vec<Vec<usize>>,
}

impl ContextConnectionStats {
    /// Share of `task`'s retained context weights that attach to its own
    /// slot; `None` if it retains none.
    pub fn own_slot_share(&self, task: usize) -> Option<f64> {
        let row = &self.retained_by_slot[task];
        let total: usize = row.iter().sum();
        (total > 0).then(|| row[task] as f64 / total as f64)
    }
}

/// Flat indices of first-layer weights whose source is a context column.
pub fn context_weight_indices(spec: &NetSpec, layout: &ContextLayout) -> Result<Vec<(usize, usize)>> {
    if layout.num_context == 0 || layout.num_context > layout.input_dim {
        return Err(Error::config(
            "context layout",
            format!("{} context slots do not fit {} inputs", layout.num_context, layout.input_dim),
        ));
    }
    if layout.input_dim != spec.input_dim {
        return Err(Error::Dimension {
            what: "context layout input width",
            expected: spec.input_dim,
            got: layout.input_dim,
        });
    }
    let shape = spec.layer_shapes()[0];
    let first = layout.first_context_column();
    // (flat index, slot), ordered by index
    let mut out = Vec::with_capacity(shape.rows * layout.num_context);
    for r in 0..shape.rows {
        for slot in 0..layout.num_context {
            out.push((r * shape.cols + first + slot, slot));
        }
    }
    Ok(out)
}

pub fn context_stats(masks: &[Vec<bool>], spec: &NetSpec, layout: &ContextLayout) -> Result<ContextConnectionStats> {
    let n = check_masks(masks)?;
    if n != spec.weight_count() {
        return Err(Error::Dimension {
            what: "mask length vs network weights",
            expected: spec.weight_count(),
            got: n,
        });
    }
    let k = masks.len();
    let slots = layout.num_context;
    let categories = classify(masks)?;
    let indices = context_weight_indices(spec, layout)?;

    let mut context_connected = CategoryCounts::default();
    let mut task_specific_by_slot = vec![vec![0usize; slots]; k];
    let mut retained_by_slot = vec![vec![0usize; slots]; k];
    for &(i, slot) in &indices {
        context_connected.bump(categories[i]);
        for (t, m) in masks.iter().enumerate() {
            if m[i] {
                retained_by_slot[t][slot] += 1;
                if categories[i] == WeightCategory::TaskSpecific {
                    task_specific_by_slot[t][slot] += 1;
                }
            }
        }
    }
    let task_specific_total = categories
        .iter()
        .filter(|c| **c == WeightCategory::TaskSpecific)
        .count();
    Ok(ContextConnectionStats {
        context_weight_count: indices.len(),
        task_specific_context_fraction: (task_specific_total > 0)
            .then(|| context_connected.task_specific as f64 / task_specific_total as f64),
        context_connected,
        task_specific_by_slot,
        retained_by_slot,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnMatrix {
    pub row_labels: Vec<String>,
    pub column_labels: Vec<String>,
    /// `values[row][task]`, normalized average return.
    pub values: Vec<Vec<f64>>,
    pub mean_returns: Vec<Vec<f64>>,
    pub episodes_per_cell: usize,
    pub seed: u64,
}

impl ReturnMatrix {
    /// CSV with a header of task names and the network name in the first
    /// column.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["network".to_string()];
        header.extend(self.column_labels.iter().cloned());
        w.write_record(&header)?;
        for (label, row) in self.row_labels.iter().zip(&self.values) {
            let mut rec = vec![label.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Malformed {
            what: "return matrix csv",
            reason: e.to_string(),
        })?;
        String::from_utf8(bytes).map_err(|e| Error::Malformed {
            what: "return matrix csv",
            reason: e.to_string(),
        })
    }
}

/// Greedy evaluation of the full network and each subnetwork on every task.
/// Every row sees the same episode seeds for a given task.
pub fn return_matrix(
    full: &FlatWeights,
    subnets: &[Subnetwork],
    env_config: &EnvConfig,
    episodes: usize,
    seed: u64,
    exec: Execution,
) -> Result<ReturnMatrix> {
    if episodes == 0 {
        return Err(Error::config("eval.episodes", "must be at least 1"));
    }
    let world = GridWorld::new(env_config.clone())?;
    let k = env_config.num_tasks;
    let mut rows: Vec<&FlatWeights> = vec![full];
    rows.extend(subnets.iter().map(|s| &s.masked_weights));
    for r in &rows {
        if r.spec() != full.spec() {
            return Err(Error::Dimension {
                what: "subnetwork weights",
                expected: full.len(),
                got: r.len(),
            });
        }
    }
    let contexts = TaskContext::all(k);
    let base = seeds::derive(seed, seeds::stream::EVAL, 0);
    let cells = rows.len() * k * episodes;
    let returns = exec.try_map_range(cells, |idx| {
        let row = idx / (k * episodes);
        let task = (idx / episodes) % k;
        let e = idx % episodes;
        greedy_episode(rows[row], &world, &contexts[task], episode_seed(base, task, e))
    })?;
    let mut mean_returns = vec![vec![0.0; k]; rows.len()];
    for (row, means) in mean_returns.iter_mut().enumerate() {
        for (task, m) in means.iter_mut().enumerate() {
            let start = (row * k + task) * episodes;
            *m = returns[start..start + episodes].iter().sum::<f64>() / episodes as f64;
        }
    }
    let values = mean_returns
        .iter()
        .map(|r| r.iter().map(|v| env_config.normalize_return(*v)).collect())
        .collect();
    let mut row_labels = vec!["full".to_string()];
    row_labels.extend(subnets.iter().map(|s| format!("subnet_{}", task_name(s.task.index()))));
    Ok(ReturnMatrix {
        row_labels,
        column_labels: (0..k).map(task_name).collect(),
        values,
        mean_returns,
        episodes_per_cell: episodes,
        seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubnetReport {
    pub format_version: u32,
    pub checkpoint_id: String,
    pub task_indices: Vec<usize>,
    pub mask_provenance: Vec<MaskProvenance>,
    pub taxonomy: WeightTaxonomy,
    pub context_stats: ContextConnectionStats,
    pub return_matrix: ReturnMatrix,
}

/// Bundles the statistics after checking that every mask came from the
/// same checkpoint and that the pieces agree on the task count.
pub fn report(
    taxonomy: WeightTaxonomy,
    context_stats: ContextConnectionStats,
    return_matrix: ReturnMatrix,
    subnets: &[Subnetwork],
) -> Result<SubnetReport> {
    let provenance: Vec<MaskProvenance> = subnets
        .iter()
        .map(|s| {
            s.provenance
                .clone()
                .ok_or_else(|| Error::Provenance(format!("mask for task {} has no provenance", s.task.index())))
        })
        .collect::<Result<_>>()?;
    let checkpoint_id = provenance
        .first()
        .map(|p| p.checkpoint_id.clone())
        .ok_or_else(|| Error::Provenance("no subnetworks given".into()))?;
    if let Some(p) = provenance.iter().find(|p| p.checkpoint_id != checkpoint_id) {
        return Err(Error::Provenance(format!(
            "masks come from different checkpoints ({checkpoint_id} vs {})",
            p.checkpoint_id
        )));
    }
    if taxonomy.num_tasks != subnets.len()
        || context_stats.retained_by_slot.len() != subnets.len()
        || return_matrix.values.len() != subnets.len() + 1
    {
        return Err(Error::Provenance(
            "taxonomy, context statistics and return matrix disagree on the number of masks".into(),
        ));
    }
    Ok(SubnetReport {
        format_version: REPORT_FORMAT_VERSION,
        checkpoint_id,
        task_indices: subnets.iter().map(|s| s.task.index()).collect(),
        mask_provenance: provenance,
        taxonomy,
        context_stats,
        return_matrix,
    })
}
