//! Experiment config and on-disk formats.
//!
//! Configs are TOML. Checkpoints, mask files and reports are versioned JSON;
//! floats are written in shortest round-trip form, so every value reloads
//! bit for bit. Logs and the return matrix are CSV.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::analysis::{SubnetReport, REPORT_FORMAT_VERSION};
use crate::dqn::{DqnConfig, TrainingLog};
use crate::gridworld::{Action, EnvConfig, TaskContext};
use crate::masker::{MaskLogits, MaskProvenance, MaskTrainConfig, MaskTrainLog, Subnetwork};
use crate::qnet::{DenseLayer, FlatWeights, LayerShape, NetSpec};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const MASK_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub hidden_dims: Vec<usize>,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![64, 64],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 100, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub net: NetConfig,
    pub dqn: DqnConfig,
    pub mask: MaskTrainConfig,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            net: NetConfig::default(),
            dqn: DqnConfig::default(),
            mask: MaskTrainConfig::default(),
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Malformed {
            what: "config",
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Malformed {
            what: "config",
            reason: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.net_spec()?;
        self.dqn.validate()?;
        self.mask.validate()?;
        if self.eval.episodes == 0 {
            return Err(Error::config("eval.episodes", "must be at least 1"));
        }
        Ok(())
    }

    pub fn net_spec(&self) -> Result<NetSpec> {
        NetSpec::new(self.env.observation_len(), self.net.hidden_dims.clone(), Action::COUNT)
    }
}

/// Everything needed to regenerate a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainProvenance {
    pub env: EnvConfig,
    pub dqn: DqnConfig,
    pub seed: u64,
    pub final_normalized_returns: Vec<f64>,
    pub gradient_updates: usize,
    pub episodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub rows: usize,
    pub cols: usize,
    /// `rows` arrays of `cols` values.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub net_spec: NetSpec,
    pub layers: Vec<LayerRecord>,
    pub provenance: TrainProvenance,
}

impl Checkpoint {
    pub fn new(weights: &FlatWeights, env: &EnvConfig, dqn: &DqnConfig, log: &TrainingLog) -> Self {
        let layers = weights
            .unflatten()
            .into_iter()
            .map(|l| LayerRecord {
                rows: l.shape.rows,
                cols: l.shape.cols,
                weights: l.weights.chunks(l.shape.cols).map(<[f64]>::to_vec).collect(),
                bias: l.bias,
            })
            .collect();
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            net_spec: weights.spec().clone(),
            layers,
            provenance: TrainProvenance {
                env: env.clone(),
                dqn: dqn.clone(),
                seed: dqn.seed,
                final_normalized_returns: log.final_returns(),
                gradient_updates: log.gradient_updates,
                episodes: log.episodes,
            },
        }
    }

    pub fn weights(&self) -> Result<FlatWeights> {
        let shapes = self.net_spec.layer_shapes();
        if shapes.len() != self.layers.len() {
            return Err(Error::Dimension {
                what: "checkpoint layer count",
                expected: shapes.len(),
                got: self.layers.len(),
            });
        }
        let mut dense = Vec::with_capacity(self.layers.len());
        for (rec, shape) in self.layers.iter().zip(&shapes) {
            let declared = LayerShape {
                rows: rec.rows,
                cols: rec.cols,
            };
            if declared != *shape || rec.weights.len() != rec.rows || rec.weights.iter().any(|r| r.len() != rec.cols) {
                return Err(Error::Malformed {
                    what: "checkpoint",
                    reason: format!(
                        "layer declared {}x{} does not match its arrays or the {}x{} architecture",
                        rec.rows, rec.cols, shape.rows, shape.cols
                    ),
                });
            }
            dense.push(DenseLayer {
                shape: *shape,
                weights: rec.weights.concat(),
                bias: rec.bias.clone(),
            });
        }
        FlatWeights::flatten(&self.net_spec, &dense)
    }

    /// Content id: SHA-256 of the architecture and parameter bits.
    pub fn id(&self) -> Result<String> {
        Ok(self.weights()?.digest())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        check_version(s, "checkpoint", CHECKPOINT_FORMAT_VERSION)?;
        let ck: Self = serde_json::from_str(s)?;
        ck.weights()?;
        Ok(ck)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskFile {
    pub format_version: u32,
    pub task_index: usize,
    pub num_tasks: usize,
    pub checkpoint_id: String,
    pub logits: Vec<f64>,
    /// 0/1 per weight, derived from `logits`.
    pub mask: Vec<u8>,
    pub density: f64,
    pub mask_config: MaskTrainConfig,
}

impl MaskFile {
    pub fn new(task: &TaskContext, logits: &MaskLogits, checkpoint_id: &str, cfg: &MaskTrainConfig) -> Self {
        Self {
            format_version: MASK_FORMAT_VERSION,
            task_index: task.index(),
            num_tasks: task.num_tasks(),
            checkpoint_id: checkpoint_id.to_string(),
            logits: logits.values().to_vec(),
            mask: logits.hard_mask().iter().map(|m| u8::from(*m)).collect(),
            density: logits.density(),
            mask_config: cfg.clone(),
        }
    }

    pub fn logits(&self) -> MaskLogits {
        MaskLogits::new(self.logits.clone())
    }

    pub fn task(&self) -> Result<TaskContext> {
        TaskContext::new(self.task_index, self.num_tasks)
    }

    /// Rebuilds the subnetwork against `weights`, checking that the mask was
    /// learned on exactly these weights.
    pub fn subnetwork(&self, weights: &FlatWeights) -> Result<Subnetwork> {
        let id = weights.digest();
        if id != self.checkpoint_id {
            return Err(Error::Provenance(format!(
                "mask for task {} was learned on checkpoint {} but the given checkpoint is {}",
                self.task_index, self.checkpoint_id, id
            )));
        }
        let sub = crate::masker::extract(weights, &self.logits(), &self.task()?)?;
        Ok(sub.with_provenance(MaskProvenance {
            checkpoint_id: self.checkpoint_id.clone(),
            config: self.mask_config.clone(),
        }))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        check_version(s, "mask file", MASK_FORMAT_VERSION)?;
        let m: Self = serde_json::from_str(s)?;
        let derived: Vec<u8> = m.logits.iter().map(|l| u8::from(*l > 0.0)).collect();
        if derived != m.mask {
            return Err(Error::Malformed {
                what: "mask file",
                reason: "stored mask disagrees with its logits".into(),
            });
        }
        m.task()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read(path)?)
    }
}

pub fn report_to_json(report: &SubnetReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)?)
}

pub fn report_from_json(s: &str) -> Result<SubnetReport> {
    check_version(s, "report", REPORT_FORMAT_VERSION)?;
    Ok(serde_json::from_str(s)?)
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

fn check_version(s: &str, what: &'static str, supported: u32) -> Result<()> {
    let probe: VersionProbe = serde_json::from_str(s).map_err(|e| Error::Malformed {
        what,
        reason: format!("cannot read format_version: {e}"),
    })?;
    if probe.format_version > supported {
        return Err(Error::UnsupportedVersion {
            what,
            found: probe.format_version,
            supported,
        });
    }
    Ok(())
}

pub fn training_log_csv(log: &TrainingLog) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "task_index", "normalized_return"])?;
    for e in &log.entries {
        w.write_record([e.step.to_string(), e.task_index.to_string(), e.normalized_return.to_string()])?;
    }
    finish_csv(w)
}

pub fn mask_log_csv(logs: &[MaskTrainLog]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "task_index",
        "epoch",
        "q_value_loss",
        "sparsity_loss",
        "total",
        "density",
        "sparsity_normalizer",
    ])?;
    for log in logs {
        for e in &log.epochs {
            w.write_record([
                log.task_index.to_string(),
                e.epoch.to_string(),
                e.q_value_loss.to_string(),
                e.sparsity_loss.to_string(),
                e.total.to_string(),
                e.density.to_string(),
                log.sparsity_normalizer.to_string(),
            ])?;
        }
    }
    finish_csv(w)
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Malformed {
        what: "csv",
        reason: e.to_string(),
    })?;
    String::from_utf8(bytes).map_err(|e| Error::Malformed {
        what: "csv",
        reason: e.to_string(),
    })
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Fails if any path exists and `overwrite` is false.
pub fn guard_outputs(paths: &[PathBuf], overwrite: bool) -> Result<()> {
    if overwrite {
        return Ok(());
    }
    match paths.iter().find(|p| p.exists()) {
        Some(p) => Err(Error::WouldOverwrite(p.clone())),
        None => Ok(()),
    }
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Reads a JSON file into `T`.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&read(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = ExperimentConfig::from_toml_str("[env]\ngrid_width = 6\n[dqn]\nseed = 3\n").unwrap();
        assert_eq!(cfg.env.grid_width, 6);
        assert_eq!(cfg.env.grid_height, 5);
        assert_eq!(cfg.dqn.seed, 3);
        assert_eq!(cfg.net.hidden_dims, vec![64, 64]);
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn bad_config_names_field() {
        let err = ExperimentConfig::from_toml_str("[dqn]\ngamma = 1.5\n").unwrap_err();
        assert!(err.to_string().contains("dqn.gamma"), "{err}");
        let err = ExperimentConfig::from_toml_str("[env]\ngrid_widht = 5\n").unwrap_err();
        assert!(err.to_string().contains("grid_widht"), "{err}");
        let err = ExperimentConfig::from_toml_str("[mask]\nlambda = \"big\"\n").unwrap_err();
        assert!(err.to_string().contains("lambda"), "{err}");
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let cfg = ExperimentConfig::default();
        let spec = cfg.net_spec().unwrap();
        let w = FlatWeights::init(&spec, 11).unwrap();
        let ck = Checkpoint::new(&w, &cfg.env, &cfg.dqn, &TrainingLog::default());
        let text = ck.to_json().unwrap();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.weights().unwrap(), w);
        assert_eq!(back.to_json().unwrap(), text);
        assert_eq!(back.id().unwrap(), w.digest());
    }

    #[test]
    fn newer_versions_fail_loudly() {
        let text = r#"{"format_version": 99, "whatever": 1}"#;
        assert!(matches!(Checkpoint::from_json(text), Err(Error::UnsupportedVersion { found: 99, .. })));
        assert!(matches!(MaskFile::from_json(text), Err(Error::UnsupportedVersion { .. })));
        assert!(matches!(report_from_json(text), Err(Error::UnsupportedVersion { .. })));
    }

    #[test]
    fn mask_file_round_trip_and_provenance() {
        let spec = NetSpec::new(6, vec![3], 4).unwrap();
        let w = FlatWeights::init(&spec, 2).unwrap();
        let task = TaskContext::new(1, 2).unwrap();
        let logits = crate::masker::init_logits(w.len(), 0.5, 3).unwrap();
        let mf = MaskFile::new(&task, &logits, &w.digest(), &MaskTrainConfig::default());
        let back = MaskFile::from_json(&mf.to_json().unwrap()).unwrap();
        assert_eq!(back, mf);
        assert_eq!(back.logits(), logits);
        let sub = back.subnetwork(&w).unwrap();
        assert_eq!(sub.mask, logits.hard_mask());
        let other = FlatWeights::init(&spec, 3).unwrap();
        assert!(matches!(back.subnetwork(&other), Err(Error::Provenance(_))));

        let mut tampered = mf.clone();
        tampered.mask[0] ^= 1;
        assert!(MaskFile::from_json(&tampered.to_json().unwrap()).is_err());
    }

    #[test]
    fn output_guard() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.json");
        guard_outputs(&[p.clone()], false).unwrap();
        write_file(&p, "{}").unwrap();
        assert!(matches!(guard_outputs(&[p.clone()], false), Err(Error::WouldOverwrite(_))));
        guard_outputs(&[p], true).unwrap();
    }
}
