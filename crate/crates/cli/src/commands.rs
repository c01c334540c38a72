use std::path::{Path, PathBuf};

use ctxmask_core::analysis::{self, ContextLayout};
use ctxmask_core::dqn::{self, collect_states};
use ctxmask_core::gridworld::{task_name, GridWorld, TaskContext};
use ctxmask_core::masker::{self, MaskProvenance};
use ctxmask_core::persist::{self, Checkpoint, ExperimentConfig, MaskFile};
use ctxmask_core::qnet::FlatWeights;
use ctxmask_core::{Error, Execution, Result};

use crate::{Command, Common};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { common } => train(&common),
        Command::Prune {
            common,
            checkpoint,
            task,
            all_tasks,
        } => prune(&common, &checkpoint, task, all_tasks),
        Command::Analyze {
            common,
            checkpoint,
            masks,
            episodes,
        } => analyze(&common, &checkpoint, &masks, episodes),
        Command::Eval {
            common,
            checkpoint,
            mask,
            task,
            episodes,
        } => eval(&common, &checkpoint, mask.as_deref(), task, episodes),
    }
}

fn out_dir(common: &Common, cfg: &ExperimentConfig) -> PathBuf {
    common.out.clone().unwrap_or_else(|| cfg.output_dir.clone())
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    ExperimentConfig::load(&common.config)
}

/// Loads a checkpoint and checks it against the config's architecture.
fn load_checkpoint(cfg: &ExperimentConfig, path: &Path) -> Result<(Checkpoint, FlatWeights)> {
    let ck = Checkpoint::load(path)?;
    let expected = cfg.net_spec()?;
    if ck.net_spec != expected {
        return Err(Error::Provenance(format!(
            "checkpoint architecture {:?} ({} weights) does not match the config's {:?} ({} weights)",
            ck.net_spec,
            ck.net_spec.weight_count(),
            expected,
            expected.weight_count()
        )));
    }
    let weights = ck.weights()?;
    Ok((ck, weights))
}

fn train(common: &Common) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.dqn.seed = seed;
    }
    let out = out_dir(common, &cfg);
    let ck_path = out.join("checkpoint.json");
    let log_path = out.join("train_log.csv");
    persist::guard_outputs(&[ck_path.clone(), log_path.clone()], common.overwrite)?;

    let spec = cfg.net_spec()?;
    let outcome = dqn::train(&cfg.env, &spec, &cfg.dqn, Execution::default())?;
    let ck = Checkpoint::new(&outcome.weights, &cfg.env, &cfg.dqn, &outcome.log);
    persist::write_file(&ck_path, &ck.to_json()?)?;
    persist::write_file(&log_path, &persist::training_log_csv(&outcome.log)?)?;

    println!("checkpoint {} ({} weights)", ck.id()?, outcome.weights.len());
    for (k, r) in outcome.log.final_returns().iter().enumerate() {
        println!("  {:<8} normalized return {:.4}", task_name(k), r);
    }
    println!("wrote {} and {}", ck_path.display(), log_path.display());
    Ok(())
}

fn prune(common: &Common, checkpoint: &Path, task: Option<usize>, all_tasks: bool) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.mask.seed = seed;
    }
    let (ck, weights) = load_checkpoint(&cfg, checkpoint)?;
    let ck_id = ck.id()?;
    let world = GridWorld::new(cfg.env.clone())?;
    let k = cfg.env.num_tasks;
    let tasks: Vec<usize> = match (task, all_tasks) {
        (_, true) => (0..k).collect(),
        (Some(t), false) => vec![t],
        (None, false) => return Err(Error::config("--task", "pass --task <index> or --all-tasks")),
    };
    let contexts = tasks
        .iter()
        .map(|t| TaskContext::new(*t, k))
        .collect::<Result<Vec<_>>>()?;

    let out = out_dir(common, &cfg);
    let mask_paths: Vec<PathBuf> = tasks.iter().map(|t| out.join(format!("mask_task{t}.json"))).collect();
    let log_path = out.join("mask_log.csv");
    let mut all_paths = mask_paths.clone();
    all_paths.push(log_path.clone());
    persist::guard_outputs(&all_paths, common.overwrite)?;

    let buffers = contexts
        .iter()
        .map(|ctx| {
            collect_states(
                &weights,
                &world,
                ctx,
                cfg.mask.states_per_task,
                cfg.mask.collect_epsilon,
                cfg.mask.seed,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let runs = masker::learn_masks(&weights, &buffers, &cfg.mask, Execution::default())?;

    for (run, path) in runs.iter().zip(&mask_paths) {
        let file = MaskFile::new(&run.subnetwork.task, &run.logits, &ck_id, &cfg.mask);
        persist::write_file(path, &file.to_json()?)?;
        let last = run.log.epochs.last().expect("log has the initial record");
        println!(
            "  {:<8} density {:.4}  q_value_loss {:.3e}  -> {}",
            task_name(run.subnetwork.task.index()),
            run.subnetwork.density(),
            last.q_value_loss,
            path.display()
        );
    }
    let logs: Vec<_> = runs.iter().map(|r| r.log.clone()).collect();
    persist::write_file(&log_path, &persist::mask_log_csv(&logs)?)?;
    println!("wrote {}", log_path.display());
    Ok(())
}

fn pct(x: Option<f64>) -> String {
    x.map(|v| format!("{:.2}%", 100.0 * v)).unwrap_or_else(|| "n/a".into())
}

fn analyze(common: &Common, checkpoint: &Path, masks: &[PathBuf], episodes: Option<usize>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.eval.seed = seed;
    }
    if let Some(e) = episodes {
        cfg.eval.episodes = e;
    }
    let (_, weights) = load_checkpoint(&cfg, checkpoint)?;
    let files = masks.iter().map(|p| MaskFile::load(p)).collect::<Result<Vec<_>>>()?;
    if let Some(f) = files.iter().find(|f| f.checkpoint_id != files[0].checkpoint_id) {
        return Err(Error::Provenance(format!(
            "masks come from different checkpoints ({} vs {})",
            files[0].checkpoint_id, f.checkpoint_id
        )));
    }
    let subnets = files
        .iter()
        .map(|f| f.subnetwork(&weights))
        .collect::<Result<Vec<_>>>()?;

    let out = out_dir(common, &cfg);
    let report_path = out.join("report.json");
    let csv_path = out.join("return_matrix.csv");
    persist::guard_outputs(&[report_path.clone(), csv_path.clone()], common.overwrite)?;

    let mask_bits: Vec<Vec<bool>> = subnets.iter().map(|s| s.mask.clone()).collect();
    let taxonomy = analysis::taxonomy(&mask_bits)?;
    let context = analysis::context_stats(&mask_bits, weights.spec(), &ContextLayout::for_env(&cfg.env))?;
    let matrix = analysis::return_matrix(
        &weights,
        &subnets,
        &cfg.env,
        cfg.eval.episodes,
        cfg.eval.seed,
        Execution::default(),
    )?;
    let csv = matrix.to_csv()?;
    let report = analysis::report(taxonomy, context, matrix, &subnets)?;
    persist::write_file(&report_path, &persist::report_to_json(&report)?)?;
    persist::write_file(&csv_path, &csv)?;

    let t = &report.taxonomy;
    let active = t.fractions_of_active;
    println!("weights            {}", t.num_weights);
    println!("pruned (mean/task) {:.2}%", 100.0 * t.mean_pruned_fraction());
    println!("inactive (all)     {:.2}%", 100.0 * t.fractions_of_all.inactive);
    println!("globally shared    {} of active", pct(active.map(|a| a.globally_shared)));
    println!("partially shared   {} of active", pct(active.map(|a| a.partially_shared)));
    println!("task-specific      {} of active", pct(active.map(|a| a.task_specific)));
    println!(
        "context-connected  {} of task-specific",
        pct(report.context_stats.task_specific_context_fraction)
    );
    println!();
    print!("{csv}");
    println!("wrote {} and {}", report_path.display(), csv_path.display());
    Ok(())
}

fn eval(common: &Common, checkpoint: &Path, mask: Option<&Path>, task: usize, episodes: Option<usize>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.eval.seed = seed;
    }
    if let Some(e) = episodes {
        cfg.eval.episodes = e;
    }
    let (_, weights) = load_checkpoint(&cfg, checkpoint)?;
    let world = GridWorld::new(cfg.env.clone())?;
    let ctx = world.context(task)?;
    let (network, provenance, net) = match mask {
        Some(p) => {
            let file = MaskFile::load(p)?;
            let sub = file.subnetwork(&weights)?;
            let name = format!("subnet_{}", task_name(sub.task.index()));
            let prov: Option<MaskProvenance> = sub.provenance.clone();
            (name, prov, sub.masked_weights)
        }
        None => ("full".to_string(), None, weights.clone()),
    };
    let base = ctxmask_core::seeds::derive(cfg.eval.seed, ctxmask_core::seeds::stream::EVAL, 0);
    let mean = dqn::evaluate(&net, &world, &ctx, cfg.eval.episodes, base, Execution::default())?;
    let summary = serde_json::json!({
        "network": network,
        "task_index": task,
        "task_name": task_name(task),
        "episodes": cfg.eval.episodes,
        "seed": cfg.eval.seed,
        "mean_return": mean,
        "normalized_return": cfg.env.normalize_return(mean),
        "checkpoint_id": weights.digest(),
        "mask_config": provenance.map(|p| p.config),
    });
    println!("{summary}");
    Ok(())
}
