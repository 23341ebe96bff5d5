//! End-to-end runs writing logs and checkpoints into an output directory.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::checkpoint::{Checkpoint, LambdaEntry};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Backbone;
use crate::router::RouterParams;
use crate::tasks::{TaskBatch, TaskKind, TaskSpec};
use crate::training::{pretrain_backbone, train_run, LagrangeState, MetricsRecord, PretrainReport, TrainState};

pub const PRETRAIN_LOG: &str = "pretrain.jsonl";
pub const METRICS_LOG: &str = "metrics.jsonl";
pub const BACKBONE_DIR: &str = "backbone";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Held-out evaluation batches, one per task.
pub fn eval_batches(cfg: &RunConfig) -> Result<Vec<TaskBatch>> {
    TaskKind::ALL
        .iter()
        .map(|&k| TaskSpec::new(k, cfg).batch(cfg.seed, "eval", 0, cfg.eval.samples))
        .collect()
}

/// Needle sequences used for retrieval scoring.
pub fn probe_batch(cfg: &RunConfig) -> Result<TaskBatch> {
    TaskSpec::new(TaskKind::Needle, cfg).batch(cfg.seed, "probe", 0, cfg.eval.samples)
}

pub fn lambda_entries(state: &LagrangeState) -> BTreeMap<String, LambdaEntry> {
    state
        .tasks
        .iter()
        .map(|(id, t)| {
            (
                id.clone(),
                LambdaEntry {
                    target: t.target,
                    lambda1: t.lambda1,
                    lambda2: t.lambda2,
                },
            )
        })
        .collect()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

pub fn metrics_path(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.paths.log_path.clone().unwrap_or_else(|| out.join(METRICS_LOG))
}

pub fn checkpoint_path(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.paths.checkpoint_dir.clone().unwrap_or_else(|| out.join(CHECKPOINT_DIR))
}

/// Pretrains the backbone, writing its eval history and a backbone-only checkpoint.
pub fn run_pretrain(cfg: &RunConfig, out: &Path) -> Result<(Backbone, PretrainReport)> {
    let (backbone, report) = pretrain_backbone(cfg)?;
    let mut w = create(&out.join(PRETRAIN_LOG))?;
    for rec in &report.history {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Checkpoint::new(cfg.clone(), backbone.clone(), "adam", report.steps).save(&out.join(BACKBONE_DIR))?;
    Ok((backbone, report))
}

pub struct RouterRun {
    pub router: RouterParams,
    pub state: TrainState,
    pub records: Vec<MetricsRecord>,
    pub checkpoint: PathBuf,
}

/// Trains the router on a frozen backbone, streaming the metrics log and
/// saving backbone plus router.
pub fn run_router(cfg: &RunConfig, backbone: &Backbone, out: &Path) -> Result<RouterRun> {
    let mut w = create(&metrics_path(cfg, out))?;
    let (router, state, records) = train_run(backbone, cfg, Some(&mut w))?;
    w.flush()?;
    let mut ckpt = Checkpoint::new(cfg.clone(), backbone.clone(), "adamw", state.step);
    ckpt.router = Some(router.clone());
    ckpt.lambdas = lambda_entries(&state.lambdas);
    let checkpoint = ckpt.save(&checkpoint_path(cfg, out))?;
    Ok(RouterRun {
        router,
        state,
        records,
        checkpoint,
    })
}

/// Pretraining followed by router training.
pub fn run_full(cfg: &RunConfig, out: &Path) -> Result<(PretrainReport, RouterRun)> {
    let (backbone, report) = run_pretrain(cfg, out)?;
    Ok((report, run_router(cfg, &backbone, out)?))
}

/// Rejects a checkpoint whose model shape differs from `cfg`.
pub fn check_model(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<()> {
    if cfg.model != ckpt.config.model {
        return Err(Error::Config(format!(
            "model section differs from the checkpoint's ({:?} vs {:?})",
            cfg.model, ckpt.config.model
        )));
    }
    Ok(())
}
