use std::io::Write;

use serde::{Deserialize, Serialize};

use super::lagrange::{objective, LagrangeState};
use super::optim::{warmup_cosine, AdamHyper, AdamW};
use super::pretrain::labelled_cross_entropy;
use crate::autograd::{Graph, Var};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::sa_rho;
use crate::metrics::{assignments_from_grid, compute_esr_with_rho, compute_msr_hard, compute_msr_soft};
use crate::model::{forward, Backbone, ForwardOptions};
use crate::rng::stream;
use crate::router::{sample_noise, RouterParams};
use crate::routing::{ControlMode, RouterController};
use crate::tasks::{Regime, TaskBatch, TaskKind, TaskSpec};

/// Mutable state of a router training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub total_steps: usize,
    pub tau: f64,
    pub lambdas: LagrangeState,
    pub router_opt: AdamW,
    pub seed: u64,
}

impl TrainState {
    pub fn new(cfg: &RunConfig, router: &RouterParams) -> Self {
        let t = &cfg.train;
        let targets: Vec<(&str, f64)> = TaskKind::ALL
            .iter()
            .map(|&k| (k.id(), target_for(cfg, k.regime())))
            .collect();
        let lambdas = LagrangeState::new(
            &targets,
            t.reg_lr,
            t.lambda_update,
            (t.beta1, t.beta2),
            t.lambda_init_max,
            cfg.seed,
        );
        let hyper = AdamHyper {
            lr: t.router_lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: 1e-8,
            weight_decay: t.weight_decay,
        };
        let sizes: Vec<usize> = router.tensors().iter().map(|t| t.numel()).collect();
        Self {
            step: 0,
            total_steps: t.steps,
            tau: cfg.router.anneal.tau_init,
            lambdas,
            router_opt: AdamW::new(hyper, &sizes),
            seed: cfg.seed,
        }
    }
}

pub fn target_for(cfg: &RunConfig, regime: Regime) -> f64 {
    match regime {
        Regime::Robust => cfg.train.target_robust,
        Regime::Sensitive => cfg.train.target_sensitive,
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub task_id: String,
    pub lm_loss: f64,
    pub reg_loss: f64,
    /// Realized hard ratio over the batch.
    pub msr: f64,
    pub esr: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
}

struct TaskPass {
    lm: Var,
    r_outs: Vec<Var>,
    msr_hard: f64,
    esr: f64,
}

/// One optimizer step of the router on a batch per task; the backbone
/// stays frozen. Each task contributes its own LM loss and regularizer.
pub fn train_step(
    backbone: &Backbone,
    router: &mut RouterParams,
    state: &mut TrainState,
    cfg: &RunConfig,
    batches: &[TaskBatch],
) -> Result<Vec<MetricsRecord>> {
    let m = &cfg.model;
    let step = state.step;
    let progress = if state.total_steps == 0 {
        1.0
    } else {
        (step as f64 / state.total_steps as f64).min(1.0)
    };
    let tau = cfg.router.anneal.tau(progress)?;
    let lr_scale = warmup_cosine(step, state.total_steps.max(1), cfg.train.warmup_ratio);
    let pattern = cfg.pattern.pattern();
    let opts = ForwardOptions {
        sa_pattern: &pattern,
        keep_attention: false,
    };

    let mut g = Graph::new();
    let bvars = backbone.register(&mut g, false);
    let rvars: Vec<_> = router.layers.iter().map(|r| r.register(&mut g, true)).collect();
    let mut noise_rng = stream(state.seed, "router-noise", step as u64);
    let mut passes = Vec::with_capacity(batches.len());
    for batch in batches {
        let mut logits = Vec::with_capacity(batch.samples.len());
        let mut r_outs = Vec::new();
        let (mut msr_hard, mut esr) = (0.0, 0.0);
        for sample in &batch.samples {
            let noise = (0..m.layers).map(|_| sample_noise(&mut noise_rng, m.heads)).collect();
            let mut ctl = RouterController::new(&rvars, m.heads, cfg.router.n_edge, ControlMode::Train { tau, noise });
            let fwd = forward(&mut g, m, &bvars, &sample.tokens, &mut ctl, &opts)?;
            let assignments = assignments_from_grid(&ctl.decisions);
            msr_hard += compute_msr_hard(&assignments, m.layers, m.heads)?;
            esr += compute_esr_with_rho(&assignments, &sa_rho(&g, &fwd, m.heads, &pattern)?)?;
            r_outs.extend(ctl.r_outs);
            logits.push(fwd.logits);
        }
        let n = batch.samples.len() as f64;
        passes.push(TaskPass {
            lm: labelled_cross_entropy(&mut g, &logits, &batch.samples)?,
            r_outs,
            msr_hard: msr_hard / n,
            esr: esr / n,
        });
    }

    let mut total: Option<Var> = None;
    let mut parts = Vec::with_capacity(batches.len());
    for (batch, pass) in batches.iter().zip(&passes) {
        let task = state.lambdas.get(&batch.task_id)?;
        let msr_soft = compute_msr_soft(&mut g, &pass.r_outs)?;
        let (loss, reg) = objective(&mut g, pass.lm, msr_soft, task.target, task.lambda1, task.lambda2)?;
        let (lm_value, reg_value) = (g.value(pass.lm).item(), g.value(reg).item());
        if !(lm_value.is_finite() && reg_value.is_finite()) {
            return Err(Error::Diverged {
                step,
                detail: format!("task {}: lm loss {lm_value}, regularizer {reg_value}", batch.task_id),
            });
        }
        parts.push((lm_value, reg_value, task.target));
        total = Some(match total {
            None => loss,
            Some(t) => g.add(t, loss)?,
        });
    }
    let total = total.ok_or_else(|| Error::InvalidArgument("train_step needs at least one batch".into()))?;
    g.backward(total)?;
    let grads: Vec<Vec<f64>> = rvars
        .iter()
        .flat_map(|r| r.vars)
        .map(|v| g.grad(v).map_or_else(|| vec![0.0; g.value(v).numel()], <[f64]>::to_vec))
        .collect();
    if grads.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Diverged {
            step,
            detail: "non-finite router gradient".into(),
        });
    }
    state.router_opt.step(&mut router.tensors_mut(), &grads, lr_scale)?;

    let mut records = Vec::with_capacity(batches.len());
    for ((batch, pass), (lm_loss, reg_loss, target)) in batches.iter().zip(&passes).zip(parts) {
        state.lambdas.update(&batch.task_id, pass.msr_hard - target, lr_scale)?;
        let after = state.lambdas.get(&batch.task_id)?;
        records.push(MetricsRecord {
            step,
            task_id: batch.task_id.clone(),
            lm_loss,
            reg_loss,
            msr: pass.msr_hard,
            esr: pass.esr,
            lambda1: after.lambda1,
            lambda2: after.lambda2,
            tau,
        });
    }
    state.step += 1;
    state.tau = tau;
    Ok(records)
}

/// Trains a fresh router against a frozen backbone on every task each step. Records are written as JSON lines to `log` when given.
pub fn train_run(
    backbone: &Backbone,
    cfg: &RunConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<(RouterParams, TrainState, Vec<MetricsRecord>)> {
    cfg.validate()?;
    let m = &cfg.model;
    let mut router = RouterParams::init(cfg.seed, m.layers, m.d_head, cfg.router_hidden());
    let mut state = TrainState::new(cfg, &router);
    let specs: Vec<TaskSpec> = TaskKind::ALL.iter().map(|&k| TaskSpec::new(k, cfg)).collect();
    let mut records = Vec::with_capacity(cfg.train.steps);
    for step in 0..cfg.train.steps {
        let batches = specs
            .iter()
            .map(|spec| spec.batch(cfg.seed, "router", step as u64, cfg.train.batch))
            .collect::<Result<Vec<_>>>()?;
        for rec in train_step(backbone, &mut router, &mut state, cfg, &batches)? {
            if let Some(w) = log.as_mut() {
                serde_json::to_writer(&mut *w, &rec)?;
                w.write_all(b"\n")?;
            }
            records.push(rec);
        }
    }
    Ok((router, state, records))
}
