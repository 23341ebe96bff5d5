use serde::{Deserialize, Serialize};

use super::optim::{AdamHyper, AdamW};
use crate::attention::AttnMode;
use crate::autograd::{Graph, Var};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, Routing};
use crate::model::{forward, Backbone, BackboneVars, FixedModes, ForwardOptions, HeadController};
use crate::tasks::{Sample, TaskKind, TaskSpec};

/// Mean cross entropy over every labelled position of `samples`, whose
/// logits are `logits[i]`.
pub fn labelled_cross_entropy(g: &mut Graph, logits: &[Var], samples: &[Sample]) -> Result<Var> {
    let mut rows = Vec::with_capacity(logits.len());
    let mut labels = Vec::new();
    for (&lo, s) in logits.iter().zip(samples) {
        let (idx, lab): (Vec<usize>, Vec<usize>) = s.labelled().unzip();
        if idx.is_empty() {
            continue;
        }
        rows.push(g.select_rows(lo, &idx)?);
        labels.extend(lab);
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument("batch has no labelled positions".into()));
    }
    let all = g.concat_rows(&rows)?;
    g.cross_entropy(all, &labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub step: usize,
    pub loss: f64,
    pub needle_accuracy: Option<f64>,
    pub local_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub needle_accuracy: f64,
    pub local_accuracy: f64,
    pub history: Vec<PretrainLog>,
}

/// Trains the backbone under full attention on both tasks until both clear
/// the accuracy floor on a held-out batch.
pub fn pretrain_backbone(cfg: &RunConfig) -> Result<(Backbone, PretrainReport)> {
    cfg.validate()?;
    let p = &cfg.pretrain;
    let mut backbone = Backbone::init(&cfg.model, cfg.seed);
    let sizes: Vec<usize> = backbone.tensors_mut().iter().map(|t| t.numel()).collect();
    let mut opt = AdamW::new(AdamHyper::adam(p.lr), &sizes);
    let specs: Vec<TaskSpec> = TaskKind::ALL.iter().map(|&k| TaskSpec::new(k, cfg)).collect();
    let held_out = specs
        .iter()
        .map(|s| s.batch(cfg.seed, "pretrain-eval", 0, p.eval_samples))
        .collect::<Result<Vec<_>>>()?;
    let full = vec![vec![AttnMode::Full; cfg.model.heads]; cfg.model.layers];
    let pattern = cfg.pattern.pattern();
    let opts = ForwardOptions {
        sa_pattern: &pattern,
        keep_attention: false,
    };

    let mut history = Vec::new();
    let (mut needle, mut local) = (0.0, 0.0);
    for step in 0..p.max_steps {
        let mut g = Graph::new();
        let vars = backbone.register(&mut g, true);
        let mut loss: Option<Var> = None;
        for spec in &specs {
            let batch = spec.batch(cfg.seed, "pretrain", step as u64, p.batch_per_task)?;
            let logits = batch
                .samples
                .iter()
                .map(|s| {
                    let mut ctl = FixedModes(full.clone());
                    Ok(forward(&mut g, &cfg.model, &vars, &s.tokens, &mut ctl as &mut dyn HeadController, &opts)?.logits)
                })
                .collect::<Result<Vec<_>>>()?;
            let ce = labelled_cross_entropy(&mut g, &logits, &batch.samples)?;
            loss = Some(match loss {
                None => ce,
                Some(l) => g.add(l, ce)?,
            });
        }
        let loss = loss.expect("at least one task");
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("pretraining loss {value}"),
            });
        }
        g.backward(loss)?;
        let grads = grads_of(&g, &vars);
        opt.step(&mut backbone.tensors_mut(), &grads, 1.0)?;

        let mut log = PretrainLog {
            step,
            loss: value,
            needle_accuracy: None,
            local_accuracy: None,
        };
        if (step + 1) % p.eval_every == 0 || step + 1 == p.max_steps {
            needle = evaluate(&backbone, cfg, &held_out[0], &Routing::Fixed(&full))?.accuracy;
            local = evaluate(&backbone, cfg, &held_out[1], &Routing::Fixed(&full))?.accuracy;
            log.needle_accuracy = Some(needle);
            log.local_accuracy = Some(local);
            history.push(log);
            if step + 1 >= p.min_steps && needle >= p.accuracy_floor && local >= p.accuracy_floor {
                let report = PretrainReport {
                    steps: step + 1,
                    needle_accuracy: needle,
                    local_accuracy: local,
                    history,
                };
                return Ok((backbone, report));
            }
        } else {
            history.push(log);
        }
    }
    Err(Error::PretrainBudget {
        steps: p.max_steps,
        needle,
        local,
    })
}

fn grads_of(g: &Graph, vars: &BackboneVars) -> Vec<Vec<f64>> {
    vars.all()
        .into_iter()
        .map(|v| match g.grad(v) {
            Some(gr) => gr.to_vec(),
            None => vec![0.0; g.value(v).numel()],
        })
        .collect()
}
