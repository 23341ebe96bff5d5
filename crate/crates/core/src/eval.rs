//! Accuracy and sparsity of a frozen backbone under fixed or routed head modes.

use serde::{Deserialize, Serialize};

use crate::attention::{head_slice, AttnMode, SparsityPattern};
use crate::autograd::{DTensor, Graph};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{assignments_from_grid, compute_esr_with_rho, compute_msr_hard};
use crate::model::{forward, Backbone, FixedModes, Forward, ForwardOptions, HeadController};
use crate::router::RouterParams;
use crate::routing::{ControlMode, RouterController};
use crate::tasks::{Sample, TaskBatch};

pub enum Routing<'a> {
    Fixed(&'a [Vec<AttnMode>]),
    Router(&'a RouterParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub task_id: String,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Mean over samples of the hard sparsity ratios.
    pub msr: f64,
    pub esr: f64,
    /// Head modes chosen for each sample, `[sample][layer][head]`.
    pub decisions: Vec<Vec<Vec<AttnMode>>>,
}

/// Pruning ratio each head would realize under SA for this sequence.
pub fn sa_rho(g: &Graph, fwd: &Forward, heads: usize, pattern: &SparsityPattern) -> Result<Vec<Vec<f64>>> {
    let len = g.shape(fwd.logits)[0];
    if let Some(r) = pattern.rho(len) {
        return Ok(vec![vec![r; heads]; fwd.keys.len()]);
    }
    fwd.queries
        .iter()
        .zip(&fwd.keys)
        .map(|(&q, &k)| {
            (0..heads)
                .map(|h| {
                    let qh = head_slice(g.value(q), heads, h)?;
                    let kh = head_slice(g.value(k), heads, h)?;
                    Ok(pattern.mask(&qh, &kh)?.rho())
                })
                .collect()
        })
        .collect()
}

/// Correct predictions over the labelled positions of one sample.
pub fn score(logits: &DTensor, sample: &Sample) -> (usize, usize) {
    let mut correct = 0;
    let mut total = 0;
    for (i, label) in sample.labelled() {
        let row = logits.row(i);
        let pred = (0..row.len())
            .reduce(|best, j| if row[j] > row[best] { j } else { best })
            .unwrap_or(0);
        correct += usize::from(pred == label);
        total += 1;
    }
    (correct, total)
}

fn run_graph(
    backbone: &Backbone,
    cfg: &RunConfig,
    tokens: &[usize],
    routing: &Routing,
    pattern: &SparsityPattern,
) -> Result<(Graph, Forward, Vec<Vec<AttnMode>>)> {
    let m = &cfg.model;
    let opts = ForwardOptions {
        sa_pattern: pattern,
        keep_attention: false,
    };
    let mut g = Graph::new();
    let bvars = backbone.register(&mut g, false);
    let (fwd, modes) = match routing {
        Routing::Fixed(grid) => {
            let mut ctl = FixedModes(grid.to_vec());
            let f = forward(&mut g, m, &bvars, tokens, &mut ctl as &mut dyn HeadController, &opts)?;
            (f, grid.to_vec())
        }
        Routing::Router(router) => {
            let rvars: Vec<_> = router.layers.iter().map(|r| r.register(&mut g, false)).collect();
            let mut ctl = RouterController::new(&rvars, m.heads, cfg.router.n_edge, ControlMode::Inference);
            let f = forward(&mut g, m, &bvars, tokens, &mut ctl, &opts)?;
            (f, ctl.decisions)
        }
    };
    Ok((g, fwd, modes))
}

/// Logits (`s x vocab`) and the head modes used for one sequence.
pub fn run_sequence(
    backbone: &Backbone,
    cfg: &RunConfig,
    tokens: &[usize],
    routing: &Routing,
) -> Result<(DTensor, Vec<Vec<AttnMode>>)> {
    let (g, fwd, modes) = run_graph(backbone, cfg, tokens, routing, &cfg.pattern.pattern())?;
    Ok((g.value(fwd.logits).clone(), modes))
}

pub fn evaluate(backbone: &Backbone, cfg: &RunConfig, batch: &TaskBatch, routing: &Routing) -> Result<EvalResult> {
    let m = &cfg.model;
    let pattern = cfg.pattern.pattern();
    let (mut correct, mut total) = (0, 0);
    let (mut msr, mut esr) = (0.0, 0.0);
    let mut decisions = Vec::with_capacity(batch.samples.len());
    for sample in &batch.samples {
        let (g, fwd, modes) = run_graph(backbone, cfg, &sample.tokens, routing, &pattern)?;
        let (c, t) = score(g.value(fwd.logits), sample);
        correct += c;
        total += t;
        let assignments = assignments_from_grid(&modes);
        msr += compute_msr_hard(&assignments, m.layers, m.heads)?;
        esr += compute_esr_with_rho(&assignments, &sa_rho(&g, &fwd, m.heads, &pattern)?)?;
        decisions.push(modes);
    }
    if total == 0 {
        return Err(Error::InvalidArgument("evaluation batch has no labelled positions".into()));
    }
    let n = batch.samples.len() as f64;
    Ok(EvalResult {
        task_id: batch.task_id.clone(),
        accuracy: correct as f64 / total as f64,
        correct,
        total,
        msr: msr / n,
        esr: esr / n,
        decisions,
    })
}
