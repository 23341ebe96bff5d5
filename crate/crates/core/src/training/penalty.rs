//! Router trained on the sparsity penalty alone, with the language loss held at zero.

use serde::{Deserialize, Serialize};

use super::lagrange::{objective, LagrangeState};
use super::optim::{AdamHyper, AdamW};
use crate::autograd::{DTensor, Graph};
use crate::config::LambdaUpdate;
use crate::error::{Error, Result};
use crate::metrics::compute_msr_soft;
use crate::rng::{stream, uniform_tensor};
use crate::router::{gumbel_soft_route_on_graph, harden, sample_noise, AnnealSchedule, LayerRouter};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub heads: usize,
    pub d_head: usize,
    pub hidden: usize,
    pub steps: usize,
    pub target: f64,
    pub router_lr: f64,
    pub reg_lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    /// Scale of the per-step jitter added to the fixed head features.
    pub jitter: f64,
    /// Trailing steps averaged into the reported ratio.
    pub tail: usize,
    pub anneal: AnnealSchedule,
    pub seed: u64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            heads: 8,
            d_head: 16,
            hidden: 64,
            steps: 500,
            target: 0.5,
            router_lr: 5e-4,
            reg_lr: 1e-3,
            betas: (0.9, 0.95),
            weight_decay: 0.1,
            jitter: 0.3,
            tail: 50,
            anneal: AnnealSchedule::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyReport {
    /// Mean hard sparsity ratio over the trailing window.
    pub msr: f64,
    pub trace: Vec<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Drives one layer router toward `cfg.target` using only the Lagrangian
/// penalty. Inputs are fixed unit-variance head features plus jitter.
pub fn pure_penalty_run(cfg: &PenaltyConfig) -> Result<PenaltyReport> {
    if cfg.steps == 0 || cfg.tail == 0 || cfg.tail > cfg.steps {
        return Err(Error::InvalidArgument(format!(
            "need 0 < tail ({}) <= steps ({})",
            cfg.tail, cfg.steps
        )));
    }
    if !(0.0..=1.0).contains(&cfg.target) {
        return Err(Error::InvalidArgument(format!("target {} outside [0, 1]", cfg.target)));
    }
    cfg.anneal.validate()?;
    let mut router = LayerRouter::init(&mut stream(cfg.seed, "penalty/router", 0), cfg.d_head, cfg.hidden);
    let hyper = AdamHyper {
        lr: cfg.router_lr,
        beta1: cfg.betas.0,
        beta2: cfg.betas.1,
        eps: 1e-8,
        weight_decay: cfg.weight_decay,
    };
    let sizes: Vec<usize> = router.tensors().iter().map(|t| t.numel()).collect();
    let mut opt = AdamW::new(hyper, &sizes);
    let mut lambdas = LagrangeState::new(
        &[("penalty", cfg.target)],
        cfg.reg_lr,
        LambdaUpdate::Adamw,
        cfg.betas,
        0.1,
        cfg.seed,
    );
    let a = 3f64.sqrt();
    let mut rng = stream(cfg.seed, "penalty/data", 0);
    let base = uniform_tensor(&mut rng, &[cfg.heads, cfg.d_head], -a, a);

    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let tau = cfg.anneal.tau(step as f64 / cfg.steps as f64)?;
        let jitter = uniform_tensor(&mut rng, &[cfg.heads, cfg.d_head], -a * cfg.jitter, a * cfg.jitter);
        let x: Vec<f64> = base.data().iter().zip(jitter.data()).map(|(b, j)| b + j).collect();
        let noise = sample_noise(&mut rng, cfg.heads);

        let mut g = Graph::new();
        let vars = router.register(&mut g, true);
        let x = g.constant(DTensor::new(vec![cfg.heads, cfg.d_head], x)?);
        let z = vars.logits(&mut g, x)?;
        let r_soft = gumbel_soft_route_on_graph(&mut g, z, Some(&noise), tau)?;
        let r_out = crate::router::ste_harden_on_graph(&mut g, r_soft)?;
        let msr = compute_msr_soft(&mut g, &[r_out])?;
        let hard = g.value(msr).item();
        let task = lambdas.get("penalty")?.clone();
        let zero = g.constant(DTensor::scalar(0.0));
        let (loss, _) = objective(&mut g, zero, msr, task.target, task.lambda1, task.lambda2)?;
        g.backward(loss)?;
        let grads: Vec<Vec<f64>> = vars
            .vars
            .iter()
            .map(|&v| g.grad(v).map_or_else(|| vec![0.0; g.value(v).numel()], <[f64]>::to_vec))
            .collect();
        opt.step(&mut router.tensors_mut(), &grads, 1.0)?;
        lambdas.update("penalty", hard - task.target, 1.0)?;
        debug_assert_eq!(
            harden(g.value(r_soft)).iter().filter(|m| m.is_sparse()).count() as f64 / cfg.heads as f64,
            hard
        );
        trace.push(hard);
    }
    let tail = &trace[trace.len() - cfg.tail..];
    let t = lambdas.get("penalty")?;
    Ok(PenaltyReport {
        msr: tail.iter().sum::<f64>() / tail.len() as f64,
        lambda1: t.lambda1,
        lambda2: t.lambda2,
        trace,
    })
}
