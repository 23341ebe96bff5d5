use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::optim::{AdamHyper, AdamW};
use crate::autograd::{Graph, Var};
use crate::config::LambdaUpdate;
use crate::error::{Error, Result};
use crate::rng::stream;

/// `lm + lambda1 * d + lambda2 * d^2` with `d = msr - target`; the
/// multipliers enter as constants.
pub fn objective(g: &mut Graph, lm: Var, msr: Var, target: f64, lambda1: f64, lambda2: f64) -> Result<(Var, Var)> {
    let d = g.add_scalar(msr, -target)?;
    let lin = g.scale(d, lambda1)?;
    let sq = g.mul(d, d)?;
    let quad = g.scale(sq, lambda2)?;
    let reg = g.add(lin, quad)?;
    Ok((g.add(lm, reg)?, reg))
}

/// Multipliers and sparsity target for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLambda {
    pub target: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub optimizer: Option<AdamW>,
}

/// Per-task multipliers, updated by gradient ascent on the realized gap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagrangeState {
    pub eta: f64,
    pub update: LambdaUpdate,
    pub tasks: BTreeMap<String, TaskLambda>,
}

impl LagrangeState {
    /// Multipliers start uniform in `[0, init_max]` from the seed.
    pub fn new(
        targets: &[(&str, f64)],
        eta: f64,
        update: LambdaUpdate,
        betas: (f64, f64),
        init_max: f64,
        seed: u64,
    ) -> Self {
        let tasks = targets
            .iter()
            .map(|&(id, target)| {
                let mut rng = stream(seed, &format!("lambda/{id}"), 0);
                let mut draw = || if init_max > 0.0 { rng.gen_range(0.0..init_max) } else { 0.0 };
                let lambda1 = draw();
                let lambda2 = draw();
                let optimizer = (update == LambdaUpdate::Adamw).then(|| {
                    let hyper = AdamHyper {
                        beta1: betas.0,
                        beta2: betas.1,
                        ..AdamHyper::adam(eta)
                    };
                    AdamW::new(hyper, &[1, 1])
                });
                (
                    id.to_string(),
                    TaskLambda {
                        target,
                        lambda1,
                        lambda2,
                        optimizer,
                    },
                )
            })
            .collect();
        Self { eta, update, tasks }
    }

    pub fn get(&self, task_id: &str) -> Result<&TaskLambda> {
        self.tasks.get(task_id).ok_or_else(|| Error::UnknownTask(task_id.to_string()))
    }

    /// Ascent on `(lambda1, lambda2)` with gradient `(d, d^2)`; `lambda2`
    /// is clamped at zero afterwards.
    pub fn update(&mut self, task_id: &str, l_diff: f64, lr_scale: f64) -> Result<()> {
        let eta = self.eta * lr_scale;
        let t = self
            .tasks
            .get_mut(task_id)
            .ok_or_else(|| Error::UnknownTask(task_id.to_string()))?;
        match &mut t.optimizer {
            None => {
                t.lambda1 += eta * l_diff;
                t.lambda2 += eta * l_diff * l_diff;
            }
            Some(opt) => {
                let mut p = [t.lambda1, t.lambda2];
                opt.ascend(&mut p, &[l_diff, l_diff * l_diff], lr_scale)?;
                [t.lambda1, t.lambda2] = p;
            }
        }
        t.lambda2 = t.lambda2.max(0.0);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::DTensor;

    fn plain(l1: f64, l2: f64) -> LagrangeState {
        let mut s = LagrangeState::new(&[("a", 0.7)], 1e-3, LambdaUpdate::Plain, (0.9, 0.95), 0.0, 0);
        let t = s.tasks.get_mut("a").unwrap();
        t.lambda1 = l1;
        t.lambda2 = l2;
        s
    }

    fn eval_objective(lm: f64, msr: f64, t: f64, l1: f64, l2: f64) -> f64 {
        let mut g = Graph::new();
        let lm = g.constant(DTensor::scalar(lm));
        let msr = g.constant(DTensor::scalar(msr));
        let (loss, _) = objective(&mut g, lm, msr, t, l1, l2).unwrap();
        g.value(loss).item()
    }

    #[test]
    fn objective_examples() {
        assert_eq!(eval_objective(2.0, 0.7, 0.7, 1.0, 2.0), 2.0);
        assert_eq!(eval_objective(2.0, 0.3, 0.7, 0.0, 0.0), 2.0);
        assert!((eval_objective(2.0, 0.5, 0.7, 1.0, 2.0) - 1.88).abs() < 1e-12);
    }

    #[test]
    fn plain_update_examples() {
        let mut s = plain(0.05, 0.0);
        s.update("a", 0.0, 1.0).unwrap();
        assert_eq!(s.get("a").unwrap().lambda1, 0.05);
        s.update("a", -0.2, 1.0).unwrap();
        let t = s.get("a").unwrap();
        assert!((t.lambda1 - 0.0498).abs() < 1e-15);
        assert!((t.lambda2 - 4e-5).abs() < 1e-15);
        assert!(matches!(s.update("b", 0.1, 1.0), Err(Error::UnknownTask(_))));
    }

    #[test]
    fn lambda2_never_negative() {
        let mut s = LagrangeState::new(&[("a", 0.5)], 1e-3, LambdaUpdate::Adamw, (0.9, 0.95), 0.1, 3);
        for i in 0..200 {
            s.update("a", if i % 3 == 0 { -0.4 } else { 0.2 }, 1.0).unwrap();
            assert!(s.get("a").unwrap().lambda2 >= 0.0);
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = LagrangeState::new(&[("x", 1.0), ("y", 0.7)], 1e-3, LambdaUpdate::Plain, (0.9, 0.95), 0.1, 11);
        let b = LagrangeState::new(&[("x", 1.0), ("y", 0.7)], 1e-3, LambdaUpdate::Plain, (0.9, 0.95), 0.1, 11);
        assert_eq!(a, b);
        for t in a.tasks.values() {
            assert!((0.0..0.1).contains(&t.lambda1) && (0.0..0.1).contains(&t.lambda2));
        }
    }
}
