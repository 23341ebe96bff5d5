use serde::{Deserialize, Serialize};

use crate::autograd::DTensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamHyper {
    pub fn adam(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// AdamW with decoupled weight decay and bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub hyper: AdamHyper,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(hyper: AdamHyper, sizes: &[usize]) -> Self {
        Self {
            hyper,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Bias-corrected update direction for one element, before the learning rate.
    fn direction(&self, m: f64, v: f64) -> f64 {
        let (b1, b2) = (self.hyper.beta1, self.hyper.beta2);
        let t = self.t as i32;
        let m_hat = m / (1.0 - b1.powi(t));
        let v_hat = v / (1.0 - b2.powi(t));
        m_hat / (v_hat.sqrt() + self.hyper.eps)
    }

    fn check(&self, n: usize) -> Result<()> {
        if n != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer holds {} tensors, got {n}",
                self.m.len()
            )));
        }
        Ok(())
    }

    /// Descent step at `lr_scale * lr`.
    pub fn step(&mut self, params: &mut [&mut DTensor], grads: &[Vec<f64>], lr_scale: f64) -> Result<()> {
        self.check(params.len())?;
        self.t += 1;
        let lr = self.hyper.lr * lr_scale;
        let (b1, b2, wd) = (self.hyper.beta1, self.hyper.beta2, self.hyper.weight_decay);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if g.len() != p.numel() {
                return Err(Error::shape("adamw", p.shape(), &[g.len()]));
            }
            for j in 0..g.len() {
                self.m[i][j] = b1 * self.m[i][j] + (1.0 - b1) * g[j];
                self.v[i][j] = b2 * self.v[i][j] + (1.0 - b2) * g[j] * g[j];
                let dir = self.direction(self.m[i][j], self.v[i][j]);
                let x = &mut p.data_mut()[j];
                *x *= 1.0 - lr * wd;
                *x -= lr * dir;
            }
        }
        Ok(())
    }

    /// Ascent step on plain scalars.
    pub fn ascend(&mut self, params: &mut [f64], grads: &[f64], lr_scale: f64) -> Result<()> {
        self.check(params.len())?;
        self.t += 1;
        let lr = self.hyper.lr * lr_scale;
        let (b1, b2, wd) = (self.hyper.beta1, self.hyper.beta2, self.hyper.weight_decay);
        for (i, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
            self.m[i][0] = b1 * self.m[i][0] + (1.0 - b1) * g;
            self.v[i][0] = b2 * self.v[i][0] + (1.0 - b2) * g * g;
            let dir = self.direction(self.m[i][0], self.v[i][0]);
            *p *= 1.0 - lr * wd;
            *p += lr * dir;
        }
        Ok(())
    }
}

/// Linear warmup over the first `warmup_ratio` of steps, then cosine decay to zero.
pub fn warmup_cosine(step: usize, total: usize, warmup_ratio: f64) -> f64 {
    let warm = (warmup_ratio * total as f64) as usize;
    if step < warm {
        (step + 1) as f64 / warm as f64
    } else {
        let span = (total - warm).max(1) as f64;
        0.5 * (1.0 + (std::f64::consts::PI * (step - warm) as f64 / span).cos())
    }
}
