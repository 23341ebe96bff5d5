//! Per-layer attention router: boundary pooling over key states, a task MLP,
//! a router MLP producing two logits per head, and the Gumbel-Sigmoid /
//! straight-through machinery used to turn logits into FA/SA decisions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttnMode;
use crate::autograd::{kernels, DTensor, Graph, Var};
use crate::error::{Error, Result};
use crate::rng::{open_unit, stream, uniform_tensor};

pub const GUMBEL_EPS: f64 = 1e-10;

/// Dense affine map `x W + b` with `W: in x out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: DTensor,
    pub b: DTensor,
}

impl Linear {
    fn init<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            w: uniform_tensor(rng, &[fan_in, fan_out], -bound, bound),
            b: uniform_tensor(rng, &[fan_out], -bound, bound),
        }
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: DTensor::zeros(&[fan_in, fan_out]),
            b: DTensor::zeros(&[fan_out]),
        }
    }

    fn numel(&self) -> usize {
        self.w.numel() + self.b.numel()
    }
}

/// Weights of one layer's router.
///
/// The task MLP is `d -> hidden -> d`; the router MLP is
/// `d -> hidden -> d -> 2`, ReLU between every pair of linear maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRouter {
    pub task: [Linear; 2],
    pub route: [Linear; 3],
}

impl LayerRouter {
    pub fn init<R: Rng>(rng: &mut R, d_head: usize, hidden: usize) -> Self {
        Self {
            task: [Linear::init(rng, d_head, hidden), Linear::init(rng, hidden, d_head)],
            route: [
                Linear::init(rng, d_head, hidden),
                Linear::init(rng, hidden, d_head),
                Linear::init(rng, d_head, 2),
            ],
        }
    }

    pub fn zeros(d_head: usize, hidden: usize) -> Self {
        Self {
            task: [Linear::zeros(d_head, hidden), Linear::zeros(hidden, d_head)],
            route: [Linear::zeros(d_head, hidden), Linear::zeros(hidden, d_head), Linear::zeros(d_head, 2)],
        }
    }

    pub fn d_head(&self) -> usize {
        self.task[0].w.rows()
    }

    pub fn linears(&self) -> impl Iterator<Item = &Linear> {
        self.task.iter().chain(self.route.iter())
    }

    fn linears_mut(&mut self) -> impl Iterator<Item = &mut Linear> {
        self.task.iter_mut().chain(self.route.iter_mut())
    }

    /// All tensors in a fixed order: `w, b` per linear map, task MLP first.
    pub fn tensors(&self) -> Vec<&DTensor> {
        self.linears().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DTensor> {
        self.linears_mut().flat_map(|l| [&mut l.w, &mut l.b]).collect()
    }

    pub fn param_count(&self) -> usize {
        self.linears().map(Linear::numel).sum()
    }

    /// Records this router's weights on `g`; trainable ones receive gradients.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> RouterVars {
        let mut vars = self.tensors().into_iter().map(|t| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        });
        let mut next = || vars.next().expect("fixed tensor count");
        RouterVars {
            vars: std::array::from_fn(|_| next()),
        }
    }
}

/// Parameter count of one layer's router for a given head size and hidden width.
pub fn router_param_count(d_head: usize, hidden: usize) -> usize {
    let lin = |i: usize, o: usize| i * o + o;
    lin(d_head, hidden) + lin(hidden, d_head) + lin(d_head, hidden) + lin(hidden, d_head) + lin(d_head, 2)
}

/// One router per layer; layers do not share parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterParams {
    pub layers: Vec<LayerRouter>,
}

impl RouterParams {
    pub fn init(seed: u64, layers: usize, d_head: usize, hidden: usize) -> Self {
        let layers = (0..layers)
            .map(|l| LayerRouter::init(&mut stream(seed, "router-init", l as u64), d_head, hidden))
            .collect();
        Self { layers }
    }

    pub fn tensors(&self) -> Vec<&DTensor> {
        self.layers.iter().flat_map(LayerRouter::tensors).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DTensor> {
        self.layers.iter_mut().flat_map(LayerRouter::tensors_mut).collect()
    }
}

/// Graph handles for one layer router, in [`LayerRouter::tensors`] order.
#[derive(Debug, Clone, Copy)]
pub struct RouterVars {
    pub vars: [Var; 10],
}

impl RouterVars {
    fn linear(&self, g: &mut Graph, x: Var, i: usize) -> Result<Var> {
        let y = g.matmul(x, self.vars[2 * i])?;
        g.add_row(y, self.vars[2 * i + 1])
    }

    /// `x'_K -> TaskMLP`, rows are heads.
    pub fn task_features(&self, g: &mut Graph, pooled: Var) -> Result<Var> {
        let h = self.linear(g, pooled, 0)?;
        let h = g.relu(h)?;
        self.linear(g, h, 1)
    }

    /// TaskMLP output `-> RouterMLP -> H x 2` logits.
    pub fn route_logits(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let h = self.linear(g, features, 2)?;
        let h = g.relu(h)?;
        let h = self.linear(g, h, 3)?;
        let h = g.relu(h)?;
        self.linear(g, h, 4)
    }

    pub fn logits(&self, g: &mut Graph, pooled: Var) -> Result<Var> {
        let f = self.task_features(g, pooled)?;
        self.route_logits(g, f)
    }
}

/// Positions averaged by boundary pooling: the first and last `n_edge`
/// tokens, each counted once.
pub fn boundary_positions(len: usize, n_edge: usize) -> Vec<usize> {
    let head = n_edge.min(len);
    let tail = len.saturating_sub(n_edge).max(head);
    (0..head).chain(tail..len).collect()
}

/// Mean of boundary rows of `x_k: s x (H*d)`, reshaped to `H x d`.
pub fn boundary_pool_on_graph(g: &mut Graph, x_k: Var, heads: usize, n_edge: usize) -> Result<Var> {
    let (len, width) = (g.shape(x_k)[0], g.shape(x_k)[1]);
    if len == 0 || heads == 0 || width % heads != 0 {
        return Err(Error::shape("boundary_pool", g.shape(x_k), &[heads]));
    }
    let pooled = g.mean_rows(x_k, &boundary_positions(len, n_edge))?;
    g.reshape(pooled, &[heads, width / heads])
}

pub fn boundary_pool(x_k: &DTensor, heads: usize, n_edge: usize) -> Result<DTensor> {
    let mut g = Graph::with_finite_checks(false);
    let x = g.constant(x_k.clone());
    let p = boundary_pool_on_graph(&mut g, x, heads, n_edge)?;
    Ok(g.value(p).clone())
}

/// `g = -log(-log(u + eps) + eps)` for `u` in the open unit interval.
pub fn gumbel_noise(u: f64, eps: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::InvalidArgument(format!("gumbel input {u} outside (0, 1)")));
    }
    Ok(-(-(u + eps).ln() + eps).ln())
}

/// One Gumbel pair per head, `H x 2`.
pub fn sample_noise<R: Rng>(rng: &mut R, heads: usize) -> DTensor {
    let data = (0..2 * heads)
        .map(|_| gumbel_noise(open_unit(rng), GUMBEL_EPS).expect("open unit draw"))
        .collect();
    DTensor::new(vec![heads, 2], data).expect("finite noise")
}

/// Binary Gumbel-Sigmoid on the logit difference. Returns `H x 2`
/// `r_soft = [1 - p_SA, p_SA]` with `p_SA = sigmoid((z1 - z0 + g1 - g0) / tau)`.
pub fn gumbel_soft_route_on_graph(g: &mut Graph, z: Var, noise: Option<&DTensor>, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let heads = g.shape(z)[0];
    if g.shape(z) != [heads, 2] {
        return Err(Error::shape("gumbel_soft_route", g.shape(z), &[heads, 2]));
    }
    let diff = g.constant(DTensor::new(vec![2, 1], vec![-1.0, 1.0])?);
    let zd = g.matmul(z, diff)?;
    let zd = match noise {
        Some(n) => {
            if n.shape() != [heads, 2] {
                return Err(Error::shape("gumbel_soft_route", n.shape(), &[heads, 2]));
            }
            let nd: Vec<f64> = (0..heads).map(|h| n.get2(h, 1) - n.get2(h, 0)).collect();
            let nd = g.constant(DTensor::new(vec![heads, 1], nd)?);
            g.add(zd, nd)?
        }
        None => zd,
    };
    let scaled = g.scale(zd, 1.0 / tau)?;
    let p_sa = g.sigmoid(scaled)?;
    let neg = g.scale(p_sa, -1.0)?;
    let p_fa = g.add_scalar(neg, 1.0)?;
    g.concat_cols(&[p_fa, p_sa])
}

pub fn gumbel_soft_route(z: &DTensor, noise: Option<&DTensor>, tau: f64) -> Result<DTensor> {
    let mut g = Graph::with_finite_checks(false);
    let zv = g.constant(z.clone());
    let r = gumbel_soft_route_on_graph(&mut g, zv, noise, tau)?;
    Ok(g.value(r).clone())
}

/// Per-row argmax of an `H x 2` routing matrix; exact ties resolve to FA.
pub fn harden(r: &DTensor) -> Vec<AttnMode> {
    (0..r.rows())
        .map(|h| {
            if r.get2(h, 1) > r.get2(h, 0) {
                AttnMode::Sparse
            } else {
                AttnMode::Full
            }
        })
        .collect()
}

pub fn one_hot(modes: &[AttnMode]) -> DTensor {
    let data = modes
        .iter()
        .flat_map(|m| if m.is_sparse() { [0.0, 1.0] } else { [1.0, 0.0] })
        .collect();
    DTensor::new(vec![modes.len(), 2], data).expect("finite one-hot")
}

/// `hard + (soft - detach(soft))`: one-hot forward, soft gradient backward.
pub fn ste_harden_on_graph(g: &mut Graph, r_soft: Var) -> Result<Var> {
    let hard = g.constant(one_hot(&harden(g.value(r_soft))));
    let frozen = g.detach(r_soft);
    let delta = g.sub(r_soft, frozen)?;
    g.add(hard, delta)
}

pub fn ste_harden(r_soft: &DTensor) -> Result<DTensor> {
    let mut g = Graph::with_finite_checks(false);
    let r = g.constant(r_soft.clone());
    let out = ste_harden_on_graph(&mut g, r)?;
    Ok(g.value(out).clone())
}

/// `tau(p) = max(tau_min, tau_init * exp(-decay * p))`, `p` the fraction of
/// training completed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub tau_init: f64,
    pub tau_min: f64,
    pub decay: f64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self {
            tau_init: 1.0,
            tau_min: 0.1,
            decay: 0.6,
        }
    }
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_init > 0.0 && self.tau_min > 0.0 && self.decay > 0.0) {
            return Err(Error::Config(format!("anneal schedule must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn tau(&self, progress: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&progress) {
            return Err(Error::InvalidArgument(format!("progress {progress} outside [0, 1]")));
        }
        Ok(self.tau_min.max(self.tau_init * (-self.decay * progress).exp()))
    }
}

/// Routing outcome for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub r_soft: DTensor,
    pub r_hard: Vec<AttnMode>,
    pub gumbel_noise: Option<DTensor>,
    pub tau: f64,
}

/// Whether routing draws Gumbel noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteMode {
    /// Noisy relaxation; the seed fixes the draws.
    Train { seed: u64 },
    /// Noise-free argmax of the raw logits.
    Inference,
}

/// Pool, score, relax and harden for one layer's key states `x_k: s x (H*d)`.
pub fn route(
    x_k: &DTensor,
    heads: usize,
    params: &LayerRouter,
    n_edge: usize,
    schedule: &AnnealSchedule,
    progress: f64,
    mode: RouteMode,
) -> Result<RoutingDecision> {
    let tau = schedule.tau(progress)?;
    let mut g = Graph::with_finite_checks(false);
    let x = g.constant(x_k.clone());
    let vars = params.register(&mut g, false);
    let pooled = boundary_pool_on_graph(&mut g, x, heads, n_edge)?;
    let z = vars.logits(&mut g, pooled)?;
    let noise = match mode {
        RouteMode::Train { seed } => Some(sample_noise(&mut stream(seed, "route-noise", 0), heads)),
        RouteMode::Inference => None,
    };
    let r = gumbel_soft_route_on_graph(&mut g, z, noise.as_ref(), tau)?;
    let r_soft = g.value(r).clone();
    let r_hard = match mode {
        RouteMode::Train { .. } => harden(&r_soft),
        RouteMode::Inference => harden(g.value(z)),
    };
    Ok(RoutingDecision {
        r_soft,
        r_hard,
        gumbel_noise: noise,
        tau,
    })
}

/// `P(SA)` under the Gumbel-Sigmoid at temperature 1 is `sigmoid(z1 - z0)`.
pub fn sa_probability(z_diff: f64) -> f64 {
    kernels::sigmoid(z_diff)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn footprint_at_width_128() {
        let r = LayerRouter::zeros(128, 512);
        assert_eq!(r.param_count(), router_param_count(128, 512));
        assert_eq!(r.param_count(), 263_682);
        assert!((r.param_count() as f64 / 270_000.0 - 1.0).abs() <= 0.1);
    }

    #[test]
    fn boundary_positions_cases() {
        assert_eq!(boundary_positions(6, 2), vec![0, 1, 4, 5]);
        assert_eq!(boundary_positions(3, 2), vec![0, 1, 2]);
        assert_eq!(boundary_positions(4, 8), vec![0, 1, 2, 3]);
    }

    #[test]
    fn pool_hand_values() {
        let data: Vec<f64> = (0..6).flat_map(|i| [i as f64, 10.0 * i as f64]).collect();
        let x = DTensor::new(vec![6, 2], data).unwrap();
        let p = boundary_pool(&x, 1, 2).unwrap();
        assert_eq!(p.data(), &[2.5, 25.0]);
        let c = boundary_pool(&DTensor::full(&[9, 4], 1.25), 2, 3).unwrap();
        assert!(c.data().iter().all(|&v| v == 1.25));
    }

    #[test]
    fn zero_router_gives_zero_logits() {
        let r = LayerRouter::zeros(4, 16);
        let mut g = Graph::new();
        let vars = r.register(&mut g, false);
        let x = g.constant(DTensor::full(&[3, 4], 0.7));
        let z = vars.logits(&mut g, x).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gumbel_fixed_points() {
        assert!(gumbel_noise((-1.0f64).exp(), GUMBEL_EPS).unwrap().abs() < 1e-9);
        assert!((gumbel_noise(0.5, GUMBEL_EPS).unwrap() - 0.36651).abs() < 1e-5);
        assert!(gumbel_noise(0.0, GUMBEL_EPS).is_err());
        assert!(gumbel_noise(1.0, GUMBEL_EPS).is_err());
    }

    #[test]
    fn soft_route_examples() {
        let z = DTensor::new(vec![1, 2], vec![0.4, 0.4]).unwrap();
        assert_eq!(gumbel_soft_route(&z, None, 1.0).unwrap().data(), &[0.5, 0.5]);
        let z = DTensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let r = gumbel_soft_route(&z, None, 1.0).unwrap();
        assert!((r.get2(0, 1) - 0.73106).abs() < 1e-5);
        let r = gumbel_soft_route(&z, None, 0.01).unwrap();
        assert!(r.get2(0, 1) >= 0.99);
        assert!(gumbel_soft_route(&z, None, 0.0).is_err());
    }

    #[test]
    fn ste_forward_examples() {
        let r = DTensor::new(vec![2, 2], vec![0.3, 0.7, 0.5, 0.5]).unwrap();
        assert_eq!(ste_harden(&r).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn anneal_examples() {
        let s = AnnealSchedule::default();
        assert_eq!(s.tau(0.0).unwrap(), 1.0);
        assert!((s.tau(1.0).unwrap() - 0.5488).abs() < 1e-4);
        assert!(s.tau(1.5).is_err());
        let clamped = AnnealSchedule {
            tau_min: 0.6,
            ..s
        };
        assert_eq!(clamped.tau(0.9).unwrap(), 0.6);
        assert!(clamped.tau(0.8).unwrap() > 0.6);
    }

    #[test]
    fn route_is_deterministic_and_inference_uses_raw_logits() {
        let params = LayerRouter::init(&mut stream(3, "t", 0), 4, 16);
        let x = uniform_tensor(&mut stream(3, "x", 0), &[10, 8], -1.0, 1.0);
        let s = AnnealSchedule::default();
        let a = route(&x, 2, &params, 2, &s, 0.3, RouteMode::Train { seed: 9 }).unwrap();
        let b = route(&x, 2, &params, 2, &s, 0.3, RouteMode::Train { seed: 9 }).unwrap();
        assert_eq!(a, b);
        assert!(a.gumbel_noise.is_some());

        let inf = route(&x, 2, &params, 2, &s, 0.3, RouteMode::Inference).unwrap();
        let mut g = Graph::new();
        let vars = params.register(&mut g, false);
        let xv = g.constant(x);
        let pooled = boundary_pool_on_graph(&mut g, xv, 2, 2).unwrap();
        let z = vars.logits(&mut g, pooled).unwrap();
        assert_eq!(inf.r_hard, harden(g.value(z)));
        for h in 0..2 {
            let row_sum = inf.r_soft.get2(h, 0) + inf.r_soft.get2(h, 1);
            assert!((row_sum - 1.0).abs() <= 1e-9);
        }
    }
}
