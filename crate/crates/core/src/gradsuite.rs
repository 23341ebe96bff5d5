//! Registry of finite-difference gradient checks over every differentiable
//! op, the router pipeline and the training objective.
//!
//! Router checks run through the soft relaxation: the STE forward value is
//! piecewise constant, so central differences cannot see it. The STE rule
//! itself is checked exactly elsewhere (hard and soft paths share gradients).

use std::rc::Rc;

use serde::Serialize;

use crate::attention::{attention_on_graph, streaming_mask, AttnMask, SparsityPattern};
use crate::autograd::gradcheck::{check, LINEAR_TOL, NONLINEAR_TOL, STEP};
use crate::autograd::{DTensor, Graph, Var};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::metrics::compute_msr_soft;
use crate::model::{forward, Backbone, ForwardOptions, HeadController, LayerMix};
use crate::rng::{stream, uniform_tensor};
use crate::router::{boundary_pool_on_graph, gumbel_soft_route_on_graph, sample_noise, LayerRouter, RouterVars};
use crate::training::objective;

type Build = Box<dyn Fn(&mut Graph, &[Var], u64) -> Result<Var>>;

/// One named check: input shapes and a builder producing the checked output.
pub struct OpCase {
    pub name: &'static str,
    pub linear: bool,
    inputs: Box<dyn Fn(u64) -> Vec<DTensor>>,
    build: Build,
}

impl OpCase {
    pub fn tolerance(&self) -> f64 {
        if self.linear {
            LINEAR_TOL
        } else {
            NONLINEAR_TOL
        }
    }

    /// Max relative error for one seed. Non-scalar outputs are reduced with
    /// seeded random weights.
    pub fn run(&self, seed: u64) -> Result<f64> {
        let inputs = (self.inputs)(seed);
        let res = check(
            &inputs,
            |g, v| {
                let y = (self.build)(g, v, seed)?;
                weighted_sum(g, y, seed)
            },
            STEP,
        )?;
        Ok(res.max_rel_err)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpReport {
    pub name: String,
    pub linear: bool,
    pub seeds: usize,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    if g.value(y).numel() == 1 {
        return Ok(y);
    }
    let w = uniform_tensor(&mut stream(seed, "gradsuite/weights", 0), g.shape(y), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn shaped(name: &'static str, shapes: Vec<Vec<usize>>) -> Box<dyn Fn(u64) -> Vec<DTensor>> {
    Box::new(move |seed| {
        shapes
            .iter()
            .enumerate()
            .map(|(i, s)| uniform_tensor(&mut stream(seed, name, i as u64), s, -2.0, 2.0))
            .collect()
    })
}

fn op<F>(name: &'static str, linear: bool, shapes: &[&[usize]], f: F) -> OpCase
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
{
    OpCase {
        name,
        linear,
        inputs: shaped(name, shapes.iter().map(|s| s.to_vec()).collect()),
        build: Box::new(move |g, v, _| f(g, v)),
    }
}

fn mask(bits: &[u8]) -> Rc<[bool]> {
    bits.iter().map(|&b| b == 1).collect()
}

const ROUTER_D: usize = 4;
const ROUTER_HIDDEN: usize = 8;

fn router_inputs(name: &'static str, extra: Vec<Vec<usize>>) -> Box<dyn Fn(u64) -> Vec<DTensor>> {
    Box::new(move |seed| {
        let router = LayerRouter::init(&mut stream(seed, name, 100), ROUTER_D, ROUTER_HIDDEN);
        let mut out: Vec<DTensor> = router.tensors().into_iter().cloned().collect();
        out.extend(
            extra
                .iter()
                .enumerate()
                .map(|(i, s)| uniform_tensor(&mut stream(seed, name, i as u64), s, -2.0, 2.0)),
        );
        out
    })
}

fn router_vars(v: &[Var]) -> RouterVars {
    let mut vars = [v[0]; 10];
    vars.copy_from_slice(&v[..10]);
    RouterVars { vars }
}

/// Routes with the noisy soft relaxation and no hardening.
struct SoftRouting<'a> {
    vars: &'a RouterVars,
    heads: usize,
    n_edge: usize,
    tau: f64,
    noise: DTensor,
    r: Vec<Var>,
}

impl HeadController for SoftRouting<'_> {
    fn layer_mix(&mut self, g: &mut Graph, _: usize, keys: Var) -> Result<LayerMix> {
        let pooled = boundary_pool_on_graph(g, keys, self.heads, self.n_edge)?;
        let z = self.vars.logits(g, pooled)?;
        let r = gumbel_soft_route_on_graph(g, z, Some(&self.noise), self.tau)?;
        self.r.push(r);
        Ok(LayerMix::Weighted(r))
    }
}

fn toy_model() -> ModelConfig {
    ModelConfig {
        layers: 1,
        heads: 2,
        d_head: ROUTER_D,
        vocab: 16,
        seq_len: 10,
        mlp_hidden: 8,
    }
}

/// The full constrained objective on a one-layer toy, differentiated with
/// respect to the router parameters.
fn objective_case() -> OpCase {
    let m = toy_model();
    OpCase {
        name: "objective",
        linear: false,
        inputs: router_inputs("gradsuite/objective", Vec::new()),
        build: Box::new(move |g, v, seed| {
            let backbone = Backbone::init(&m, seed);
            let bvars = backbone.register(g, false);
            let mut rng = stream(seed, "gradsuite/objective-data", 0);
            let tokens: Vec<usize> = (0..m.seq_len).map(|_| rand::Rng::gen_range(&mut rng, 0..m.vocab)).collect();
            let labels: Vec<usize> = (0..3).map(|_| rand::Rng::gen_range(&mut rng, 0..m.vocab)).collect();
            let noise = sample_noise(&mut rng, m.heads);
            let vars = router_vars(v);
            let mut ctl = SoftRouting {
                vars: &vars,
                heads: m.heads,
                n_edge: 2,
                tau: 0.7,
                noise,
                r: Vec::new(),
            };
            let pattern = SparsityPattern::Streaming { sink: 1, window: 3 };
            let opts = ForwardOptions {
                sa_pattern: &pattern,
                keep_attention: false,
            };
            let fwd = forward(g, &m, &bvars, &tokens, &mut ctl, &opts)?;
            let rows = g.select_rows(fwd.logits, &[m.seq_len - 3, m.seq_len - 2, m.seq_len - 1])?;
            let lm = g.cross_entropy(rows, &labels)?;
            let msr = compute_msr_soft(g, &ctl.r)?;
            let (total, _) = objective(g, lm, msr, 0.7, 0.3, 0.5)?;
            Ok(total)
        }),
    }
}

/// Pool, task MLP, router MLP and the noisy soft route with fixed noise.
fn router_pipeline_case() -> OpCase {
    let (heads, len, n_edge) = (2, 7, 2);
    OpCase {
        name: "router_pipeline",
        linear: false,
        inputs: router_inputs("gradsuite/router", vec![vec![len, heads * ROUTER_D]]),
        build: Box::new(move |g, v, seed| {
            let noise = sample_noise(&mut stream(seed, "gradsuite/router-noise", 0), heads);
            let vars = router_vars(v);
            let pooled = boundary_pool_on_graph(g, v[10], heads, n_edge)?;
            let z = vars.logits(g, pooled)?;
            gumbel_soft_route_on_graph(g, z, Some(&noise), 0.8)
        }),
    }
}

fn attention_case(name: &'static str, hidden: Option<AttnMask>) -> OpCase {
    let fill = hidden.map(|m| m.fill());
    op(name, false, &[&[6, 4], &[6, 4], &[6, 3]], move |g, v| {
        attention_on_graph(g, v[0], v[1], v[2], fill.clone())
    })
}

/// Every registered check.
pub fn cases() -> Vec<OpCase> {
    vec![
        op("matmul", true, &[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1])),
        op("matmul_nt", true, &[&[3, 4], &[5, 4]], |g, v| g.matmul_nt(v[0], v[1])),
        op("transpose", true, &[&[3, 4]], |g, v| g.transpose(v[0])),
        op("add", true, &[&[2, 3], &[2, 3]], |g, v| g.add(v[0], v[1])),
        op("sub", true, &[&[2, 3], &[2, 3]], |g, v| g.sub(v[0], v[1])),
        op("mul", true, &[&[2, 3], &[2, 3]], |g, v| g.mul(v[0], v[1])),
        op("add_row", true, &[&[3, 4], &[4]], |g, v| g.add_row(v[0], v[1])),
        op("scale", true, &[&[2, 3]], |g, v| g.scale(v[0], -1.7)),
        op("add_scalar", true, &[&[2, 3]], |g, v| g.add_scalar(v[0], 0.3)),
        op("exp", false, &[&[2, 3]], |g, v| g.exp(v[0])),
        op("log", false, &[&[2, 3]], |g, v| {
            let e = g.exp(v[0])?;
            g.log(e)
        }),
        op("sigmoid", false, &[&[2, 3]], |g, v| g.sigmoid(v[0])),
        op("relu", false, &[&[2, 3]], |g, v| g.relu(v[0])),
        op("sum", true, &[&[2, 3]], |g, v| g.sum(v[0])),
        op("mean", true, &[&[2, 3]], |g, v| g.mean(v[0])),
        op("concat_cols", true, &[&[2, 3], &[2, 1]], |g, v| g.concat_cols(&[v[0], v[1]])),
        op("concat_rows", true, &[&[2, 3], &[1, 3]], |g, v| g.concat_rows(&[v[0], v[1]])),
        op("masked_fill", true, &[&[2, 3]], |g, v| g.masked_fill(v[0], mask(&[0, 1, 0, 1, 0, 0]), -3.0)),
        op("softmax", false, &[&[3, 4]], |g, v| g.softmax(v[0])),
        op("masked_softmax", false, &[&[3, 3]], |g, v| {
            let f = g.masked_fill(v[0], mask(&[0, 1, 1, 0, 0, 1, 0, 0, 0]), f64::NEG_INFINITY)?;
            g.softmax(f)
        }),
        op("cross_entropy", false, &[&[3, 5]], |g, v| g.cross_entropy(v[0], &[4, 0, 2])),
        op("block", true, &[&[4, 5]], |g, v| g.block(v[0], 1, 2, 2, 3)),
        op("select_rows", true, &[&[4, 3]], |g, v| g.select_rows(v[0], &[3, 1, 3])),
        op("mean_rows", true, &[&[5, 3]], |g, v| g.mean_rows(v[0], &[0, 1, 4])),
        op("reshape", true, &[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4])),
        op("scale_by_element", true, &[&[2, 3], &[4]], |g, v| g.scale_by_element(v[0], v[1], 2)),
        attention_case("attention_causal", Some(AttnMask::causal(6))),
        attention_case("attention_streaming", streaming_mask(6, 1, 2).ok()),
        router_pipeline_case(),
        objective_case(),
    ]
}

/// Runs every case on seeds `0..seeds`.
pub fn run_suite(seeds: usize) -> Result<Vec<OpReport>> {
    cases()
        .iter()
        .map(|c| {
            let mut worst: f64 = 0.0;
            for s in 0..seeds {
                worst = worst.max(c.run(s as u64)?);
            }
            Ok(OpReport {
                name: c.name.to_string(),
                linear: c.linear,
                seeds,
                tolerance: c.tolerance(),
                max_rel_err: worst,
                passed: worst <= c.tolerance(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_unique() {
        let mut names: Vec<_> = cases().iter().map(|c| c.name).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn composite_cases_pass_one_seed() {
        for c in cases().iter().filter(|c| !c.linear) {
            let e = c.run(3).unwrap();
            assert!(e <= c.tolerance(), "{}: {e}", c.name);
        }
    }
}
