//! Router-driven head control for the backbone forward pass.

use crate::attention::AttnMode;
use crate::autograd::{DTensor, Graph, Var};
use crate::error::{Error, Result};
use crate::model::{HeadController, LayerMix};
use crate::router::{
    boundary_pool_on_graph, gumbel_soft_route_on_graph, harden, ste_harden_on_graph, RouterVars,
};

pub enum ControlMode {
    /// Noisy relaxation with STE outputs mixing FA and SA per head.
    /// `noise[layer]` is that layer's `H x 2` Gumbel draw.
    Train { tau: f64, noise: Vec<DTensor> },
    /// Argmax of the raw logits; heads run a single mode.
    Inference,
}

/// Routes each layer from its own key states.
pub struct RouterController<'a> {
    vars: &'a [RouterVars],
    heads: usize,
    n_edge: usize,
    mode: ControlMode,
    /// Pooled keys per layer (`H x d`).
    pub pooled: Vec<Var>,
    /// Task MLP output per layer (`H x d`).
    pub features: Vec<Var>,
    /// Raw `H x 2` logits per layer.
    pub logits: Vec<Var>,
    /// STE outputs per layer, training mode only.
    pub r_outs: Vec<Var>,
    pub decisions: Vec<Vec<AttnMode>>,
}

impl<'a> RouterController<'a> {
    pub fn new(vars: &'a [RouterVars], heads: usize, n_edge: usize, mode: ControlMode) -> Self {
        Self {
            vars,
            heads,
            n_edge,
            mode,
            pooled: Vec::new(),
            features: Vec::new(),
            logits: Vec::new(),
            r_outs: Vec::new(),
            decisions: Vec::new(),
        }
    }
}

impl HeadController for RouterController<'_> {
    fn layer_mix(&mut self, g: &mut Graph, layer: usize, keys: Var) -> Result<LayerMix> {
        let vars = self
            .vars
            .get(layer)
            .ok_or_else(|| Error::Assignment(format!("no router for layer {layer}")))?;
        let pooled = boundary_pool_on_graph(g, keys, self.heads, self.n_edge)?;
        let features = vars.task_features(g, pooled)?;
        let z = vars.route_logits(g, features)?;
        self.pooled.push(pooled);
        self.features.push(features);
        self.logits.push(z);
        match &self.mode {
            ControlMode::Train { tau, noise } => {
                let n = noise
                    .get(layer)
                    .ok_or_else(|| Error::InvalidArgument(format!("no noise for layer {layer}")))?;
                let r_soft = gumbel_soft_route_on_graph(g, z, Some(n), *tau)?;
                let r_out = ste_harden_on_graph(g, r_soft)?;
                self.decisions.push(harden(g.value(r_soft)));
                self.r_outs.push(r_out);
                Ok(LayerMix::Weighted(r_out))
            }
            ControlMode::Inference => {
                let modes = harden(g.value(z));
                self.decisions.push(modes.clone());
                Ok(LayerMix::Hard(modes))
            }
        }
    }
}
