//! Toy decoder used as the frozen backbone.
//!
//! Embedding is `tok[x_i] + prev[x_{i-1}]` (row `vocab` of `prev` stands for
//! "no previous token"). Each layer is a residual multi-head attention block
//! followed by a residual ReLU MLP; there is no normalization and no
//! positional embedding.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::attention::{attention_on_graph, AttnMask, AttnMode, SparsityPattern};
use crate::autograd::{DTensor, Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::{stream, uniform_tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub wq: DTensor,
    pub wk: DTensor,
    pub wv: DTensor,
    pub wo: DTensor,
    pub w1: DTensor,
    pub b1: DTensor,
    pub w2: DTensor,
    pub b2: DTensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub config: ModelConfig,
    pub tok_emb: DTensor,
    pub prev_emb: DTensor,
    pub layers: Vec<LayerWeights>,
    pub unembed: DTensor,
}

impl Backbone {
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let (v, d, f) = (config.vocab, config.d_model(), config.mlp_hidden);
        let fan = |fan_in: usize, shape: &[usize], idx: u64, name: &str| {
            let b = 1.0 / (fan_in as f64).sqrt();
            uniform_tensor(&mut stream(seed, &format!("backbone/{name}"), idx), shape, -b, b)
        };
        let half = |t: DTensor| DTensor::new(t.shape().to_vec(), t.data().iter().map(|x| 0.5 * x).collect()).expect("finite");
        let layers = (0..config.layers as u64)
            .map(|l| LayerWeights {
                wq: fan(d, &[d, d], l, "wq"),
                wk: fan(d, &[d, d], l, "wk"),
                wv: fan(d, &[d, d], l, "wv"),
                wo: fan(d, &[d, d], l, "wo"),
                w1: fan(d, &[d, f], l, "w1"),
                b1: DTensor::zeros(&[f]),
                w2: fan(f, &[f, d], l, "w2"),
                b2: DTensor::zeros(&[d]),
            })
            .collect();
        Self {
            config: config.clone(),
            tok_emb: half(fan(1, &[v, d], 0, "tok")),
            prev_emb: half(fan(1, &[v + 1, d], 0, "prev")),
            layers,
            unembed: fan(d, &[d, v], 0, "unembed"),
        }
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &DTensor)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("prev_emb".to_string(), &self.prev_emb)];
        for (l, w) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("wq", &w.wq),
                ("wk", &w.wk),
                ("wv", &w.wv),
                ("wo", &w.wo),
                ("w1", &w.w1),
                ("b1", &w.b1),
                ("w2", &w.w2),
                ("b2", &w.b2),
            ] {
                out.push((format!("layer{l}.{name}"), t));
            }
        }
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DTensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.prev_emb];
        for w in &mut self.layers {
            out.extend([&mut w.wq, &mut w.wk, &mut w.wv, &mut w.wo, &mut w.w1, &mut w.b1, &mut w.w2, &mut w.b2]);
        }
        out.push(&mut self.unembed);
        out
    }

    pub fn register(&self, g: &mut Graph, trainable: bool) -> BackboneVars {
        let mut put = |t: &DTensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        let tok_emb = put(&self.tok_emb);
        let prev_emb = put(&self.prev_emb);
        let layers = self
            .layers
            .iter()
            .map(|w| LayerVars {
                wq: put(&w.wq),
                wk: put(&w.wk),
                wv: put(&w.wv),
                wo: put(&w.wo),
                w1: put(&w.w1),
                b1: put(&w.b1),
                w2: put(&w.w2),
                b2: put(&w.b2),
            })
            .collect();
        let unembed = put(&self.unembed);
        BackboneVars {
            tok_emb,
            prev_emb,
            layers,
            unembed,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone)]
pub struct BackboneVars {
    pub tok_emb: Var,
    pub prev_emb: Var,
    pub layers: Vec<LayerVars>,
    pub unembed: Var,
}

impl BackboneVars {
    /// All handles in [`Backbone::tensors_mut`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.prev_emb];
        for w in &self.layers {
            out.extend([w.wq, w.wk, w.wv, w.wo, w.w1, w.b1, w.w2, w.b2]);
        }
        out.push(self.unembed);
        out
    }
}

/// How one layer's heads are executed.
pub enum LayerMix {
    /// Each head runs exactly one mode.
    Hard(Vec<AttnMode>),
    /// `H x 2` weights; head `h` outputs `w[h,0] * O_full + w[h,1] * O_sparse`.
    Weighted(Var),
}

/// Decides head modes layer by layer, seeing that layer's key states.
pub trait HeadController {
    fn layer_mix(&mut self, g: &mut Graph, layer: usize, keys: Var) -> Result<LayerMix>;
}

/// Fixed per-layer modes, independent of the input.
pub struct FixedModes(pub Vec<Vec<AttnMode>>);

impl FixedModes {
    pub fn uniform(layers: usize, heads: usize, mode: AttnMode) -> Self {
        Self(vec![vec![mode; heads]; layers])
    }
}

impl HeadController for FixedModes {
    fn layer_mix(&mut self, _: &mut Graph, layer: usize, _: Var) -> Result<LayerMix> {
        let modes = self
            .0
            .get(layer)
            .ok_or_else(|| Error::Assignment(format!("no modes for layer {layer}")))?;
        Ok(LayerMix::Hard(modes.clone()))
    }
}

/// Output of one sequence's forward pass.
pub struct Forward {
    pub logits: Var,
    /// `s x (H*d)` query and key states per layer.
    pub queries: Vec<Var>,
    pub keys: Vec<Var>,
    /// `s x s` attention probabilities per layer and head, when requested.
    pub attn: Vec<Vec<Var>>,
}

pub struct ForwardOptions<'a> {
    pub sa_pattern: &'a SparsityPattern,
    pub keep_attention: bool,
}

/// Masks shared across heads for one sequence length.
struct MaskCache {
    causal: Rc<[bool]>,
    streaming: Option<Rc<[bool]>>,
}

#[allow(clippy::too_many_arguments)]
fn head_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    mode: AttnMode,
    pattern: &SparsityPattern,
    cache: &MaskCache,
    keep_probs: bool,
) -> Result<(Var, Option<Var>)> {
    let hidden = match (mode, pattern) {
        (AttnMode::Full, _) | (AttnMode::Sparse, SparsityPattern::Full) => cache.causal.clone(),
        (AttnMode::Sparse, SparsityPattern::Streaming { .. }) => cache.streaming.clone().expect("built for streaming"),
        (AttnMode::Sparse, p @ SparsityPattern::BlockSparse { .. }) => {
            p.mask(g.value(q), g.value(k))?.fill()
        }
    };
    if keep_probs {
        let d = g.shape(q)[1] as f64;
        let scores = g.matmul_nt(q, k)?;
        let scores = g.scale(scores, 1.0 / d.sqrt())?;
        let scores = g.masked_fill(scores, hidden, f64::NEG_INFINITY)?;
        let probs = g.softmax(scores)?;
        return Ok((g.matmul(probs, v)?, Some(probs)));
    }
    Ok((attention_on_graph(g, q, k, v, Some(hidden))?, None))
}

/// Runs one sequence through the backbone.
pub fn forward(
    g: &mut Graph,
    cfg: &ModelConfig,
    vars: &BackboneVars,
    tokens: &[usize],
    controller: &mut dyn HeadController,
    opts: &ForwardOptions,
) -> Result<Forward> {
    let s = tokens.len();
    if s == 0 {
        return Err(Error::InvalidArgument("empty token sequence".into()));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab) {
        return Err(Error::Index {
            op: "forward",
            index: bad,
            size: cfg.vocab,
        });
    }
    let (heads, d) = (cfg.heads, cfg.d_head);
    let prev: Vec<usize> = std::iter::once(cfg.vocab).chain(tokens[..s - 1].iter().copied()).collect();
    let e_tok = g.select_rows(vars.tok_emb, tokens)?;
    let e_prev = g.select_rows(vars.prev_emb, &prev)?;
    let mut x = g.add(e_tok, e_prev)?;

    let cache = MaskCache {
        causal: AttnMask::causal(s).fill(),
        streaming: match *opts.sa_pattern {
            SparsityPattern::Streaming { sink, window } => Some(crate::attention::streaming_mask(s, sink, window)?.fill()),
            _ => None,
        },
    };

    let mut queries = Vec::with_capacity(vars.layers.len());
    let mut keys = Vec::with_capacity(vars.layers.len());
    let mut attn = Vec::new();
    for (l, w) in vars.layers.iter().enumerate() {
        let q = g.matmul(x, w.wq)?;
        let k = g.matmul(x, w.wk)?;
        let v = g.matmul(x, w.wv)?;
        queries.push(q);
        keys.push(k);
        let mix = controller.layer_mix(g, l, k)?;
        let mut head_outs = Vec::with_capacity(heads);
        let mut layer_probs = Vec::new();
        for h in 0..heads {
            let qh = g.slice_cols(q, h * d, d)?;
            let kh = g.slice_cols(k, h * d, d)?;
            let vh = g.slice_cols(v, h * d, d)?;
            let out = match &mix {
                LayerMix::Hard(modes) => {
                    let mode = *modes
                        .get(h)
                        .ok_or_else(|| Error::Assignment(format!("layer {l} has {} modes for {heads} heads", modes.len())))?;
                    let (o, probs) = head_attention(g, qh, kh, vh, mode, opts.sa_pattern, &cache, opts.keep_attention)?;
                    layer_probs.extend(probs);
                    o
                }
                &LayerMix::Weighted(r) => {
                    if g.shape(r) != [heads, 2] {
                        return Err(Error::shape("layer_mix", g.shape(r), &[heads, 2]));
                    }
                    let (full, _) = head_attention(g, qh, kh, vh, AttnMode::Full, opts.sa_pattern, &cache, false)?;
                    let (sparse, _) = head_attention(g, qh, kh, vh, AttnMode::Sparse, opts.sa_pattern, &cache, false)?;
                    let a = g.scale_by_element(full, r, 2 * h)?;
                    let b = g.scale_by_element(sparse, r, 2 * h + 1)?;
                    g.add(a, b)?
                }
            };
            head_outs.push(out);
        }
        if opts.keep_attention {
            attn.push(layer_probs);
        }
        let o = g.concat_cols(&head_outs)?;
        let o = g.matmul(o, w.wo)?;
        x = g.add(x, o)?;
        let hdn = g.matmul(x, w.w1)?;
        let hdn = g.add_row(hdn, w.b1)?;
        let hdn = g.relu(hdn)?;
        let hdn = g.matmul(hdn, w.w2)?;
        let hdn = g.add_row(hdn, w.b2)?;
        x = g.add(x, hdn)?;
    }
    let logits = g.matmul(x, vars.unembed)?;
    Ok(Forward {
        logits,
        queries,
        keys,
        attn,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            d_head: 3,
            vocab: 10,
            seq_len: 6,
            mlp_hidden: 8,
        }
    }

    #[test]
    fn init_is_seeded() {
        let c = small();
        assert_eq!(Backbone::init(&c, 1), Backbone::init(&c, 1));
        assert_ne!(Backbone::init(&c, 1), Backbone::init(&c, 2));
        let b = Backbone::init(&c, 1);
        assert_eq!(b.prev_emb.shape(), &[11, 6]);
        assert_eq!(b.named_tensors().len(), b.clone().tensors_mut().len());
    }

    #[test]
    fn covering_window_matches_full() {
        let c = small();
        let b = Backbone::init(&c, 3);
        let toks = [1, 4, 2, 9, 0, 3];
        let run = |mode: AttnMode| {
            let mut g = Graph::new();
            let vars = b.register(&mut g, false);
            let pat = SparsityPattern::Streaming { sink: 0, window: 6 };
            let opts = ForwardOptions {
                sa_pattern: &pat,
                keep_attention: false,
            };
            let f = forward(&mut g, &c, &vars, &toks, &mut FixedModes::uniform(2, 2, mode), &opts).unwrap();
            g.value(f.logits).clone()
        };
        assert!(run(AttnMode::Full).max_abs_diff(&run(AttnMode::Sparse)) <= 1e-12);
    }

    #[test]
    fn weighted_one_hot_equals_hard() {
        let c = small();
        let b = Backbone::init(&c, 4);
        let toks = [1, 4, 2, 9, 0, 3];
        let pat = SparsityPattern::Streaming { sink: 1, window: 2 };
        let opts = ForwardOptions {
            sa_pattern: &pat,
            keep_attention: false,
        };
        let modes = vec![vec![AttnMode::Full, AttnMode::Sparse], vec![AttnMode::Sparse, AttnMode::Sparse]];
        let mut g = Graph::new();
        let vars = b.register(&mut g, false);
        let hard = forward(&mut g, &c, &vars, &toks, &mut FixedModes(modes.clone()), &opts).unwrap();
        let hard = g.value(hard.logits).clone();

        struct OneHot(Vec<Vec<AttnMode>>);
        impl HeadController for OneHot {
            fn layer_mix(&mut self, g: &mut Graph, layer: usize, _: Var) -> Result<LayerMix> {
                Ok(LayerMix::Weighted(g.constant(crate::router::one_hot(&self.0[layer]))))
            }
        }
        let mut g = Graph::new();
        let vars = b.register(&mut g, false);
        let soft = forward(&mut g, &c, &vars, &toks, &mut OneHot(modes), &opts).unwrap();
        assert!(g.value(soft.logits).max_abs_diff(&hard) <= 1e-12);
    }

    #[test]
    fn out_of_vocab_token_rejected() {
        let c = small();
        let b = Backbone::init(&c, 4);
        let mut g = Graph::new();
        let vars = b.register(&mut g, false);
        let opts = ForwardOptions {
            sa_pattern: &SparsityPattern::Full,
            keep_attention: false,
        };
        let r = forward(&mut g, &c, &vars, &[1, 10], &mut FixedModes::uniform(2, 2, AttnMode::Full), &opts);
        assert!(matches!(r, Err(Error::Index { .. })));
    }
}
