use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::mask::AttnMask;
use super::pattern::SparsityPattern;
use crate::autograd::{DTensor, Graph, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttnMode {
    #[serde(rename = "FA")]
    Full,
    #[serde(rename = "SA")]
    Sparse,
}

impl AttnMode {
    pub fn is_sparse(self) -> bool {
        self == Self::Sparse
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadAssignment {
    pub layer: usize,
    pub head: usize,
    pub mode: AttnMode,
}

/// Orders a layer's assignments by head, rejecting gaps and duplicates.
pub fn layer_modes(assignments: &[HeadAssignment], heads: usize) -> Result<Vec<AttnMode>> {
    let mut modes = vec![None; heads];
    let layer = assignments.first().map(|a| a.layer);
    for a in assignments {
        if Some(a.layer) != layer {
            return Err(Error::Assignment(format!(
                "assignments mix layers {} and {}",
                layer.unwrap_or(0),
                a.layer
            )));
        }
        let slot = modes
            .get_mut(a.head)
            .ok_or_else(|| Error::Assignment(format!("head {} out of range for {heads} heads", a.head)))?;
        if slot.replace(a.mode).is_some() {
            return Err(Error::Assignment(format!("duplicate assignment for head {}", a.head)));
        }
    }
    modes
        .into_iter()
        .enumerate()
        .map(|(h, m)| m.ok_or_else(|| Error::Assignment(format!("missing assignment for head {h}"))))
        .collect()
}

/// Records `softmax(q k^T / sqrt(d) with hidden keys at -inf) v` on the tape.
pub fn attention_on_graph(g: &mut Graph, q: Var, k: Var, v: Var, hidden: Option<Rc<[bool]>>) -> Result<Var> {
    if g.shape(q) != g.shape(k) || g.shape(k)[0] != g.shape(v)[0] {
        return Err(Error::shape("attention", g.shape(q), g.shape(k)));
    }
    let d = g.shape(q)[1] as f64;
    let scores = g.matmul_nt(q, k)?;
    let scores = g.scale(scores, 1.0 / d.sqrt())?;
    let scores = match hidden {
        Some(fill) => g.masked_fill(scores, fill, f64::NEG_INFINITY)?,
        None => scores,
    };
    let probs = g.softmax(scores)?;
    g.matmul(probs, v)
}

fn check_qkv(q: &DTensor, k: &DTensor, v: &DTensor) -> Result<()> {
    if q.shape().len() != 2 || q.shape() != k.shape() {
        return Err(Error::shape("attention", q.shape(), k.shape()));
    }
    if v.shape().len() != 2 || v.rows() != k.rows() {
        return Err(Error::shape("attention", k.shape(), v.shape()));
    }
    Ok(())
}

fn eval_attention(q: &DTensor, k: &DTensor, v: &DTensor, hidden: Option<Rc<[bool]>>) -> Result<DTensor> {
    let mut g = Graph::with_finite_checks(false);
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = attention_on_graph(&mut g, qv, kv, vv, hidden)?;
    Ok(g.value(out).clone())
}

/// Dense softmax attention for one head, optionally causal.
pub fn full_attention(q: &DTensor, k: &DTensor, v: &DTensor, causal: bool) -> Result<DTensor> {
    check_qkv(q, k, v)?;
    let hidden = causal.then(|| AttnMask::causal(q.rows()).fill());
    eval_attention(q, k, v, hidden)
}

/// Attention restricted to the keys `mask` allows.
pub fn sparse_attention(q: &DTensor, k: &DTensor, v: &DTensor, mask: &AttnMask) -> Result<DTensor> {
    check_qkv(q, k, v)?;
    if mask.len() != q.rows() {
        return Err(Error::shape("sparse_attention", q.shape(), &[mask.len(), mask.len()]));
    }
    eval_attention(q, k, v, Some(mask.fill()))
}

/// Columns `[h*d, (h+1)*d)` of an `s x (H*d)` tensor.
pub fn head_slice(x: &DTensor, heads: usize, h: usize) -> Result<DTensor> {
    let (s, width) = (x.rows(), x.cols());
    if heads == 0 || width % heads != 0 || h >= heads {
        return Err(Error::shape("head_slice", x.shape(), &[heads, h]));
    }
    let d = width / heads;
    let mut out = Vec::with_capacity(s * d);
    for i in 0..s {
        out.extend_from_slice(&x.row(i)[h * d..(h + 1) * d]);
    }
    DTensor::new(vec![s, d], out)
}

/// Per-head output: full causal attention for FA heads, `sa_pattern` for SA
/// heads, concatenated along features in head order.
pub fn hybrid_layer(
    q: &DTensor,
    k: &DTensor,
    v: &DTensor,
    heads: usize,
    assignments: &[HeadAssignment],
    sa_pattern: &SparsityPattern,
) -> Result<DTensor> {
    check_qkv(q, k, v)?;
    let modes = layer_modes(assignments, heads)?;
    let mut outs = Vec::with_capacity(heads);
    for (h, mode) in modes.iter().enumerate() {
        let (qh, kh, vh) = (head_slice(q, heads, h)?, head_slice(k, heads, h)?, head_slice(v, heads, h)?);
        let out = match mode {
            AttnMode::Full => full_attention(&qh, &kh, &vh, true)?,
            AttnMode::Sparse => sparse_attention(&qh, &kh, &vh, &sa_pattern.mask(&qh, &kh)?)?,
        };
        outs.push(out);
    }
    let s = q.rows();
    let mut data = Vec::with_capacity(s * v.cols());
    for i in 0..s {
        for o in &outs {
            data.extend_from_slice(o.row(i));
        }
    }
    DTensor::new(vec![s, v.cols()], data)
}
