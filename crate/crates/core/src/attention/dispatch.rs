//! Mixed FA/SA execution for one layer on plain tensors.
//!
//! Both paths call the same per-row kernel with the same key order, so their
//! outputs are bit-identical; they differ only in data movement.

use serde::Serialize;

use super::mask::AttnMask;
use super::ops::AttnMode;
use super::pattern::SparsityPattern;
use crate::autograd::{kernels, DTensor};
use crate::error::{Error, Result};

/// Buffer traffic of one dispatch call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DispatchStats {
    pub allocations: usize,
    pub floats_allocated: usize,
}

impl DispatchStats {
    fn alloc(&mut self, n: usize) -> Vec<f64> {
        if n > 0 {
            self.allocations += 1;
            self.floats_allocated += n;
        }
        vec![0.0; n]
    }
}

/// Strided view of one head inside a row-major `s x width` buffer.
#[derive(Clone, Copy)]
struct HeadView<'a> {
    data: &'a [f64],
    width: usize,
    offset: usize,
    d: usize,
}

impl<'a> HeadView<'a> {
    fn new(data: &'a [f64], width: usize, offset: usize, d: usize) -> Self {
        Self { data, width, offset, d }
    }

    #[inline]
    fn row(&self, i: usize) -> &'a [f64] {
        let start = i * self.width + self.offset;
        &self.data[start..start + self.d]
    }
}

/// Which keys row `i` sees.
enum KeyPlan {
    Causal,
    Streaming { sink: usize, window: usize },
    Mask(AttnMask),
}

impl KeyPlan {
    fn for_each_key(&self, i: usize, mut f: impl FnMut(usize)) {
        match self {
            Self::Causal => (0..=i).for_each(f),
            &Self::Streaming { sink, window } => {
                let head_end = sink.min(i + 1);
                let tail_start = (i + 1).saturating_sub(window).max(head_end);
                (0..head_end).for_each(&mut f);
                (tail_start..=i).for_each(f);
            }
            Self::Mask(m) => (0..=i).filter(|&j| m.allows(i, j)).for_each(f),
        }
    }
}

fn plan_for(mode: AttnMode, pattern: &SparsityPattern, q: HeadView, k: HeadView, len: usize) -> Result<KeyPlan> {
    Ok(match (mode, *pattern) {
        (AttnMode::Full, _) | (AttnMode::Sparse, SparsityPattern::Full) => KeyPlan::Causal,
        (AttnMode::Sparse, SparsityPattern::Streaming { sink, window }) => {
            if window == 0 {
                return Err(Error::InvalidArgument("streaming window must be >= 1".into()));
            }
            KeyPlan::Streaming { sink, window }
        }
        (AttnMode::Sparse, p @ SparsityPattern::BlockSparse { .. }) => {
            let gather = |v: HeadView| {
                let data = (0..len).flat_map(|i| v.row(i).iter().copied()).collect();
                DTensor::new(vec![len, v.d], data)
            };
            KeyPlan::Mask(p.mask(&gather(q)?, &gather(k)?)?)
        }
    })
}

/// Scratch reused across rows and heads.
struct Scratch {
    keys: Vec<usize>,
    scores: Vec<f64>,
}

/// One output row of one head.
#[allow(clippy::too_many_arguments)]
fn attend_row(q: HeadView, k: HeadView, v: HeadView, plan: &KeyPlan, i: usize, scale: f64, sc: &mut Scratch, out: &mut [f64]) {
    sc.keys.clear();
    plan.for_each_key(i, |j| sc.keys.push(j));
    sc.scores.clear();
    let qi = q.row(i);
    sc.scores.extend(sc.keys.iter().map(|&j| kernels::dot(qi, k.row(j)) * scale));
    kernels::softmax_row(&mut sc.scores);
    out.iter_mut().for_each(|o| *o = 0.0);
    for (&j, &p) in sc.keys.iter().zip(&sc.scores) {
        for (o, x) in out.iter_mut().zip(v.row(j)) {
            *o += p * x;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_head(
    q: HeadView,
    k: HeadView,
    v: HeadView,
    mode: AttnMode,
    pattern: &SparsityPattern,
    len: usize,
    sc: &mut Scratch,
    out: &mut [f64],
    out_width: usize,
    out_offset: usize,
) -> Result<()> {
    let plan = plan_for(mode, pattern, q, k, len)?;
    let scale = 1.0 / (q.d as f64).sqrt();
    for i in 0..len {
        let start = i * out_width + out_offset;
        attend_row(q, k, v, &plan, i, scale, sc, &mut out[start..start + v.d]);
    }
    Ok(())
}

fn check(q: &DTensor, k: &DTensor, v: &DTensor, heads: usize, modes: &[AttnMode]) -> Result<(usize, usize)> {
    if q.shape() != k.shape() || q.shape() != v.shape() || q.shape().len() != 2 {
        return Err(Error::shape("dispatch", q.shape(), v.shape()));
    }
    if heads == 0 || q.cols() % heads != 0 {
        return Err(Error::shape("dispatch", q.shape(), &[heads]));
    }
    if modes.len() != heads {
        return Err(Error::Assignment(format!("{} modes for {heads} heads", modes.len())));
    }
    Ok((q.rows(), q.cols() / heads))
}

fn new_scratch(stats: &mut DispatchStats, len: usize) -> Scratch {
    // one key list and one score row, sized for the longest row
    stats.allocations += 2;
    stats.floats_allocated += 2 * len;
    Scratch {
        keys: Vec::with_capacity(len),
        scores: Vec::with_capacity(len),
    }
}

/// Splits heads into FA and SA groups, copies each group's Q/K/V columns
/// into contiguous buffers, runs each group, then scatters into the output.
pub fn serial_dispatch(
    q: &DTensor,
    k: &DTensor,
    v: &DTensor,
    heads: usize,
    modes: &[AttnMode],
    sa_pattern: &SparsityPattern,
) -> Result<(DTensor, DispatchStats)> {
    let (len, d) = check(q, k, v, heads, modes)?;
    let width = heads * d;
    let mut stats = DispatchStats::default();
    let mut out = stats.alloc(len * width);
    let mut sc = new_scratch(&mut stats, len);

    for group_mode in [AttnMode::Full, AttnMode::Sparse] {
        let idx: Vec<usize> = (0..heads).filter(|&h| modes[h] == group_mode).collect();
        if idx.is_empty() {
            continue;
        }
        let gw = idx.len() * d;
        let gather = |src: &DTensor, stats: &mut DispatchStats| {
            let mut buf = stats.alloc(len * gw);
            for i in 0..len {
                for (gi, &h) in idx.iter().enumerate() {
                    buf[i * gw + gi * d..i * gw + (gi + 1) * d].copy_from_slice(&src.row(i)[h * d..(h + 1) * d]);
                }
            }
            buf
        };
        let (gq, gk, gv) = (gather(q, &mut stats), gather(k, &mut stats), gather(v, &mut stats));
        let mut gout = stats.alloc(len * gw);
        for gi in 0..idx.len() {
            let view = |data| HeadView::new(data, gw, gi * d, d);
            run_head(view(&gq), view(&gk), view(&gv), group_mode, sa_pattern, len, &mut sc, &mut gout, gw, gi * d)?;
        }
        for i in 0..len {
            for (gi, &h) in idx.iter().enumerate() {
                out[i * width + h * d..i * width + (h + 1) * d].copy_from_slice(&gout[i * gw + gi * d..i * gw + (gi + 1) * d]);
            }
        }
    }
    Ok((DTensor::new(vec![len, width], out)?, stats))
}

/// One pass over heads, branching per head on its mode, reading Q/K/V in place.
pub fn unified_dispatch<'a>(
    q: &'a DTensor,
    k: &'a DTensor,
    v: &'a DTensor,
    heads: usize,
    modes: &[AttnMode],
    sa_pattern: &SparsityPattern,
) -> Result<(DTensor, DispatchStats)> {
    let (len, d) = check(q, k, v, heads, modes)?;
    let width = heads * d;
    let mut stats = DispatchStats::default();
    let mut out = stats.alloc(len * width);
    let mut sc = new_scratch(&mut stats, len);
    for (h, &mode) in modes.iter().enumerate() {
        let view = |t: &'a DTensor| HeadView::new(t.data(), width, h * d, d);
        run_head(view(q), view(k), view(v), mode, sa_pattern, len, &mut sc, &mut out, width, h * d)?;
    }
    Ok((DTensor::new(vec![len, width], out)?, stats))
}
