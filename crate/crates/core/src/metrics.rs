//! Model sparsity ratio (fraction of SA heads) and effective sparsity ratio
//! (mean pruned-token fraction, zero for FA heads).

use serde::{Deserialize, Serialize};

use crate::attention::{AttnMode, HeadAssignment, SparsityPattern};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};

/// Places assignments into an `L x H` grid, rejecting gaps, duplicates and
/// out-of-range indices.
pub fn assignment_grid(assignments: &[HeadAssignment], layers: usize, heads: usize) -> Result<Vec<Vec<AttnMode>>> {
    if assignments.len() != layers * heads {
        return Err(Error::Assignment(format!(
            "expected {} assignments for {layers} layers x {heads} heads, got {}",
            layers * heads,
            assignments.len()
        )));
    }
    let mut grid = vec![vec![None; heads]; layers];
    for a in assignments {
        let slot = grid
            .get_mut(a.layer)
            .and_then(|row| row.get_mut(a.head))
            .ok_or_else(|| Error::Assignment(format!("({}, {}) out of range", a.layer, a.head)))?;
        if slot.replace(a.mode).is_some() {
            return Err(Error::Assignment(format!("duplicate assignment for ({}, {})", a.layer, a.head)));
        }
    }
    Ok(grid
        .into_iter()
        .map(|row| row.into_iter().map(|m| m.expect("count check leaves no gaps")).collect())
        .collect())
}

pub fn assignments_from_grid(grid: &[Vec<AttnMode>]) -> Vec<HeadAssignment> {
    grid.iter()
        .enumerate()
        .flat_map(|(layer, row)| {
            row.iter()
                .enumerate()
                .map(move |(head, &mode)| HeadAssignment { layer, head, mode })
        })
        .collect()
}

pub fn compute_msr_hard(assignments: &[HeadAssignment], layers: usize, heads: usize) -> Result<f64> {
    if layers * heads == 0 {
        return Err(Error::InvalidArgument("sparsity ratio needs at least one head".into()));
    }
    let grid = assignment_grid(assignments, layers, heads)?;
    let sparse = grid.iter().flatten().filter(|m| m.is_sparse()).count();
    Ok(sparse as f64 / (layers * heads) as f64)
}

/// Mean SA column of per-layer `H x 2` STE outputs. The forward value is
/// the hard ratio; the gradient is that of the soft routing.
pub fn compute_msr_soft(g: &mut Graph, r_outs: &[Var]) -> Result<Var> {
    let mut cols = Vec::with_capacity(r_outs.len());
    for &r in r_outs {
        if g.shape(r).len() != 2 || g.shape(r)[1] != 2 {
            return Err(Error::shape("compute_msr_soft", g.shape(r), &[0, 2]));
        }
        cols.push(g.slice_cols(r, 1, 1)?);
    }
    let all = g.concat_rows(&cols)?;
    g.mean(all)
}

/// ESR from an explicit per-head pruning ratio, indexed `[layer][head]`.
pub fn compute_esr_with_rho(assignments: &[HeadAssignment], rho: &[Vec<f64>]) -> Result<f64> {
    let layers = rho.len();
    let heads = rho.first().map_or(0, Vec::len);
    let grid = assignment_grid(assignments, layers, heads)?;
    let mut total = 0.0;
    for (modes, rhos) in grid.iter().zip(rho) {
        if rhos.len() != heads {
            return Err(Error::shape("compute_esr", &[layers, heads], &[rhos.len()]));
        }
        for (m, &r) in modes.iter().zip(rhos) {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::InvalidArgument(format!("pruning ratio {r} outside [0, 1)")));
            }
            if m.is_sparse() {
                total += r;
            }
        }
    }
    Ok(total / (layers * heads) as f64)
}

/// ESR for data-independent patterns, `patterns[layer][head]` being the
/// pattern a head would use when routed to SA.
pub fn compute_esr(assignments: &[HeadAssignment], patterns: &[Vec<SparsityPattern>], seq_len: usize) -> Result<f64> {
    let rho = patterns
        .iter()
        .map(|row| {
            row.iter()
                .map(|p| {
                    p.rho(seq_len).ok_or_else(|| {
                        Error::InvalidArgument("block-sparse ratio depends on data; pass realized ratios".into())
                    })
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    compute_esr_with_rho(assignments, &rho)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub msr: f64,
    pub esr: f64,
    pub per_layer_msr: Vec<f64>,
    /// Pruning ratio each head realizes under its assigned mode.
    pub per_head_rho: Vec<Vec<f64>>,
}

impl SparsityReport {
    /// `sa_rho[layer][head]` is the ratio a head would have if routed to SA.
    pub fn new(assignments: &[HeadAssignment], sa_rho: &[Vec<f64>]) -> Result<Self> {
        let layers = sa_rho.len();
        let heads = sa_rho.first().map_or(0, Vec::len);
        let grid = assignment_grid(assignments, layers, heads)?;
        let per_layer_msr = grid
            .iter()
            .map(|row| row.iter().filter(|m| m.is_sparse()).count() as f64 / heads as f64)
            .collect();
        let per_head_rho = grid
            .iter()
            .zip(sa_rho)
            .map(|(row, rhos)| row.iter().zip(rhos).map(|(m, &r)| if m.is_sparse() { r } else { 0.0 }).collect())
            .collect();
        Ok(Self {
            msr: compute_msr_hard(assignments, layers, heads)?,
            esr: compute_esr_with_rho(assignments, sa_rho)?,
            per_layer_msr,
            per_head_rho,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::streaming_mask;
    use crate::autograd::DTensor;
    use crate::router::{gumbel_soft_route_on_graph, ste_harden_on_graph};

    fn grid(layers: usize, heads: usize, sparse: &[(usize, usize)]) -> Vec<HeadAssignment> {
        let g: Vec<Vec<AttnMode>> = (0..layers)
            .map(|l| {
                (0..heads)
                    .map(|h| if sparse.contains(&(l, h)) { AttnMode::Sparse } else { AttnMode::Full })
                    .collect()
            })
            .collect();
        assignments_from_grid(&g)
    }

    #[test]
    fn msr_examples() {
        let all: Vec<(usize, usize)> = (0..2).flat_map(|l| (0..4).map(move |h| (l, h))).collect();
        assert_eq!(compute_msr_hard(&grid(2, 4, &all), 2, 4).unwrap(), 1.0);
        assert_eq!(compute_msr_hard(&grid(2, 4, &[]), 2, 4).unwrap(), 0.0);
        assert_eq!(compute_msr_hard(&grid(2, 4, &[(0, 1), (1, 0), (1, 3)]), 2, 4).unwrap(), 0.375);
        assert!(compute_msr_hard(&grid(2, 4, &[]), 2, 3).is_err());
    }

    #[test]
    fn esr_examples() {
        let rho: Vec<Vec<f64>> = vec![vec![0.9; 5]; 2];
        assert_eq!(compute_esr_with_rho(&grid(2, 5, &[]), &rho).unwrap(), 0.0);
        let esr = compute_esr_with_rho(&grid(2, 5, &[(1, 2)]), &rho).unwrap();
        assert!((esr - 0.09).abs() < 1e-15);

        let p = SparsityPattern::Streaming { sink: 1, window: 2 };
        let esr = compute_esr(&grid(1, 1, &[(0, 0)]), &[vec![p]], 8).unwrap();
        assert_eq!(esr, streaming_mask(8, 1, 2).unwrap().rho());
    }

    #[test]
    fn soft_msr_forward_equals_hard_and_carries_gradient() {
        let mut g = Graph::new();
        let z = g.param(DTensor::new(vec![3, 2], vec![0.0, 0.4, 0.3, -0.2, -1.0, 2.0]).unwrap());
        let r = gumbel_soft_route_on_graph(&mut g, z, None, 1.0).unwrap();
        let out = ste_harden_on_graph(&mut g, r).unwrap();
        let msr = compute_msr_soft(&mut g, &[out]).unwrap();
        assert_eq!(g.value(msr).item(), 2.0 / 3.0);
        g.backward(msr).unwrap();
        assert!(g.grad(z).unwrap().iter().all(|&v| v != 0.0));
    }

    #[test]
    fn report_bounds() {
        let rho = vec![vec![0.5, 0.25], vec![0.75, 0.1]];
        let r = SparsityReport::new(&grid(2, 2, &[(0, 0), (1, 0)]), &rho).unwrap();
        assert_eq!(r.msr, 0.5);
        assert_eq!(r.per_layer_msr, vec![0.5, 0.5]);
        assert_eq!(r.per_head_rho, vec![vec![0.5, 0.0], vec![0.75, 0.0]]);
        assert!(r.esr <= r.msr * 0.75);
    }
}
