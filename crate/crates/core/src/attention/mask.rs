use std::rc::Rc;

use crate::autograd::{kernels, DTensor};
use crate::error::{Error, Result};

/// Dense boolean attention mask over `(query, key)` positions.
/// `true` means the key is visible to the query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    len: usize,
    allowed: Vec<bool>,
    causal: bool,
}

impl AttnMask {
    /// Builds a mask from a row-major `len x len` table and validates it.
    pub fn from_dense(len: usize, allowed: Vec<bool>, causal: bool) -> Result<Self> {
        if allowed.len() != len * len {
            return Err(Error::shape("attn_mask", &[len, len], &[allowed.len()]));
        }
        let mask = Self {
            len,
            allowed,
            causal,
        };
        mask.validate()?;
        Ok(mask)
    }

    pub fn causal(len: usize) -> Self {
        let allowed = (0..len * len).map(|e| e % len <= e / len).collect();
        Self {
            len,
            allowed,
            causal: true,
        }
    }

    pub fn dense(len: usize) -> Self {
        Self {
            len,
            allowed: vec![true; len * len],
            causal: false,
        }
    }

    fn validate(&self) -> Result<()> {
        for i in 0..self.len {
            if self.causal && (i + 1..self.len).any(|j| self.allows(i, j)) {
                return Err(Error::InvalidArgument(format!(
                    "causal mask row {i} attends to a future key"
                )));
            }
            if self.row_count(i) == 0 {
                return Err(Error::EmptyMaskRow { row: i });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_causal(&self) -> bool {
        self.causal
    }

    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.len + j]
    }

    pub fn row_count(&self, i: usize) -> usize {
        self.allowed[i * self.len..(i + 1) * self.len]
            .iter()
            .filter(|&&a| a)
            .count()
    }

    /// Keys the query could see without any pruning.
    pub fn row_capacity(&self, i: usize) -> usize {
        if self.causal {
            i + 1
        } else {
            self.len
        }
    }

    /// Pruning ratio: mean over query rows of the fraction of visible keys removed.
    pub fn rho(&self) -> f64 {
        if self.len == 0 {
            return 0.0;
        }
        let total: f64 = (0..self.len)
            .map(|i| {
                let cap = self.row_capacity(i);
                (cap - self.row_count(i)) as f64 / cap as f64
            })
            .sum();
        total / self.len as f64
    }

    /// Fill pattern for `Graph::masked_fill`: `true` where the key is hidden.
    pub fn fill(&self) -> Rc<[bool]> {
        self.allowed.iter().map(|&a| !a).collect()
    }
}

/// Sink tokens plus a sliding local window: query `i` sees key `j` iff
/// `j <= i` and (`j < sink` or `i - j < window`).
pub fn streaming_mask(len: usize, sink: usize, window: usize) -> Result<AttnMask> {
    if window == 0 {
        return Err(Error::InvalidArgument(
            "streaming window must be >= 1 so every query sees itself".into(),
        ));
    }
    let mut allowed = vec![false; len * len];
    for i in 0..len {
        for j in 0..=i {
            allowed[i * len + j] = j < sink || i - j < window;
        }
    }
    AttnMask::from_dense(len, allowed, true)
}

/// Per-query-block selection of key blocks by causal softmax mass.
///
/// `mass[a][b]` is the mean over the rows of query block `a` of the
/// probability assigned to keys in block `b`. The diagonal block is always
/// kept; remaining causal blocks are added in decreasing mass order until the
/// kept mass reaches `mass_threshold`.
pub fn block_sparse_mask(q: &DTensor, k: &DTensor, block_size: usize, mass_threshold: f64) -> Result<AttnMask> {
    let (len, d) = (q.rows(), q.cols());
    if k.shape() != q.shape() {
        return Err(Error::shape("block_sparse_mask", q.shape(), k.shape()));
    }
    if block_size == 0 {
        return Err(Error::InvalidArgument("block_size must be >= 1".into()));
    }
    if !(mass_threshold > 0.0 && mass_threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mass_threshold must lie in (0, 1], got {mass_threshold}"
        )));
    }
    let mass = block_mass(q.data(), k.data(), len, d, block_size);
    let nb = len.div_ceil(block_size);
    let mut allowed = vec![false; len * len];
    for a in 0..nb {
        let kept = select_blocks(&mass[a], a, mass_threshold);
        for i in a * block_size..((a + 1) * block_size).min(len) {
            for &b in &kept {
                for j in b * block_size..((b + 1) * block_size).min(i + 1) {
                    allowed[i * len + j] = true;
                }
            }
        }
    }
    AttnMask::from_dense(len, allowed, true)
}

/// Mean causal-softmax mass per (query block, key block); entry `[a][b]` for `b <= a`.
pub fn block_mass(q: &[f64], k: &[f64], len: usize, d: usize, block_size: usize) -> Vec<Vec<f64>> {
    let nb = len.div_ceil(block_size);
    let scale = 1.0 / (d as f64).sqrt();
    let mut mass = vec![vec![0.0; nb]; nb];
    let mut row = Vec::with_capacity(len);
    for i in 0..len {
        row.clear();
        let qi = &q[i * d..(i + 1) * d];
        row.extend((0..=i).map(|j| kernels::dot(qi, &k[j * d..(j + 1) * d]) * scale));
        kernels::softmax_row(&mut row);
        let a = i / block_size;
        for (j, p) in row.iter().enumerate() {
            mass[a][j / block_size] += p;
        }
    }
    for (a, masses) in mass.iter_mut().enumerate() {
        let rows = (((a + 1) * block_size).min(len) - a * block_size) as f64;
        masses.iter_mut().for_each(|m| *m /= rows);
    }
    mass
}

/// Greedy selection for one query block; returns kept key block indices.
pub fn select_blocks(masses: &[f64], diag: usize, mass_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..diag).collect();
    // stable: equal masses keep the lower block first
    order.sort_by(|&x, &y| masses[y].total_cmp(&masses[x]));
    let mut kept = vec![diag];
    let mut total = masses[diag];
    for b in order {
        if total >= mass_threshold {
            break;
        }
        kept.push(b);
        total += masses[b];
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streaming_window_covering_everything_is_causal() {
        assert_eq!(streaming_mask(4, 0, 4).unwrap(), AttnMask::causal(4));
    }

    #[test]
    fn streaming_hand_row() {
        let m = streaming_mask(5, 1, 2).unwrap();
        let row: Vec<usize> = (0..5).filter(|&j| m.allows(4, j)).collect();
        assert_eq!(row, vec![0, 3, 4]);
    }

    #[test]
    fn table_default_scaled_check() {
        for s in [1, 7, 64, 300] {
            assert_eq!(streaming_mask(s, 128, 2048).unwrap(), AttnMask::causal(s));
        }
        // the exact boundary: s = sink + window
        let s = 2176;
        let m = streaming_mask(s, 128, 2048).unwrap();
        assert_eq!(m.rho(), 0.0);
        assert!((0..s).all(|i| m.row_count(i) == i + 1));
    }

    #[test]
    fn zero_window_rejected() {
        assert!(streaming_mask(4, 1, 0).is_err());
    }

    #[test]
    fn empty_row_rejected() {
        let mut allowed = AttnMask::causal(3).allowed;
        allowed[3] = false;
        allowed[4] = false;
        assert!(matches!(
            AttnMask::from_dense(3, allowed, true),
            Err(Error::EmptyMaskRow { row: 1 })
        ));
    }

    #[test]
    fn rho_of_streaming_matches_row_formula() {
        let m = streaming_mask(8, 1, 2).unwrap();
        let expected = (0.0 + 0.0 + 0.0 + 1.0 / 4.0 + 2.0 / 5.0 + 3.0 / 6.0 + 4.0 / 7.0 + 5.0 / 8.0) / 8.0;
        assert!((m.rho() - expected).abs() < 1e-15);
    }

    #[test]
    fn single_block_is_fully_causal() {
        let q = DTensor::new(vec![3, 2], vec![1.0, -1.0, 0.5, 2.0, -3.0, 0.0]).unwrap();
        let m = block_sparse_mask(&q, &q, 4, 0.1).unwrap();
        assert_eq!(m, AttnMask::causal(3));
    }

    #[test]
    fn block_selection_takes_largest_first() {
        let kept = select_blocks(&[0.1, 0.5, 0.15, 0.25], 3, 0.7);
        assert_eq!(kept, vec![3, 1]);
        let kept = select_blocks(&[0.2, 0.2, 0.6], 2, 0.75);
        assert_eq!(kept, vec![2, 0]);
    }
}
