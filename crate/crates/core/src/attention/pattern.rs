use serde::{Deserialize, Serialize};

use super::mask::{block_sparse_mask, streaming_mask, AttnMask};
use crate::autograd::DTensor;
use crate::error::{Error, Result};

/// How a single head attends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SparsityPattern {
    Full,
    Streaming { sink: usize, window: usize },
    BlockSparse { block_size: usize, mass_threshold: f64 },
}

impl SparsityPattern {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Full => Ok(()),
            Self::Streaming { window, .. } if window == 0 => {
                Err(Error::Config("streaming window must be >= 1".into()))
            }
            Self::Streaming { .. } => Ok(()),
            Self::BlockSparse { block_size, .. } if block_size == 0 => {
                Err(Error::Config("block_size must be >= 1".into()))
            }
            Self::BlockSparse { mass_threshold, .. } if !(mass_threshold > 0.0 && mass_threshold <= 1.0) => {
                Err(Error::Config(format!("mass_threshold must lie in (0, 1], got {mass_threshold}")))
            }
            Self::BlockSparse { .. } => Ok(()),
        }
    }

    /// Pruning ratio at sequence length `len` when it does not depend on the
    /// data. Block-sparse selection does, so it returns `None`; use
    /// [`AttnMask::rho`] on the realized mask instead.
    pub fn rho(&self, len: usize) -> Option<f64> {
        match *self {
            Self::Full => Some(0.0),
            Self::Streaming { sink, window } => Some(streaming_rho(len, sink, window)),
            Self::BlockSparse { .. } => None,
        }
    }

    /// Realized mask for one head's queries and keys.
    pub fn mask(&self, q: &DTensor, k: &DTensor) -> Result<AttnMask> {
        self.validate()?;
        match *self {
            Self::Full => Ok(AttnMask::causal(q.rows())),
            Self::Streaming { sink, window } => streaming_mask(q.rows(), sink, window),
            Self::BlockSparse {
                block_size,
                mass_threshold,
            } => block_sparse_mask(q, k, block_size, mass_threshold),
        }
    }
}

/// Mean over query rows of `max(0, i + 1 - sink - window) / (i + 1)`.
pub fn streaming_rho(len: usize, sink: usize, window: usize) -> f64 {
    if len == 0 {
        return 0.0;
    }
    let kept = sink.saturating_add(window);
    let total: f64 = (0..len)
        .map(|i| (i + 1).saturating_sub(kept) as f64 / (i + 1) as f64)
        .sum();
    total / len as f64
}
