//! Single-layer attention: full, streaming and block-sparse heads, their
//! per-head composition, and two dispatch strategies for mixed layers.

mod dispatch;
mod mask;
mod ops;
mod pattern;

pub use dispatch::{serial_dispatch, unified_dispatch, DispatchStats};
pub use mask::{block_mass, block_sparse_mask, select_blocks, streaming_mask, AttnMask};
pub use ops::{
    attention_on_graph, full_attention, head_slice, hybrid_layer, layer_modes, sparse_attention, AttnMode,
    HeadAssignment,
};
pub use pattern::{streaming_rho, SparsityPattern};
