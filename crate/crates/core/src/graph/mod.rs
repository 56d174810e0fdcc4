//! Bipartite user–item graphs, embedding tables and LGC kernels.

mod bipartite;
pub mod dump;
mod embedding;
mod lgc;

pub use bipartite::BipartiteGraph;
pub use embedding::{EmbeddingTable, GradAccumulator, Matrix, RowSource};
pub use lgc::{
    combine_layers, infer, item_views_with_fallback, propagate, propagate_adjoint, Inferred,
    LayerStack, PropagationSpec,
};
