//! Node Splitting Graphs for multimodal graph learning.
//!
//! Each multimodal node is split into one unimodal sub-node per modality and
//! the graph is rewired into a heterogeneous graph with intra-node,
//! self-type and cross-type relations ([`nsg`]). Intra-node cliques can be
//! sparsified to maximum spanning trees over cosine similarity
//! ([`sparsifier`]). Relation-typed message passing ([`hgnn`]) runs inside a
//! mixture of experts under noisy top-k gating ([`moe`]), trained end to end
//! by [`trainkit`]. [`spectral`] verifies the two-block spectral structure of
//! the rewired graph numerically.

pub mod error;
pub mod graphdata;
pub mod hgnn;
pub mod moe;
pub mod nsg;
pub mod numerics;
pub mod rng;
pub mod sparsifier;
pub mod spectral;
pub mod trainkit;

pub use error::{NsgError, Result};
