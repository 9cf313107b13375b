//! Node splitting and graph rewiring.
//!
//! Every node `u` becomes `m` sub-nodes `<u,t>` with flat index `u*m + t`.
//! Sub-nodes of one node form a clique of intra-node edges (or a spanning
//! tree once sparsified); each original edge `(u,v)` becomes self-type edges
//! `<u,i>-<v,i>`, cross-type edges `<u,i>-<v,j>` (`i != j`), or both.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{NsgError, Result};
use crate::graphdata::MultimodalGraph;
use crate::numerics::{SparseMatrix, Tensor2};
use crate::sparsifier::{build_sparse_inter_cross, SpanningTree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SubNodeId {
    pub node: usize,
    pub modality: usize,
}

impl SubNodeId {
    pub fn flat(self, m: usize) -> usize {
        self.node * m + self.modality
    }

    pub fn from_flat(i: usize, m: usize) -> Self {
        Self {
            node: i / m,
            modality: i % m,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationType {
    IntraNode,
    InterSelf,
    InterCross,
}

impl RelationType {
    pub const ALL: [RelationType; 3] = [Self::IntraNode, Self::InterSelf, Self::InterCross];

    /// Label used in exported edge files.
    pub fn label(self) -> &'static str {
        match self {
            Self::IntraNode => "intra",
            Self::InterSelf => "self",
            Self::InterCross => "cross",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeVariant {
    SelfType,
    CrossType,
    Hybrid,
}

impl EdgeVariant {
    pub fn has_self(self) -> bool {
        matches!(self, Self::SelfType | Self::Hybrid)
    }

    pub fn has_cross(self) -> bool {
        matches!(self, Self::CrossType | Self::Hybrid)
    }

    /// Inter-node edges contributed by one original edge.
    pub fn inter_edges_per_edge(self, m: usize) -> usize {
        match self {
            Self::SelfType => m,
            Self::CrossType => m * m - m,
            Self::Hybrid => m * m,
        }
    }
}

impl fmt::Display for EdgeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SelfType => "self",
            Self::CrossType => "cross",
            Self::Hybrid => "hybrid",
        })
    }
}

impl FromStr for EdgeVariant {
    type Err = NsgError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self" => Ok(Self::SelfType),
            "cross" => Ok(Self::CrossType),
            "hybrid" => Ok(Self::Hybrid),
            _ => Err(NsgError::InvalidConfig(format!(
                "unknown edge variant {s:?} (expected self, cross or hybrid)"
            ))),
        }
    }
}

/// Heterogeneous graph over sub-nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct NsgGraph {
    pub n: usize,
    pub m: usize,
    pub variant: EdgeVariant,
    pub sparsified: bool,
    /// `(min_flat, max_flat, relation)`, sorted, each undirected edge once.
    pub edges: Vec<(usize, usize, RelationType)>,
}

impl NsgGraph {
    pub fn num_subnodes(&self) -> usize {
        self.n * self.m
    }

    /// Modality index of a sub-node.
    pub fn node_type(&self, flat: usize) -> usize {
        flat % self.m
    }

    /// Original node of a sub-node.
    pub fn origin(&self, flat: usize) -> usize {
        flat / self.m
    }

    pub fn count(&self, r: RelationType) -> usize {
        self.edges.iter().filter(|e| e.2 == r).count()
    }

    pub fn relation_edges(&self, r: RelationType) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges
            .iter()
            .filter(move |e| e.2 == r)
            .map(|&(a, b, _)| (a, b))
    }

    pub fn sub_edges(&self) -> impl Iterator<Item = (SubNodeId, SubNodeId, RelationType)> + '_ {
        let m = self.m;
        self.edges
            .iter()
            .map(move |&(a, b, r)| (SubNodeId::from_flat(a, m), SubNodeId::from_flat(b, m), r))
    }

    /// Symmetric adjacency of one relation, scaled per row: mean aggregation
    /// divides by the relation-specific degree, sum aggregation does not.
    /// Rows of sub-nodes without an edge of this relation are zero.
    pub fn propagation(&self, r: RelationType, mean: bool) -> SparseMatrix {
        let size = self.num_subnodes();
        let mut degree = vec![0usize; size];
        for (a, b) in self.relation_edges(r) {
            degree[a] += 1;
            degree[b] += 1;
        }
        let mut triplets = Vec::with_capacity(2 * degree.iter().sum::<usize>() / 2);
        for (a, b) in self.relation_edges(r) {
            let (wa, wb) = if mean {
                (1.0 / degree[a] as f64, 1.0 / degree[b] as f64)
            } else {
                (1.0, 1.0)
            };
            triplets.push((a, b, wa));
            triplets.push((b, a, wb));
        }
        SparseMatrix::from_triplets(size, size, &triplets)
    }

    /// Mean-aggregation operators for every relation, in `RelationType::ALL`
    /// order.
    pub fn mean_operators(&self) -> Vec<Arc<SparseMatrix>> {
        RelationType::ALL
            .iter()
            .map(|&r| Arc::new(self.propagation(r, true)))
            .collect()
    }

    /// Writes `nsg_edges.csv` and `nsg_manifest.json` into `dir`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| NsgError::io(dir, e))?;
        let mut buf = Vec::new();
        for &(a, b, r) in &self.edges {
            writeln!(buf, "{a},{b},{}", r.label()).expect("write to vec");
        }
        let path = dir.join("nsg_edges.csv");
        fs::write(&path, buf).map_err(|e| NsgError::io(&path, e))?;

        let manifest = NsgManifest {
            n: self.n,
            m: self.m,
            variant: self.variant.to_string(),
            sparsified: self.sparsified,
            num_subnodes: self.num_subnodes(),
            counts: RelationType::ALL
                .iter()
                .map(|&r| (r.label().to_string(), self.count(r)))
                .collect(),
            total_edges: self.edges.len(),
        };
        let path = dir.join("nsg_manifest.json");
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| NsgError::json("nsg manifest", e))?;
        fs::write(&path, text).map_err(|e| NsgError::io(&path, e))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NsgManifest {
    pub n: usize,
    pub m: usize,
    pub variant: String,
    pub sparsified: bool,
    pub num_subnodes: usize,
    pub counts: BTreeMap<String, usize>,
    pub total_edges: usize,
}

/// Per-modality feature matrices.
pub fn slice_features(g: &MultimodalGraph) -> Vec<Tensor2> {
    g.features.clone()
}

/// Splits the columns of `x` at the cumulative `dims` boundaries.
pub fn slice_columns(x: &Tensor2, dims: &[usize]) -> Result<Vec<Tensor2>> {
    let total: usize = dims.iter().sum();
    if total != x.cols() {
        return Err(NsgError::DimensionMismatch {
            context: "sum of modality dims vs concatenated width".into(),
            expected: total,
            found: x.cols(),
        });
    }
    let mut start = 0;
    let mut out = Vec::with_capacity(dims.len());
    for &d in dims {
        out.push(x.slice_cols(start, start + d)?);
        start += d;
    }
    Ok(out)
}

/// `n*C(m,2) + k*e` with `k` the per-edge inter-node count of `variant`.
pub fn expected_edge_count(n: usize, m: usize, e: usize, variant: EdgeVariant) -> usize {
    n * m * m.saturating_sub(1) / 2 + variant.inter_edges_per_edge(m) * e
}

fn intra_clique(n: usize, m: usize, out: &mut Vec<(usize, usize, RelationType)>) {
    for u in 0..n {
        for i in 0..m {
            for j in (i + 1)..m {
                out.push((u * m + i, u * m + j, RelationType::IntraNode));
            }
        }
    }
}

fn inter_self(edges: &[(usize, usize)], m: usize, out: &mut Vec<(usize, usize, RelationType)>) {
    for &(u, v) in edges {
        for i in 0..m {
            out.push(canonical(u * m + i, v * m + i, RelationType::InterSelf));
        }
    }
}

fn canonical(a: usize, b: usize, r: RelationType) -> (usize, usize, RelationType) {
    (a.min(b), a.max(b), r)
}

fn finish(n: usize, m: usize, variant: EdgeVariant, sparsified: bool, mut edges: Vec<(usize, usize, RelationType)>) -> NsgGraph {
    edges.sort_unstable();
    edges.dedup();
    NsgGraph {
        n,
        m,
        variant,
        sparsified,
        edges,
    }
}

/// Builds the full NSG of `g`'s own edge set.
pub fn build_nsg(g: &MultimodalGraph, variant: EdgeVariant) -> NsgGraph {
    build_nsg_from_edges(g.num_nodes, g.num_modalities(), &g.edges, variant)
}

/// Builds the full NSG over an explicit edge list (e.g. training edges only).
pub fn build_nsg_from_edges(
    n: usize,
    m: usize,
    edges: &[(usize, usize)],
    variant: EdgeVariant,
) -> NsgGraph {
    let mut out = Vec::with_capacity(expected_edge_count(n, m, edges.len(), variant));
    intra_clique(n, m, &mut out);
    if variant.has_self() {
        inter_self(edges, m, &mut out);
    }
    if variant.has_cross() {
        for &(u, v) in edges {
            for i in 0..m {
                for j in 0..m {
                    if i != j {
                        out.push(canonical(u * m + i, v * m + j, RelationType::InterCross));
                    }
                }
            }
        }
    }
    finish(n, m, variant, false, out)
}

/// Sparsified NSG: intra-node cliques replaced by the per-node spanning
/// trees, cross-type edges restricted to tree neighbours; self-type edges
/// are kept in full.
pub fn build_sparse_nsg(
    n: usize,
    m: usize,
    edges: &[(usize, usize)],
    variant: EdgeVariant,
    trees: &[SpanningTree],
) -> Result<NsgGraph> {
    if trees.len() != n {
        return Err(NsgError::DimensionMismatch {
            context: "spanning tree count vs node count".into(),
            expected: n,
            found: trees.len(),
        });
    }
    let mut out = Vec::new();
    for (u, t) in trees.iter().enumerate() {
        if t.node != u {
            return Err(NsgError::MissingTree(u));
        }
        for &(i, j) in &t.edges {
            out.push(canonical(u * m + i, u * m + j, RelationType::IntraNode));
        }
    }
    if variant.has_self() {
        inter_self(edges, m, &mut out);
    }
    if variant.has_cross() {
        for (a, b) in build_sparse_inter_cross(edges, trees, m)? {
            out.push((a, b, RelationType::InterCross));
        }
    }
    Ok(finish(n, m, variant, true, out))
}

/// Row `u` is the concatenation of rows `<u,0>..<u,m-1>`. With flat index
/// `u*m + t` this is a pure reshape of the row-major buffer.
pub fn merge_view(nsg: &NsgGraph, sub_embeddings: &Tensor2) -> Result<Tensor2> {
    if sub_embeddings.rows() != nsg.num_subnodes() {
        return Err(NsgError::DimensionMismatch {
            context: "merge_view rows vs sub-node count".into(),
            expected: nsg.num_subnodes(),
            found: sub_embeddings.rows(),
        });
    }
    Tensor2::from_vec(
        nsg.n,
        nsg.m * sub_embeddings.cols(),
        sub_embeddings.data().to_vec(),
    )
}
