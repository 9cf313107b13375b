//! Maximum spanning trees over cosine similarity between a node's modality
//! features, exact (Kruskal) and approximate (anchor/batch local trees
//! followed by a global pruning pass), plus the sparse cross-type edges
//! derived from them.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{NsgError, Result};
use crate::numerics::{dot, Tensor2};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MstMode {
    Exact,
    Approximate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MstConfig {
    /// Anchor count.
    pub c0: usize,
    /// Batch size.
    pub c1: usize,
    pub seed: u64,
    pub mode: MstMode,
}

impl MstConfig {
    pub fn exact() -> Self {
        Self {
            c0: 1,
            c1: 1,
            seed: 0,
            mode: MstMode::Exact,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c0 == 0 || self.c1 == 0 {
            return Err(NsgError::InvalidConfig(format!(
                "c0 and c1 must be at least 1 (got c0={}, c1={})",
                self.c0, self.c1
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanningTree {
    pub node: usize,
    /// `(i, j)` modality pairs with `i < j`, sorted.
    pub edges: Vec<(usize, usize)>,
    pub total_weight: f64,
}

impl SpanningTree {
    /// Tree neighbours of modality `i`.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter_map(move |&(a, b)| {
            if a == i {
                Some(b)
            } else if b == i {
                Some(a)
            } else {
                None
            }
        })
    }

    /// `m - 1` edges, all endpoints in range, no cycle.
    pub fn is_spanning_tree(&self, m: usize) -> bool {
        if self.edges.len() + 1 != m.max(1) {
            return false;
        }
        let mut uf = UnionFind::new(m);
        self.edges
            .iter()
            .all(|&(a, b)| a < m && b < m && uf.union(a, b))
    }
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Returns false when `a` and `b` were already connected.
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        true
    }
}

/// Pairwise cosine similarity of the rows of `features`; zero-norm rows give 0.
pub fn cosine_similarity(features: &Tensor2) -> Tensor2 {
    let m = features.rows();
    let norms: Vec<f64> = (0..m).map(|i| dot(features.row(i), features.row(i)).sqrt()).collect();
    Tensor2::from_fn(m, m, |i, j| {
        if norms[i] == 0.0 || norms[j] == 0.0 {
            0.0
        } else {
            (dot(features.row(i), features.row(j)) / (norms[i] * norms[j])).clamp(-1.0, 1.0)
        }
    })
}

/// Kruskal over `candidates` (global vertex ids below `m`) in descending
/// weight, ties to the lexicographically smaller pair.
fn kruskal(m: usize, mut candidates: Vec<(usize, usize)>, s: &Tensor2) -> Vec<(usize, usize)> {
    candidates.sort_by(|&(a, b), &(c, d)| s[(c, d)].total_cmp(&s[(a, b)]).then((a, b).cmp(&(c, d))));
    let mut uf = UnionFind::new(m);
    let mut tree = Vec::new();
    for (a, b) in candidates {
        if uf.union(a, b) {
            tree.push((a, b));
        }
    }
    tree
}

fn tree_from_edges(mut edges: Vec<(usize, usize)>, s: &Tensor2) -> SpanningTree {
    edges.sort_unstable();
    let total_weight = edges.iter().map(|&(a, b)| s[(a, b)]).sum();
    SpanningTree {
        node: 0,
        edges,
        total_weight,
    }
}

fn all_pairs(vertices: &[usize]) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(vertices.len() * vertices.len().saturating_sub(1) / 2);
    for (k, &a) in vertices.iter().enumerate() {
        for &b in &vertices[k + 1..] {
            out.push((a.min(b), a.max(b)));
        }
    }
    out
}

/// Maximum spanning tree of the complete graph weighted by `s`.
pub fn exact_max_spanning_tree(s: &Tensor2) -> SpanningTree {
    let m = s.rows();
    let vertices: Vec<usize> = (0..m).collect();
    tree_from_edges(kruskal(m, all_pairs(&vertices), s), s)
}

/// Anchor/batch approximation: local trees over `A_t ∪ V_t` are accumulated
/// into `H`, anchors grow by each batch, and the result is the maximum
/// spanning tree of `H`. `stream` indexes the PRNG substream (node id).
pub fn approx_max_spanning_tree(features: &Tensor2, cfg: &MstConfig, stream: u64) -> Result<SpanningTree> {
    cfg.validate()?;
    let m = features.rows();
    let s = cosine_similarity(features);
    if m <= 1 {
        return Ok(tree_from_edges(Vec::new(), &s));
    }
    let mut rng = rng::stream(cfg.seed, "mst", stream);

    let initial = sample(&mut rng, m, cfg.c0.min(m)).into_vec();
    let mut anchors = initial.clone();
    let anchor_set: BTreeSet<usize> = initial.into_iter().collect();
    let mut unprocessed: Vec<usize> = (0..m).filter(|v| !anchor_set.contains(v)).collect();

    let mut h: BTreeSet<(usize, usize)> = BTreeSet::new();
    if unprocessed.is_empty() {
        // Every vertex is an anchor: one local tree over all of them.
        h.extend(kruskal(m, all_pairs(&anchors), &s));
    }
    while !unprocessed.is_empty() {
        let a_t: Vec<usize> = sample(&mut rng, anchors.len(), cfg.c0.min(anchors.len()))
            .into_iter()
            .map(|k| anchors[k])
            .collect();
        let mut picks = sample(&mut rng, unprocessed.len(), cfg.c1.min(unprocessed.len())).into_vec();
        picks.sort_unstable_by(|a, b| b.cmp(a));
        let v_t: Vec<usize> = picks.into_iter().map(|k| unprocessed.swap_remove(k)).collect();

        let local: Vec<usize> = a_t.iter().chain(&v_t).copied().collect();
        h.extend(kruskal(m, all_pairs(&local), &s));
        anchors.extend(v_t);
    }
    Ok(tree_from_edges(kruskal(m, h.into_iter().collect(), &s), &s))
}

/// One tree per node over the node's `m` consecutive sub-node rows of
/// `sub_features` (`(n*m) x d`, flat order `u*m + t`).
pub fn build_trees(sub_features: &Tensor2, m: usize, cfg: &MstConfig) -> Result<Vec<SpanningTree>> {
    cfg.validate()?;
    if m == 0 || sub_features.rows() % m != 0 {
        return Err(NsgError::DimensionMismatch {
            context: "sub-node rows must be a multiple of m".into(),
            expected: m,
            found: sub_features.rows(),
        });
    }
    let n = sub_features.rows() / m;
    (0..n)
        .map(|u| {
            let rows: Vec<usize> = (u * m..(u + 1) * m).collect();
            let block = sub_features.gather_rows(&rows)?;
            let mut tree = match cfg.mode {
                MstMode::Exact => exact_max_spanning_tree(&cosine_similarity(&block)),
                MstMode::Approximate => approx_max_spanning_tree(&block, cfg, u as u64)?,
            };
            tree.node = u;
            Ok(tree)
        })
        .collect()
}

/// Stacks raw per-modality features into `(n*m) x d`; requires equal dims.
pub fn stack_raw_features(features: &[Tensor2]) -> Result<Tensor2> {
    let m = features.len();
    let first = features
        .first()
        .ok_or_else(|| NsgError::InvalidConfig("no modalities".into()))?;
    let (n, d) = first.shape();
    for f in features {
        if f.cols() != d {
            return Err(NsgError::InvalidConfig(format!(
                "similarity on raw features needs equal modality dims (found {} and {})",
                d,
                f.cols()
            )));
        }
    }
    Ok(Tensor2::from_fn(n * m, d, |r, c| features[r % m][(r / m, c)]))
}

/// Sparse cross-type edges: for original edge `(u,v)`, `<u,i>` links to
/// `<v,j>` for each tree neighbour `j` of `i` in `v`'s tree, and
/// symmetrically. Returns canonical flat pairs, sorted and deduplicated.
pub fn build_sparse_inter_cross(
    original_edges: &[(usize, usize)],
    trees: &[SpanningTree],
    m: usize,
) -> Result<Vec<(usize, usize)>> {
    let mut out = BTreeSet::new();
    for &(u, v) in original_edges {
        let tu = trees.get(u).ok_or(NsgError::MissingTree(u))?;
        let tv = trees.get(v).ok_or(NsgError::MissingTree(v))?;
        for i in 0..m {
            for j in tv.neighbors(i) {
                let (a, b) = (u * m + i, v * m + j);
                out.insert((a.min(b), a.max(b)));
            }
            for j in tu.neighbors(i) {
                let (a, b) = (v * m + i, u * m + j);
                out.insert((a.min(b), a.max(b)));
            }
        }
    }
    Ok(out.into_iter().collect())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TreesFile {
    pub config: MstConfig,
    /// `raw` or `projected`.
    pub similarity_source: String,
    pub trees: Vec<SpanningTree>,
}

pub fn write_trees(path: &Path, cfg: &MstConfig, source: &str, trees: &[SpanningTree]) -> Result<()> {
    let file = TreesFile {
        config: *cfg,
        similarity_source: source.to_string(),
        trees: trees.to_vec(),
    };
    let text = serde_json::to_string_pretty(&file).map_err(|e| NsgError::json("trees", e))?;
    fs::write(path, text).map_err(|e| NsgError::io(path, e))
}
