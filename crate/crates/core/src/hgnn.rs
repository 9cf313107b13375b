//! Relation-typed message passing over an NSG.
//!
//! Sub-node features are produced by per-modality projections into a shared
//! width `d`. A layer aggregates neighbours separately per relation (each
//! relation with its own degree normalisation and weight), adds a self
//! transform, then applies the nonlinearity, the optional residual and the
//! optional graph normalisation, in that order. Embeddings of a node's
//! sub-nodes are merged by concatenation followed by a linear map.
//!
//! Every `*_vars` function records onto a [`Tape`]; the plain-tensor
//! wrappers run a throwaway tape with constant leaves.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{NsgError, Result};
use crate::graphdata::MultimodalGraph;
use crate::nsg::{NsgGraph, RelationType};
use crate::numerics::{SparseMatrix, Tape, Tensor2, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Mean,
    Sum,
}

/// Architecture of one expert encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HgnnConfig {
    pub hidden: usize,
    pub layers: usize,
    pub residual: bool,
    pub graph_norm: bool,
    pub activation: Activation,
    pub aggregation: Aggregation,
}

impl Default for HgnnConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 2,
            residual: true,
            graph_norm: true,
            activation: Activation::Relu,
            aggregation: Aggregation::Mean,
        }
    }
}

/// Row-scaled relation operators of `nsg` in `RelationType::ALL` order.
pub fn relation_operators(nsg: &NsgGraph, agg: Aggregation) -> Vec<Arc<SparseMatrix>> {
    RelationType::ALL
        .iter()
        .map(|&r| Arc::new(nsg.propagation(r, agg == Aggregation::Mean)))
        .collect()
}

// ---------------------------------------------------------------------------
// Projection

#[derive(Debug, Clone, PartialEq)]
pub struct ModalityProjection {
    /// `d_t x d` per modality.
    pub weights: Vec<Tensor2>,
}

impl ModalityProjection {
    pub fn init(dims: &[usize], d: usize, rng: &mut crate::rng::Rng) -> Self {
        Self {
            weights: dims.iter().map(|&dt| Tensor2::glorot(dt, d, rng)).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.weights.first().map_or(0, Tensor2::cols)
    }
}

/// `(n*m) x d` sub-node features; row `u*m + t` is `X_t[u] W_t`.
pub fn modality_project_vars(tape: &mut Tape, features: &[Var], weights: &[Var]) -> Result<Var> {
    if features.len() != weights.len() || features.is_empty() {
        return Err(NsgError::DimensionMismatch {
            context: "projection weights vs modalities".into(),
            expected: features.len(),
            found: weights.len(),
        });
    }
    let mut parts = Vec::with_capacity(features.len());
    for (&x, &w) in features.iter().zip(weights) {
        let (_, xc) = tape.shape(x);
        let (wr, _) = tape.shape(w);
        if xc != wr {
            return Err(NsgError::DimensionMismatch {
                context: "modality feature dim vs projection rows".into(),
                expected: wr,
                found: xc,
            });
        }
        parts.push(tape.matmul(x, w)?);
    }
    let wide = tape.concat_cols(&parts)?;
    let (n, md) = tape.shape(wide);
    let m = features.len();
    tape.reshape(wide, n * m, md / m)
}

pub fn modality_project(g: &MultimodalGraph, proj: &ModalityProjection) -> Result<Tensor2> {
    let mut tape = Tape::new();
    let xs: Vec<Var> = g.features.iter().map(|f| tape.constant(f.clone())).collect();
    let ws: Vec<Var> = proj.weights.iter().map(|w| tape.constant(w.clone())).collect();
    let out = modality_project_vars(&mut tape, &xs, &ws)?;
    Ok(tape.value(out).clone())
}

// ---------------------------------------------------------------------------
// Message passing

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNormParams {
    pub scale: Tensor2,
    pub shift: Tensor2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HgnnLayerParams {
    /// One `d x d` weight per relation, indexed by `RelationType::index`.
    pub relation: Vec<Tensor2>,
    pub self_weight: Tensor2,
    pub norm: Option<GraphNormParams>,
    pub residual: bool,
}

impl HgnnLayerParams {
    pub fn init(d: usize, residual: bool, graph_norm: bool, rng: &mut crate::rng::Rng) -> Self {
        Self {
            relation: RelationType::ALL.iter().map(|_| Tensor2::glorot(d, d, rng)).collect(),
            self_weight: Tensor2::glorot(d, d, rng),
            norm: graph_norm.then(|| GraphNormParams {
                scale: Tensor2::filled(1, d, 1.0),
                shift: Tensor2::zeros(1, d),
            }),
            residual,
        }
    }

    /// Same weight `w` on every relation, self weight `s`, no norm.
    pub fn shared(w: Tensor2, s: Tensor2, residual: bool) -> Self {
        Self {
            relation: vec![w.clone(), w.clone(), w],
            self_weight: s,
            norm: None,
            residual,
        }
    }

    pub fn params(&self) -> Vec<&Tensor2> {
        let mut out: Vec<&Tensor2> = self.relation.iter().collect();
        out.push(&self.self_weight);
        if let Some(n) = &self.norm {
            out.push(&n.scale);
            out.push(&n.shift);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor2> {
        let mut out: Vec<&mut Tensor2> = self.relation.iter_mut().collect();
        out.push(&mut self.self_weight);
        if let Some(n) = &mut self.norm {
            out.push(&mut n.scale);
            out.push(&mut n.shift);
        }
        out
    }
}

/// Tape handles of one layer, mirroring [`HgnnLayerParams`].
#[derive(Debug, Clone)]
pub struct LayerVars {
    pub relation: Vec<Var>,
    pub self_weight: Var,
    pub norm: Option<(Var, Var)>,
    pub residual: bool,
}

impl LayerVars {
    /// Registers the layer's tensors as leaves, trainable or constant.
    pub fn bind(tape: &mut Tape, p: &HgnnLayerParams, trainable: bool) -> Self {
        let mut leaf = |t: &Tensor2| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let relation = p.relation.iter().map(&mut leaf).collect();
        let self_weight = leaf(&p.self_weight);
        let norm = p.norm.as_ref().map(|n| (leaf(&n.scale), leaf(&n.shift)));
        Self {
            relation,
            self_weight,
            norm,
            residual: p.residual,
        }
    }
}

/// One relation-typed layer. `ops` holds the per-relation operators.
pub fn relation_message_pass_vars(
    tape: &mut Tape,
    h: Var,
    ops: &[Arc<SparseMatrix>],
    layer: &LayerVars,
    act: Activation,
) -> Result<Var> {
    if ops.len() != layer.relation.len() {
        return Err(NsgError::DimensionMismatch {
            context: "relation operators vs relation weights".into(),
            expected: layer.relation.len(),
            found: ops.len(),
        });
    }
    let mut out = tape.matmul(h, layer.self_weight)?;
    for (op, &w) in ops.iter().zip(&layer.relation) {
        if op.nnz() == 0 {
            continue;
        }
        let agg = tape.propagate(h, Arc::clone(op))?;
        let msg = tape.matmul(agg, w)?;
        out = tape.add(out, msg)?;
    }
    out = match act {
        Activation::Relu => tape.relu(out),
        Activation::Identity => out,
    };
    if layer.residual {
        out = tape.add(out, h)?;
    }
    if let Some((scale, shift)) = layer.norm {
        let centered = tape.center_cols(out);
        let scaled = tape.mul_row(centered, scale)?;
        out = tape.add_row(scaled, shift)?;
    }
    Ok(out)
}

pub fn relation_message_pass(
    h: &Tensor2,
    nsg: &NsgGraph,
    params: &HgnnLayerParams,
    act: Activation,
    agg: Aggregation,
) -> Result<Tensor2> {
    if h.rows() != nsg.num_subnodes() {
        return Err(NsgError::DimensionMismatch {
            context: "feature rows vs sub-node count".into(),
            expected: nsg.num_subnodes(),
            found: h.rows(),
        });
    }
    let ops = relation_operators(nsg, agg);
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let layer = LayerVars::bind(&mut tape, params, false);
    let out = relation_message_pass_vars(&mut tape, hv, &ops, &layer, act)?;
    Ok(tape.value(out).clone())
}

/// A stack of layers: one expert.
#[derive(Debug, Clone, PartialEq)]
pub struct HgnnEncoder {
    pub layers: Vec<HgnnLayerParams>,
}

impl HgnnEncoder {
    pub fn init(cfg: &HgnnConfig, rng: &mut crate::rng::Rng) -> Self {
        Self {
            layers: (0..cfg.layers)
                .map(|_| HgnnLayerParams::init(cfg.hidden, cfg.residual, cfg.graph_norm, rng))
                .collect(),
        }
    }

    pub fn params(&self) -> Vec<&Tensor2> {
        self.layers.iter().flat_map(HgnnLayerParams::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor2> {
        self.layers.iter_mut().flat_map(HgnnLayerParams::params_mut).collect()
    }
}

pub fn encoder_forward_vars(
    tape: &mut Tape,
    h: Var,
    ops: &[Arc<SparseMatrix>],
    layers: &[LayerVars],
    act: Activation,
) -> Result<Var> {
    let mut x = h;
    for layer in layers {
        x = relation_message_pass_vars(tape, x, ops, layer, act)?;
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// Coalesced closed form (two modalities)

/// Flat sub-node order `u*2 + t` to block order `t*n + u`: entry `i` of the
/// result is the flat index placed at block position `i`.
pub fn block_order(n: usize) -> Vec<usize> {
    (0..2 * n).map(|i| (i % n) * 2 + i / n).collect()
}

/// Dense sum-aggregation propagation `P = Σ_r A_r` of a two-modality NSG in
/// block order, i.e. `[[P0, Ṗ], [Ṗᵀ, P1]]`.
pub fn block_propagation(nsg: &NsgGraph) -> Result<Tensor2> {
    if nsg.m != 2 {
        return Err(NsgError::InvalidConfig(format!(
            "the block propagation matrix is defined for two modalities, got m={}",
            nsg.m
        )));
    }
    let n = nsg.n;
    let mut pos = vec![0usize; 2 * n];
    for (i, f) in block_order(n).into_iter().enumerate() {
        pos[f] = i;
    }
    let mut p = Tensor2::zeros(2 * n, 2 * n);
    for &(a, b, _) in &nsg.edges {
        p[(pos[a], pos[b])] += 1.0;
        p[(pos[b], pos[a])] += 1.0;
    }
    Ok(p)
}

/// `Z = Σ_{l=0..L} Pˡ X W⁽ˡ⁾`.
pub fn coalesced_linear_forward(x: &Tensor2, p: &Tensor2, weights: &[Tensor2]) -> Result<Tensor2> {
    if p.rows() != p.cols() || p.cols() != x.rows() {
        return Err(NsgError::ShapeMismatch {
            op: "coalesced_linear_forward",
            lhs: p.shape(),
            rhs: x.shape(),
        });
    }
    if x.rows() % 2 != 0 {
        return Err(NsgError::InvalidConfig(
            "coalesced form needs two equal modality blocks".into(),
        ));
    }
    let Some(first) = weights.first() else {
        return Err(NsgError::InvalidConfig("no weights given".into()));
    };
    let mut z = x.matmul(first)?;
    let mut px = x.clone();
    for w in &weights[1..] {
        px = p.matmul(&px)?;
        let term = px.matmul(w)?;
        z.axpy(1.0, &term);
    }
    Ok(z)
}

/// Regroups a linear stack `H ← H·S_l + P·H·W_l` into the coefficients of
/// `Pˡ X` after `L` layers.
pub fn unrolled_weights(self_weights: &[Tensor2], shared: &[Tensor2]) -> Result<Vec<Tensor2>> {
    if self_weights.len() != shared.len() {
        return Err(NsgError::DimensionMismatch {
            context: "self vs shared layer weights".into(),
            expected: self_weights.len(),
            found: shared.len(),
        });
    }
    let d = self_weights.first().map_or(0, Tensor2::rows);
    let mut coeff = vec![Tensor2::identity(d)];
    for (s, w) in self_weights.iter().zip(shared) {
        let mut next = Vec::with_capacity(coeff.len() + 1);
        for p in 0..=coeff.len() {
            let mut c = Tensor2::zeros(d, s.cols());
            if p < coeff.len() {
                c.axpy(1.0, &coeff[p].matmul(s)?);
            }
            if p > 0 {
                c.axpy(1.0, &coeff[p - 1].matmul(w)?);
            }
            next.push(c);
        }
        coeff = next;
    }
    Ok(coeff)
}

// ---------------------------------------------------------------------------
// Merge head

#[derive(Debug, Clone, PartialEq)]
pub struct MergeParams {
    /// `(m*d) x d_out`.
    pub weight: Tensor2,
    /// `1 x d_out`.
    pub bias: Tensor2,
    /// Optional hidden layer `(m*d) x (m*d)` + bias, applied with ReLU
    /// before the output map.
    pub hidden: Option<(Tensor2, Tensor2)>,
}

impl MergeParams {
    pub fn init(m: usize, d: usize, d_out: usize, two_layer: bool, rng: &mut crate::rng::Rng) -> Self {
        let width = m * d;
        Self {
            weight: Tensor2::glorot(width, d_out, rng),
            bias: Tensor2::zeros(1, d_out),
            hidden: two_layer.then(|| (Tensor2::glorot(width, width, rng), Tensor2::zeros(1, width))),
        }
    }

    pub fn params(&self) -> Vec<&Tensor2> {
        let mut out = Vec::new();
        if let Some((w, b)) = &self.hidden {
            out.push(w);
            out.push(b);
        }
        out.push(&self.weight);
        out.push(&self.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor2> {
        let mut out = Vec::new();
        if let Some((w, b)) = &mut self.hidden {
            out.push(w);
            out.push(b);
        }
        out.push(&mut self.weight);
        out.push(&mut self.bias);
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MergeVars {
    pub weight: Var,
    pub bias: Var,
    pub hidden: Option<(Var, Var)>,
}

impl MergeVars {
    pub fn bind(tape: &mut Tape, p: &MergeParams, trainable: bool) -> Self {
        let mut leaf = |t: &Tensor2| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let hidden = p.hidden.as_ref().map(|(w, b)| (leaf(w), leaf(b)));
        Self {
            weight: leaf(&p.weight),
            bias: leaf(&p.bias),
            hidden,
        }
    }
}

/// Concatenates each node's sub-node rows and applies the merge map.
pub fn merge_subnodes_vars(tape: &mut Tape, sub: Var, n: usize, m: usize, merge: &MergeVars) -> Result<Var> {
    let (rows, d) = tape.shape(sub);
    if rows != n * m {
        return Err(NsgError::DimensionMismatch {
            context: "sub-node rows vs n*m".into(),
            expected: n * m,
            found: rows,
        });
    }
    let mut z = tape.reshape(sub, n, m * d)?;
    if let Some((w, b)) = merge.hidden {
        let h = tape.matmul(z, w)?;
        let h = tape.add_row(h, b)?;
        z = tape.relu(h);
    }
    let out = tape.matmul(z, merge.weight)?;
    tape.add_row(out, merge.bias)
}

pub fn merge_subnodes(sub_emb: &Tensor2, nsg: &NsgGraph, merge: &MergeParams) -> Result<Tensor2> {
    let mut tape = Tape::new();
    let s = tape.constant(sub_emb.clone());
    let mv = MergeVars::bind(&mut tape, merge, false);
    let out = merge_subnodes_vars(&mut tape, s, nsg.n, nsg.m, &mv)?;
    Ok(tape.value(out).clone())
}

// ---------------------------------------------------------------------------
// Checkpoints

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NSGCKPT1";

/// Header of a parameter checkpoint; the JSON descriptor repeats it
/// together with free-form metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch_hash: u64,
    pub dims: Vec<usize>,
    pub m: usize,
    pub relations: Vec<String>,
    /// Shape of every parameter tensor, in declaration order.
    pub shapes: Vec<(usize, usize)>,
}

/// Binary layout: magic, `u32` header length, header JSON, then every
/// parameter as little-endian `f64` in declaration order.
pub fn write_checkpoint(path: &Path, header: &CheckpointHeader, params: &[&Tensor2]) -> Result<()> {
    let head = serde_json::to_vec(header).map_err(|e| NsgError::json("checkpoint header", e))?;
    let total: usize = params.iter().map(|p| p.len()).sum();
    let mut buf = Vec::with_capacity(12 + head.len() + 8 * total);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(head.len() as u32).to_le_bytes());
    buf.extend_from_slice(&head);
    for p in params {
        for &x in p.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| NsgError::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<Tensor2>)> {
    let bytes = fs::read(path).map_err(|e| NsgError::io(path, e))?;
    let name = path.display().to_string();
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(NsgError::format(name, "not a checkpoint file"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes
        .get(12..12 + hlen)
        .ok_or_else(|| NsgError::format(name.clone(), "truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| NsgError::json("checkpoint header", e))?;
    let mut data = bytes[12 + hlen..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let want: usize = header.shapes.iter().map(|(r, c)| r * c).sum();
    if (bytes.len() - 12 - hlen) != 8 * want {
        return Err(NsgError::format(name, "parameter payload does not match header shapes"));
    }
    let params = header
        .shapes
        .iter()
        .map(|&(r, c)| Tensor2::from_vec(r, c, data.by_ref().take(r * c).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok((header, params))
}

/// Random instance helper for tests and property checks.
pub fn random_features(rows: usize, cols: usize, rng: &mut crate::rng::Rng) -> Tensor2 {
    Tensor2::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}
