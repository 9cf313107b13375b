//! The full NSG-MoE model: per-modality projections, a bank of self-type
//! and cross-type experts under a noisy top-k gate, and the merge head.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{NsgError, Result};
use crate::hgnn::{
    modality_project_vars, merge_subnodes_vars, CheckpointHeader, HgnnConfig, LayerVars,
    MergeParams, MergeVars, ModalityProjection,
};
use crate::moe::{
    draw_noise, gate_with_noise, moe_forward_vars, BranchOperators, ExpertBank, GateOutput, GateParams, GateVars,
    MoeTapeOutput,
};
use crate::nsg::{build_nsg_from_edges, build_sparse_nsg, EdgeVariant, NsgGraph, RelationType};
use crate::numerics::{Tape, Tensor2, Var};
use crate::rng;
use crate::sparsifier::{build_trees, MstConfig, SpanningTree};

/// Architecture knobs of [`NsgMoeModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub hgnn: HgnnConfig,
    /// Self-type experts (`n_1`).
    pub n_self: usize,
    /// Cross-type experts (`n_2`).
    pub n_cross: usize,
    /// Active experts per sub-node.
    pub k: usize,
    /// Noisy gating during training; evaluation is always noise-free.
    pub noise: bool,
    /// Hidden ReLU layer in the merge head.
    pub two_layer_merge: bool,
    /// Let the balancing losses reach the gate input (and through it the
    /// projections); by default they train only the routing weights.
    pub aux_grad_to_input: bool,
    /// Intra-node cliques are replaced by spanning trees when `m` exceeds this.
    pub sparsify_above: usize,
    pub mst: MstConfig,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            hgnn: HgnnConfig::default(),
            n_self: 2,
            n_cross: 2,
            k: 2,
            noise: true,
            two_layer_merge: false,
            aux_grad_to_input: false,
            sparsify_above: 3,
            mst: MstConfig::exact(),
        }
    }
}

impl ArchConfig {
    pub fn num_experts(&self) -> usize {
        self.n_self + self.n_cross
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_experts() == 0 {
            return Err(NsgError::InvalidConfig("at least one expert is required".into()));
        }
        if self.k == 0 || self.k > self.num_experts() {
            return Err(NsgError::InvalidConfig(format!(
                "top-k must lie in [1, {}] (got {})",
                self.num_experts(),
                self.k
            )));
        }
        if self.hgnn.hidden == 0 || self.hgnn.layers == 0 {
            return Err(NsgError::InvalidConfig("hidden width and layer count must be positive".into()));
        }
        self.mst.validate()
    }
}

/// The two expert graphs of one dataset (or of its training edges).
#[derive(Debug, Clone)]
pub struct ModelGraph {
    pub n: usize,
    pub m: usize,
    pub self_nsg: NsgGraph,
    pub cross_nsg: NsgGraph,
    pub ops: BranchOperators,
}

impl ModelGraph {
    /// Full NSGs, or sparsified ones when `trees` is given.
    pub fn new(
        n: usize,
        m: usize,
        edges: &[(usize, usize)],
        arch: &ArchConfig,
        trees: Option<&[SpanningTree]>,
    ) -> Result<Self> {
        let build = |variant| match trees {
            Some(t) => build_sparse_nsg(n, m, edges, variant, t),
            None => Ok(build_nsg_from_edges(n, m, edges, variant)),
        };
        let self_nsg = build(EdgeVariant::SelfType)?;
        let cross_nsg = build(EdgeVariant::CrossType)?;
        let ops = BranchOperators::new(&self_nsg, &cross_nsg, arch.hgnn.aggregation)?;
        Ok(Self {
            n,
            m,
            self_nsg,
            cross_nsg,
            ops,
        })
    }

    pub fn relation_counts(&self) -> Vec<(String, usize, usize)> {
        RelationType::ALL
            .iter()
            .map(|&r| (r.label().to_string(), self.self_nsg.count(r), self.cross_nsg.count(r)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NsgMoeModel {
    pub arch: ArchConfig,
    pub dims: Vec<usize>,
    pub out_dim: usize,
    pub projection: ModalityProjection,
    pub bank: ExpertBank,
    pub gate: GateParams,
    pub merge: MergeParams,
}

/// Tape handles of every parameter, plus the flat list in declaration order.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub projection: Vec<Var>,
    pub experts: Vec<Vec<LayerVars>>,
    pub gate: GateVars,
    pub merge: MergeVars,
    pub params: Vec<Var>,
}

/// Handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// Projected sub-node features (also the gate input).
    pub x: Var,
    /// `n x out_dim` node outputs.
    pub z: Var,
    pub moe: MoeTapeOutput,
}

impl NsgMoeModel {
    /// Deterministic initialisation from `seed`; the gate starts at zero.
    pub fn init(dims: &[usize], out_dim: usize, arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        if dims.is_empty() || out_dim == 0 {
            return Err(NsgError::InvalidConfig("model needs at least one modality and output".into()));
        }
        let d = arch.hgnn.hidden;
        let projection = ModalityProjection::init(dims, d, &mut rng::stream(seed, "init/projection", 0));
        let bank = ExpertBank::init(arch.n_self, arch.n_cross, &arch.hgnn, &mut rng::stream(seed, "init/experts", 0))?;
        let mut gate = GateParams::zeros(d, arch.num_experts(), arch.k)?;
        gate.noise_enabled = arch.noise;
        let merge = MergeParams::init(
            dims.len(),
            d,
            out_dim,
            arch.two_layer_merge,
            &mut rng::stream(seed, "init/merge", 0),
        );
        Ok(Self {
            arch: *arch,
            dims: dims.to_vec(),
            out_dim,
            projection,
            bank,
            gate,
            merge,
        })
    }

    pub fn m(&self) -> usize {
        self.dims.len()
    }

    /// Every trainable tensor in declaration order: projections, experts,
    /// gate, merge head.
    pub fn params(&self) -> Vec<&Tensor2> {
        let mut out: Vec<&Tensor2> = self.projection.weights.iter().collect();
        out.extend(self.bank.params());
        out.extend(self.gate.params());
        out.extend(self.merge.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor2> {
        let mut out: Vec<&mut Tensor2> = self.projection.weights.iter_mut().collect();
        out.extend(self.bank.params_mut());
        out.extend(self.gate.params_mut());
        out.extend(self.merge.params_mut());
        out
    }

    pub fn param_values(&self) -> Vec<Tensor2> {
        self.params().into_iter().cloned().collect()
    }

    pub fn set_params(&mut self, values: Vec<Tensor2>) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != values.len() {
            return Err(NsgError::CheckpointMismatch(format!(
                "expected {} parameter tensors, found {}",
                slots.len(),
                values.len()
            )));
        }
        for (slot, v) in slots.iter_mut().zip(values) {
            if slot.shape() != v.shape() {
                return Err(NsgError::CheckpointMismatch(format!(
                    "parameter shape {:?} does not match {:?}",
                    v.shape(),
                    slot.shape()
                )));
            }
            **slot = v;
        }
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Digest of everything that fixes the parameter layout.
    pub fn arch_hash(&self) -> u64 {
        let key = serde_json::to_string(&(&self.arch, &self.dims, self.out_dim)).expect("arch serialises");
        rng::fnv1a(key.as_bytes())
    }

    pub fn checkpoint_header(&self) -> CheckpointHeader {
        CheckpointHeader {
            arch_hash: self.arch_hash(),
            dims: self.dims.clone(),
            m: self.m(),
            relations: RelationType::ALL.iter().map(|r| r.label().to_string()).collect(),
            shapes: self.params().iter().map(|p| p.shape()).collect(),
        }
    }

    /// Spanning trees for sparsification, computed on the projected
    /// features of the current (initial) projection; `None` when `m` is at
    /// or below the threshold.
    pub fn sparsification_trees(&self, features: &[Tensor2]) -> Result<Option<Vec<SpanningTree>>> {
        if self.m() <= self.arch.sparsify_above {
            return Ok(None);
        }
        let x = project_features(features, &self.projection)?;
        build_trees(&x, self.m(), &self.arch.mst).map(Some)
    }

    /// Registers every parameter on `tape`, in [`Self::params`] order.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let leaf = |tape: &mut Tape, t: &Tensor2| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let projection: Vec<Var> = self.projection.weights.iter().map(|w| leaf(tape, w)).collect();
        let experts: Vec<Vec<LayerVars>> = self
            .bank
            .experts
            .iter()
            .map(|enc| enc.layers.iter().map(|l| LayerVars::bind(tape, l, trainable)).collect())
            .collect();
        let gate = GateVars::bind(tape, &self.gate, trainable);
        let merge = MergeVars::bind(tape, &self.merge, trainable);

        let mut params = projection.clone();
        for layers in &experts {
            for l in layers {
                params.extend(&l.relation);
                params.push(l.self_weight);
                if let Some((s, b)) = l.norm {
                    params.push(s);
                    params.push(b);
                }
            }
        }
        params.push(gate.w_g);
        params.push(gate.w_n);
        if let Some((w, b)) = merge.hidden {
            params.push(w);
            params.push(b);
        }
        params.push(merge.weight);
        params.push(merge.bias);
        BoundModel {
            projection,
            experts,
            gate,
            merge,
            params,
        }
    }

    /// Forward pass with an explicit gate-noise draw `eps` (`(n*m) x n_e`).
    pub fn forward_vars(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        features: &[Tensor2],
        graph: &ModelGraph,
        eps: Arc<Tensor2>,
    ) -> Result<ForwardVars> {
        self.check_inputs(features, graph)?;
        let xs: Vec<Var> = features.iter().map(|f| tape.constant(f.clone())).collect();
        let x = modality_project_vars(tape, &xs, &bound.projection)?;
        let moe = moe_forward_vars(
            tape,
            x,
            &graph.ops,
            &bound.experts,
            self.bank.n_self,
            &bound.gate,
            self.gate.k,
            eps,
            self.arch.hgnn.activation,
        )?;
        let z = merge_subnodes_vars(tape, moe.output, graph.n, graph.m, &bound.merge)?;
        Ok(ForwardVars { x, z, moe })
    }

    /// Noise draw for one training step (zeros when noise is disabled).
    pub fn draw_noise(&self, rows: usize, rng: &mut rng::Rng) -> Tensor2 {
        draw_noise(rows, self.gate.num_experts(), self.gate.noise_enabled, rng)
    }

    /// Noise-free inference: node outputs and the realised routing.
    pub fn infer(&self, features: &[Tensor2], graph: &ModelGraph) -> Result<(Tensor2, GateOutput)> {
        let rows = graph.n * graph.m;
        let eps = Tensor2::zeros(rows, self.gate.num_experts());
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let fw = self.forward_vars(&mut tape, &bound, features, graph, Arc::new(eps.clone()))?;
        let go = gate_with_noise(tape.value(fw.x), &self.gate, eps)?;
        Ok((tape.value(fw.z).clone(), go))
    }

    fn check_inputs(&self, features: &[Tensor2], graph: &ModelGraph) -> Result<()> {
        if features.len() != self.m() || graph.m != self.m() {
            return Err(NsgError::DimensionMismatch {
                context: "model modalities vs input".into(),
                expected: self.m(),
                found: features.len(),
            });
        }
        for (f, &d) in features.iter().zip(&self.dims) {
            if f.cols() != d || f.rows() != graph.n {
                return Err(NsgError::DimensionMismatch {
                    context: "modality feature shape".into(),
                    expected: d,
                    found: f.cols(),
                });
            }
        }
        Ok(())
    }
}

/// Projected `(n*m) x d` sub-node features.
pub fn project_features(features: &[Tensor2], proj: &ModalityProjection) -> Result<Tensor2> {
    let mut tape = Tape::new();
    let xs: Vec<Var> = features.iter().map(|f| tape.constant(f.clone())).collect();
    let ws: Vec<Var> = proj.weights.iter().map(|w| tape.constant(w.clone())).collect();
    let out = modality_project_vars(&mut tape, &xs, &ws)?;
    Ok(tape.value(out).clone())
}
