//! Mixture of HGNN experts under noisy top-k gating.
//!
//! The first `n_self` experts run on the self-type NSG, the remaining
//! `n_cross` on the cross-type NSG. Each sub-node is routed by
//! `S(x) = x·W_g + ε ⊙ softplus(x·W_n)` to the `k` highest-scoring experts
//! with softmax weights over those `k` scores. Routing balance is encouraged
//! by the squared coefficient of variation of the per-expert gate mass
//! (importance) and of the per-expert probability of selection (load).

use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{NsgError, Result};
use crate::hgnn::{encoder_forward_vars, relation_operators, Activation, Aggregation, HgnnConfig, HgnnEncoder, LayerVars};
use crate::nsg::{EdgeVariant, NsgGraph};
use crate::numerics::{cv_squared, kth_largest_excluding, normal_cdf, softplus, top_k_indices, SparseMatrix, Tape, Tensor2, Var, MIN_NOISE_SCALE};

#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    /// `d x n_e`.
    pub w_g: Tensor2,
    /// `d x n_e`.
    pub w_n: Tensor2,
    pub k: usize,
    pub noise_enabled: bool,
}

impl GateParams {
    /// Zero-initialised gate.
    pub fn zeros(d: usize, n_experts: usize, k: usize) -> Result<Self> {
        let gp = Self {
            w_g: Tensor2::zeros(d, n_experts),
            w_n: Tensor2::zeros(d, n_experts),
            k,
            noise_enabled: true,
        };
        gp.validate()?;
        Ok(gp)
    }

    pub fn num_experts(&self) -> usize {
        self.w_g.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let ne = self.num_experts();
        if ne == 0 {
            return Err(NsgError::InvalidConfig("at least one expert is required".into()));
        }
        if self.k == 0 || self.k > ne {
            return Err(NsgError::InvalidConfig(format!(
                "top-k must lie in [1, {ne}], got {}",
                self.k
            )));
        }
        if self.w_n.shape() != self.w_g.shape() {
            return Err(NsgError::ShapeMismatch {
                op: "gate weights",
                lhs: self.w_g.shape(),
                rhs: self.w_n.shape(),
            });
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&Tensor2> {
        vec![&self.w_g, &self.w_n]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor2> {
        vec![&mut self.w_g, &mut self.w_n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    SelfType,
    CrossType,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBank {
    pub experts: Vec<HgnnEncoder>,
    pub n_self: usize,
    pub n_cross: usize,
    pub config: HgnnConfig,
}

impl ExpertBank {
    pub fn init(n_self: usize, n_cross: usize, cfg: &HgnnConfig, rng: &mut crate::rng::Rng) -> Result<Self> {
        if n_self + n_cross == 0 {
            return Err(NsgError::InvalidConfig("at least one expert is required".into()));
        }
        Ok(Self {
            experts: (0..n_self + n_cross).map(|_| HgnnEncoder::init(cfg, rng)).collect(),
            n_self,
            n_cross,
            config: *cfg,
        })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn branch(&self, e: usize) -> Branch {
        if e < self.n_self {
            Branch::SelfType
        } else {
            Branch::CrossType
        }
    }

    pub fn params(&self) -> Vec<&Tensor2> {
        self.experts.iter().flat_map(HgnnEncoder::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor2> {
        self.experts.iter_mut().flat_map(HgnnEncoder::params_mut).collect()
    }
}

/// Realised routing of every sub-node.
#[derive(Debug, Clone, PartialEq)]
pub struct GateOutput {
    /// Selected experts per row, highest score first.
    pub selected: Vec<Vec<usize>>,
    /// `rows x n_e`; zero outside the selection.
    pub gates: Tensor2,
    /// Realised scores `S(x)`.
    pub scores: Tensor2,
    /// `x·W_g`.
    pub clean: Tensor2,
    /// `softplus(x·W_n)`.
    pub noise_scale: Tensor2,
    /// The standard-normal draw (zeros with noise disabled).
    pub eps: Tensor2,
}

/// Draws `ε` for `rows x n_e` scores, or zeros with noise disabled.
pub fn draw_noise(rows: usize, n_experts: usize, enabled: bool, rng: &mut crate::rng::Rng) -> Tensor2 {
    if !enabled {
        return Tensor2::zeros(rows, n_experts);
    }
    Tensor2::from_fn(rows, n_experts, |_, _| StandardNormal.sample(rng))
}

/// Top-k softmax over given scores.
pub fn gates_from_scores(scores: &Tensor2, k: usize) -> (Vec<Vec<usize>>, Tensor2) {
    let mut gates = Tensor2::zeros(scores.rows(), scores.cols());
    let mut selected = Vec::with_capacity(scores.rows());
    for r in 0..scores.rows() {
        let row = scores.row(r);
        let sel = top_k_indices(row, k);
        let max = row[sel[0]];
        let w: Vec<f64> = sel.iter().map(|&j| (row[j] - max).exp()).collect();
        let z: f64 = w.iter().sum();
        for (&j, wj) in sel.iter().zip(w) {
            gates[(r, j)] = wj / z;
        }
        selected.push(sel);
    }
    (selected, gates)
}

pub fn gate(x: &Tensor2, gp: &GateParams, rng: &mut crate::rng::Rng) -> Result<GateOutput> {
    gp.validate()?;
    let eps = draw_noise(x.rows(), gp.num_experts(), gp.noise_enabled, rng);
    gate_with_noise(x, gp, eps)
}

/// Gating with an explicit noise draw.
pub fn gate_with_noise(x: &Tensor2, gp: &GateParams, eps: Tensor2) -> Result<GateOutput> {
    gp.validate()?;
    let clean = x.matmul(&gp.w_g)?;
    let noise_scale = x.matmul(&gp.w_n)?.map(softplus);
    if eps.shape() != clean.shape() {
        return Err(NsgError::ShapeMismatch {
            op: "gate noise",
            lhs: clean.shape(),
            rhs: eps.shape(),
        });
    }
    let scores = clean.add(&eps.hadamard(&noise_scale)?)?;
    let (selected, gates) = gates_from_scores(&scores, gp.k);
    Ok(GateOutput {
        selected,
        gates,
        scores,
        clean,
        noise_scale,
        eps,
    })
}

/// `CV(Σ_rows gates)²`.
pub fn importance_loss(go: &GateOutput) -> f64 {
    cv_squared(go.gates.col_sums().data())
}

/// `Φ((clean_e − kth_excl(realised, e, k)) / noise_scale_e)`, with the
/// noise scale clamped at [`MIN_NOISE_SCALE`]. One when fewer than `k`
/// other experts exist.
pub fn load_probability(clean: &[f64], noise_scale: &[f64], e: usize, realized: &[f64], k: usize) -> f64 {
    match kth_largest_excluding(realized, e, k) {
        None => 1.0,
        Some(j) => normal_cdf((clean[e] - realized[j]) / noise_scale[e].max(MIN_NOISE_SCALE)),
    }
}

/// Per-expert expected load, summed over rows.
pub fn expert_loads(go: &GateOutput, k: usize) -> Vec<f64> {
    let ne = go.gates.cols();
    let mut load = vec![0.0; ne];
    for r in 0..go.gates.rows() {
        for (e, l) in load.iter_mut().enumerate() {
            *l += load_probability(go.clean.row(r), go.noise_scale.row(r), e, go.scores.row(r), k);
        }
    }
    load
}

pub fn load_loss(go: &GateOutput, k: usize) -> f64 {
    cv_squared(&expert_loads(go, k))
}

pub fn combined_aux_loss(go: &GateOutput, k: usize, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    lambda * (importance_loss(go) + load_loss(go, k))
}

// ---------------------------------------------------------------------------
// Tape form

#[derive(Debug, Clone)]
pub struct GateVars {
    pub w_g: Var,
    pub w_n: Var,
}

impl GateVars {
    pub fn bind(tape: &mut Tape, gp: &GateParams, trainable: bool) -> Self {
        if trainable {
            Self {
                w_g: tape.param(gp.w_g.clone()),
                w_n: tape.param(gp.w_n.clone()),
            }
        } else {
            Self {
                w_g: tape.constant(gp.w_g.clone()),
                w_n: tape.constant(gp.w_n.clone()),
            }
        }
    }
}

/// Handles produced by [`moe_forward_vars`].
#[derive(Debug, Clone)]
pub struct MoeTapeOutput {
    pub output: Var,
    /// Gate input `x`.
    pub input: Var,
    pub gates: Var,
    pub clean: Var,
    pub raw_noise: Var,
    pub eps: Arc<Tensor2>,
    /// Experts skipped because no row routed to them.
    pub skipped: Vec<usize>,
}

/// Relation operators of both branches.
#[derive(Debug, Clone)]
pub struct BranchOperators {
    pub self_ops: Vec<Arc<SparseMatrix>>,
    pub cross_ops: Vec<Arc<SparseMatrix>>,
}

impl BranchOperators {
    pub fn new(nsg_self: &NsgGraph, nsg_cross: &NsgGraph, agg: Aggregation) -> Result<Self> {
        check_branches(nsg_self, nsg_cross)?;
        Ok(Self {
            self_ops: relation_operators(nsg_self, agg),
            cross_ops: relation_operators(nsg_cross, agg),
        })
    }
}

fn check_branches(nsg_self: &NsgGraph, nsg_cross: &NsgGraph) -> Result<()> {
    if nsg_self.variant != EdgeVariant::SelfType || nsg_cross.variant != EdgeVariant::CrossType {
        return Err(NsgError::InvalidGraph(format!(
            "expert branches need a self-type and a cross-type NSG, got {} and {}",
            nsg_self.variant, nsg_cross.variant
        )));
    }
    if (nsg_self.n, nsg_self.m) != (nsg_cross.n, nsg_cross.m) {
        return Err(NsgError::InvalidGraph(format!(
            "branch NSGs built from different graphs: (n={}, m={}) vs (n={}, m={})",
            nsg_self.n, nsg_self.m, nsg_cross.n, nsg_cross.m
        )));
    }
    Ok(())
}

/// Gate on `x`, run every routed expert on its branch, and mix.
#[allow(clippy::too_many_arguments)]
pub fn moe_forward_vars(
    tape: &mut Tape,
    x: Var,
    ops: &BranchOperators,
    experts: &[Vec<LayerVars>],
    n_self: usize,
    gate: &GateVars,
    k: usize,
    eps: Arc<Tensor2>,
    act: Activation,
) -> Result<MoeTapeOutput> {
    let clean = tape.matmul(x, gate.w_g)?;
    let raw_noise = tape.matmul(x, gate.w_n)?;
    let scale = tape.softplus(raw_noise);
    let eps_var = tape.constant((*eps).clone());
    let noise = tape.mul(eps_var, scale)?;
    let scores = tape.add(clean, noise)?;
    let gates = tape.topk_softmax(scores, k);

    let mut output = None;
    let mut skipped = Vec::new();
    for (e, layers) in experts.iter().enumerate() {
        let column = tape.slice_cols(gates, e, e + 1)?;
        if tape.value(column).max_abs() == 0.0 {
            skipped.push(e);
            continue;
        }
        let branch_ops = if e < n_self { &ops.self_ops } else { &ops.cross_ops };
        let h = encoder_forward_vars(tape, x, branch_ops, layers, act)?;
        let weighted = tape.scale_rows(h, column)?;
        output = Some(match output {
            None => weighted,
            Some(acc) => tape.add(acc, weighted)?,
        });
    }
    let output = output.ok_or_else(|| NsgError::InvalidConfig("no expert received a gate".into()))?;
    Ok(MoeTapeOutput {
        output,
        input: x,
        gates,
        clean,
        raw_noise,
        eps,
        skipped,
    })
}

/// `λ·(CV²(importance) + CV²(load))` on the tape.
pub fn aux_loss_vars(tape: &mut Tape, out: &MoeTapeOutput, k: usize, lambda: f64) -> Result<Var> {
    let importance = tape.col_sum(out.gates);
    let imp = tape.cv_squared(importance);
    let probs = tape.load_probability(out.clean, out.raw_noise, Arc::clone(&out.eps), k)?;
    let load = tape.col_sum(probs);
    let ld = tape.cv_squared(load);
    let both = tape.add(imp, ld)?;
    Ok(tape.scale(both, lambda))
}

/// Same value as [`aux_loss_vars`], but recomputed from a detached copy of
/// the gate input so the balancing terms train only `W_g` and `W_n`.
pub fn routing_aux_loss_vars(
    tape: &mut Tape,
    out: &MoeTapeOutput,
    gate: &GateVars,
    k: usize,
    lambda: f64,
) -> Result<Var> {
    let x = tape.constant(tape.value(out.input).clone());
    let clean = tape.matmul(x, gate.w_g)?;
    let raw_noise = tape.matmul(x, gate.w_n)?;
    let scale = tape.softplus(raw_noise);
    let eps_var = tape.constant((*out.eps).clone());
    let noise = tape.mul(eps_var, scale)?;
    let scores = tape.add(clean, noise)?;
    let gates = tape.topk_softmax(scores, k);
    let detached = MoeTapeOutput {
        gates,
        clean,
        raw_noise,
        input: x,
        ..out.clone()
    };
    aux_loss_vars(tape, &detached, k, lambda)
}

/// Plain-tensor mixture forward.
pub fn moe_forward(
    x: &Tensor2,
    nsg_self: &NsgGraph,
    nsg_cross: &NsgGraph,
    bank: &ExpertBank,
    gp: &GateParams,
    rng: &mut crate::rng::Rng,
) -> Result<(Tensor2, GateOutput)> {
    gp.validate()?;
    if gp.num_experts() != bank.len() {
        return Err(NsgError::DimensionMismatch {
            context: "gate width vs expert count".into(),
            expected: bank.len(),
            found: gp.num_experts(),
        });
    }
    let ops = BranchOperators::new(nsg_self, nsg_cross, bank.config.aggregation)?;
    let eps = draw_noise(x.rows(), gp.num_experts(), gp.noise_enabled, rng);
    let go = gate_with_noise(x, gp, eps.clone())?;

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let gv = GateVars::bind(&mut tape, gp, false);
    let experts: Vec<Vec<LayerVars>> = bank
        .experts
        .iter()
        .map(|enc| enc.layers.iter().map(|l| LayerVars::bind(&mut tape, l, false)).collect())
        .collect();
    let out = moe_forward_vars(
        &mut tape,
        xv,
        &ops,
        &experts,
        bank.n_self,
        &gv,
        gp.k,
        Arc::new(eps),
        bank.config.activation,
    )?;
    Ok((tape.value(out.output).clone(), go))
}

// ---------------------------------------------------------------------------
// Diagnostics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDiagnostics {
    pub importance: Vec<f64>,
    pub load: Vec<f64>,
    /// Fraction of all (row, slot) selections that went to each expert.
    pub selection_share: Vec<f64>,
    /// `[modality][expert]` mean gate weight over that modality's sub-nodes.
    pub modality_mean_gate: Vec<Vec<f64>>,
    pub importance_cv2: f64,
    pub load_cv2: f64,
}

pub fn gate_diagnostics(go: &GateOutput, k: usize, m: usize) -> GateDiagnostics {
    let ne = go.gates.cols();
    let rows = go.gates.rows();
    let importance = go.gates.col_sums().into_data();
    let load = expert_loads(go, k);
    let mut counts = vec![0usize; ne];
    for sel in &go.selected {
        for &e in sel {
            counts[e] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let selection_share = counts
        .iter()
        .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect();
    let mut modality_mean_gate = vec![vec![0.0; ne]; m];
    let mut per_mod = vec![0usize; m];
    for r in 0..rows {
        let t = r % m;
        per_mod[t] += 1;
        for e in 0..ne {
            modality_mean_gate[t][e] += go.gates[(r, e)];
        }
    }
    for (row, &c) in modality_mean_gate.iter_mut().zip(&per_mod) {
        if c > 0 {
            row.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    GateDiagnostics {
        importance_cv2: cv_squared(&importance),
        load_cv2: cv_squared(&load),
        importance,
        load,
        selection_share,
        modality_mean_gate,
    }
}
