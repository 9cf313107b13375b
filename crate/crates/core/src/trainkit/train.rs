//! Full-graph training: task preparation, the epoch loop with Adam and
//! early stopping, and the NSG-MoE entry point.

use std::collections::HashSet;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::metrics::{accuracy, link_metrics, sample_eval_negatives, Metrics, Task};
use super::model::{ArchConfig, ModelGraph, NsgMoeModel};
use crate::error::{NsgError, Result};
use crate::graphdata::{edge_split, MultimodalGraph, SplitKind};
use crate::moe::{aux_loss_vars, gate_diagnostics, routing_aux_loss_vars, gate_with_noise, GateDiagnostics};
use crate::numerics::{AdamState, Tape, Tensor2, Var};
use crate::rng;
use crate::sparsifier::SpanningTree;

/// Edge fractions used when a dataset carries no edge split.
pub const LP_TRAIN_FRAC: f64 = 0.8;
pub const LP_VAL_FRAC: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub task: Task,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Weight of the balancing losses.
    pub lambda: f64,
    pub seed: u64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            task: Task::NodeClassification,
            lr: 1e-4,
            weight_decay: 0.0,
            epochs: 200,
            lambda: 1e4,
            seed: 0,
            patience: 30,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(NsgError::InvalidConfig(format!("learning rate must be finite and >= 0 (got {})", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(NsgError::InvalidConfig(format!("weight decay must be >= 0 (got {})", self.weight_decay)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(NsgError::InvalidConfig(format!("lambda must be >= 0 (got {})", self.lambda)));
        }
        if self.epochs == 0 {
            return Err(NsgError::InvalidConfig("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Task preparation

#[derive(Debug, Clone)]
pub enum Target {
    Nodes {
        labels: Arc<[usize]>,
        num_classes: usize,
        train: Arc<[usize]>,
        val: Vec<usize>,
        test: Vec<usize>,
    },
    Links {
        train: Vec<(usize, usize)>,
        train_set: HashSet<(usize, usize)>,
        val: Vec<(usize, usize)>,
        test: Vec<(usize, usize)>,
        val_negatives: Vec<Vec<usize>>,
        test_negatives: Vec<Vec<usize>>,
    },
}

/// Everything a training run needs from the dataset.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub task: Task,
    pub n: usize,
    pub features: Vec<Tensor2>,
    /// Edges available for message passing: all edges for node tasks, the
    /// training edges for link tasks.
    pub message_edges: Vec<(usize, usize)>,
    pub target: Target,
}

impl TaskData {
    pub fn m(&self) -> usize {
        self.features.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.features.iter().map(Tensor2::cols).collect()
    }

    /// Output width of the merge head: classes, or the embedding width.
    pub fn out_dim(&self, hidden: usize) -> usize {
        match &self.target {
            Target::Nodes { num_classes, .. } => *num_classes,
            Target::Links { .. } => hidden,
        }
    }

    pub fn evaluate(&self, z: &Tensor2, split: Split) -> Metrics {
        match &self.target {
            Target::Nodes { labels, val, test, .. } => {
                let nodes = if split == Split::Val { val } else { test };
                Metrics {
                    accuracy: Some(accuracy(z, labels, nodes)),
                    ..Metrics::default()
                }
            }
            Target::Links {
                val,
                test,
                val_negatives,
                test_negatives,
                ..
            } => match split {
                Split::Val => link_metrics(z, val, val_negatives),
                Split::Test => link_metrics(z, test, test_negatives),
            },
        }
    }

    /// Records the task loss of outputs `z` for one epoch.
    pub fn task_loss_vars(&self, tape: &mut Tape, z: Var, seed: u64, epoch: usize) -> Result<Var> {
        match &self.target {
            Target::Nodes { labels, train, .. } => tape.softmax_cross_entropy(z, Arc::clone(labels), Arc::clone(train)),
            Target::Links { train, train_set, .. } => {
                let mut rng = rng::stream(seed, "train-negatives", epoch as u64);
                let negatives = sample_non_edges(self.n, train_set, train.len(), &mut rng)?;
                let mut src = Vec::with_capacity(2 * train.len());
                let mut dst = Vec::with_capacity(2 * train.len());
                let mut targets = Vec::with_capacity(2 * train.len());
                for (pairs, t) in [(train, 1.0), (&negatives, 0.0)] {
                    for &(u, v) in pairs {
                        src.push(u);
                        dst.push(v);
                        targets.push(t);
                    }
                }
                let zu = tape.gather_rows(z, src.into())?;
                let zv = tape.gather_rows(z, dst.into())?;
                let logits = tape.row_dot(zu, zv)?;
                tape.bce_with_logits(logits, targets.into())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Val,
    Test,
}

/// `count` uniform pairs `u != v` that are not in `edges` (canonical pairs).
pub fn sample_non_edges(
    n: usize,
    edges: &HashSet<(usize, usize)>,
    count: usize,
    rng: &mut rng::Rng,
) -> Result<Vec<(usize, usize)>> {
    if n < 2 || edges.len() >= n * (n - 1) / 2 {
        return Err(NsgError::InvalidGraph("graph has no non-edges to sample".into()));
    }
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let u = rng.random_range(0..n);
        let v = rng.random_range(0..n);
        if u != v && !edges.contains(&(u.min(v), u.max(v))) {
            out.push((u, v));
        }
    }
    Ok(out)
}

/// Validates that `g` supports `task` and gathers its inputs. Link tasks use
/// the dataset's edge split when present, else a seeded random split.
pub fn prepare_task(g: &MultimodalGraph, task: Task, seed: u64) -> Result<TaskData> {
    g.validate()?;
    match task {
        Task::NodeClassification => {
            let (Some(labels), Some(num_classes)) = (&g.labels, g.num_classes) else {
                return Err(NsgError::TaskMismatch("node classification needs labels and a class count".into()));
            };
            let Some(splits) = g.splits.as_ref().filter(|s| s.kind == SplitKind::Node) else {
                return Err(NsgError::TaskMismatch("node classification needs a node split".into()));
            };
            if splits.train.is_empty() || splits.val.is_empty() || splits.test.is_empty() {
                return Err(NsgError::TaskMismatch("node split has an empty train, val or test set".into()));
            }
            Ok(TaskData {
                task,
                n: g.num_nodes,
                features: g.features.clone(),
                message_edges: g.edges.clone(),
                target: Target::Nodes {
                    labels: labels.clone().into(),
                    num_classes,
                    train: splits.train.clone().into(),
                    val: splits.val.clone(),
                    test: splits.test.clone(),
                },
            })
        }
        Task::LinkPrediction => {
            let splits = match g.splits.as_ref().filter(|s| s.kind == SplitKind::Edge) {
                Some(s) => s.clone(),
                None => edge_split(g.edges.len(), LP_TRAIN_FRAC, LP_VAL_FRAC, seed),
            };
            if splits.train.is_empty() || splits.val.is_empty() || splits.test.is_empty() {
                return Err(NsgError::TaskMismatch(format!(
                    "link prediction needs train, val and test edges ({} edges in the graph)",
                    g.edges.len()
                )));
            }
            let pick = |idx: &[usize]| idx.iter().map(|&i| g.edges[i]).collect::<Vec<_>>();
            let train = pick(&splits.train);
            let val = pick(&splits.val);
            let test = pick(&splits.test);
            let mut full = vec![HashSet::new(); g.num_nodes];
            for &(u, v) in &g.edges {
                full[u].insert(v);
                full[v].insert(u);
            }
            let val_negatives = sample_eval_negatives(g.num_nodes, &full, &val, &mut rng::stream(seed, "eval-negatives", 0));
            let test_negatives =
                sample_eval_negatives(g.num_nodes, &full, &test, &mut rng::stream(seed, "eval-negatives", 1));
            Ok(TaskData {
                task,
                n: g.num_nodes,
                features: g.features.clone(),
                message_edges: train.clone(),
                target: Target::Links {
                    train_set: train.iter().copied().collect(),
                    train,
                    val,
                    test,
                    val_negatives,
                    test_negatives,
                },
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Epoch loop

/// One recorded training step.
#[derive(Debug, Clone)]
pub struct StepVars {
    pub total: Var,
    pub task: Var,
    pub aux: Option<Var>,
    /// Trainable leaves in parameter order.
    pub params: Vec<Var>,
    pub gate: Option<GateDiagnostics>,
    pub skipped: Vec<usize>,
}

/// What the epoch loop needs from a model.
pub trait Trainable {
    fn param_values(&self) -> Vec<Tensor2>;
    fn set_params(&mut self, values: Vec<Tensor2>) -> Result<()>;
    fn record_step(&self, tape: &mut Tape, data: &TaskData, cfg: &TaskConfig, epoch: usize) -> Result<StepVars>;
    /// Noise-free node outputs.
    fn outputs(&self, data: &TaskData) -> Result<Tensor2>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub task_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub aux_loss: Option<f64>,
    pub val: Metrics,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gate: Option<GateDiagnostics>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub skipped_experts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    /// Epoch of the restored parameters; 0 means the initial ones.
    pub best_epoch: usize,
    pub best_val: Metrics,
    pub test: Metrics,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn final_gate(&self) -> Option<&GateDiagnostics> {
        self.history.last().and_then(|r| r.gate.as_ref())
    }
}

/// Runs the epoch loop, restores the best-validation parameters and
/// evaluates them on the test split.
pub fn fit<M: Trainable>(model: &mut M, data: &TaskData, cfg: &TaskConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if cfg.task != data.task {
        return Err(NsgError::TaskMismatch(format!(
            "configured task {} but data prepared for {}",
            cfg.task, data.task
        )));
    }
    let mut adam = AdamState::new(cfg.lr, cfg.weight_decay);
    let mut best_params = model.param_values();
    let mut best_val = data.evaluate(&model.outputs(data)?, Split::Val);
    let mut best_epoch = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        let mut tape = Tape::new();
        let step = model.record_step(&mut tape, data, cfg, epoch)?;
        let loss = tape.value(step.total).scalar();
        if !loss.is_finite() {
            return Err(NsgError::InvalidConfig(format!("loss diverged to {loss} at epoch {epoch}")));
        }
        tape.backward(step.total)?;
        let mut params = model.param_values();
        let grads: Vec<Tensor2> = step
            .params
            .iter()
            .zip(&params)
            .map(|(&v, p)| tape.grad(v).cloned().unwrap_or_else(|| Tensor2::zeros(p.rows(), p.cols())))
            .collect();
        adam.step(&mut params, &grads)?;
        model.set_params(params)?;

        let val = data.evaluate(&model.outputs(data)?, Split::Val);
        history.push(EpochRecord {
            epoch,
            loss,
            task_loss: tape.value(step.task).scalar(),
            aux_loss: step.aux.map(|a| tape.value(a).scalar()),
            val,
            gate: step.gate,
            skipped_experts: step.skipped,
        });
        if val.primary() > best_val.primary() {
            best_val = val;
            best_epoch = epoch;
            best_params = model.param_values();
        } else if cfg.patience > 0 && epoch - best_epoch >= cfg.patience {
            stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    model.set_params(best_params)?;
    let test = data.evaluate(&model.outputs(data)?, Split::Test);
    Ok(TrainReport {
        history,
        best_epoch,
        best_val,
        test,
        stopped_early,
    })
}

// ---------------------------------------------------------------------------
// NSG-MoE

/// A model bound to the graphs it runs on.
#[derive(Debug, Clone)]
pub struct NsgRunner {
    pub model: NsgMoeModel,
    pub graph: ModelGraph,
    /// Spanning trees used for sparsification, if any.
    pub trees: Option<Vec<SpanningTree>>,
}

impl NsgRunner {
    /// Builds both expert graphs from `data.message_edges`, sparsified with
    /// trees from the model's projection when `m` exceeds the threshold.
    pub fn new(model: NsgMoeModel, data: &TaskData) -> Result<Self> {
        let trees = model.sparsification_trees(&data.features)?;
        Self::with_trees(model, data, trees)
    }

    pub fn with_trees(model: NsgMoeModel, data: &TaskData, trees: Option<Vec<SpanningTree>>) -> Result<Self> {
        let graph = ModelGraph::new(data.n, data.m(), &data.message_edges, &model.arch, trees.as_deref())?;
        Ok(Self { model, graph, trees })
    }

    /// Records the total loss under an explicit noise draw.
    pub fn record_with_noise(
        &self,
        tape: &mut Tape,
        data: &TaskData,
        cfg: &TaskConfig,
        epoch: usize,
        eps: Tensor2,
    ) -> Result<StepVars> {
        let bound = self.model.bind(tape, true);
        let eps = Arc::new(eps);
        let fw = self
            .model
            .forward_vars(tape, &bound, &data.features, &self.graph, Arc::clone(&eps))?;
        let task = data.task_loss_vars(tape, fw.z, cfg.seed, epoch)?;
        let k = self.model.gate.k;
        let aux = if self.model.arch.aux_grad_to_input {
            aux_loss_vars(tape, &fw.moe, k, cfg.lambda)?
        } else {
            routing_aux_loss_vars(tape, &fw.moe, &bound.gate, k, cfg.lambda)?
        };
        let total = tape.add(task, aux)?;
        let go = gate_with_noise(tape.value(fw.x), &self.model.gate, (*eps).clone())?;
        Ok(StepVars {
            total,
            task,
            aux: Some(aux),
            params: bound.params,
            gate: Some(gate_diagnostics(&go, self.model.gate.k, self.model.m())),
            skipped: fw.moe.skipped,
        })
    }
}

impl Trainable for NsgRunner {
    fn param_values(&self) -> Vec<Tensor2> {
        self.model.param_values()
    }

    fn set_params(&mut self, values: Vec<Tensor2>) -> Result<()> {
        self.model.set_params(values)
    }

    fn record_step(&self, tape: &mut Tape, data: &TaskData, cfg: &TaskConfig, epoch: usize) -> Result<StepVars> {
        let rows = self.graph.n * self.graph.m;
        let eps = self.model.draw_noise(rows, &mut rng::stream(cfg.seed, "gate-noise", epoch as u64));
        self.record_with_noise(tape, data, cfg, epoch, eps)
    }

    fn outputs(&self, data: &TaskData) -> Result<Tensor2> {
        Ok(self.model.infer(&data.features, &self.graph)?.0)
    }
}

/// Trains NSG-MoE on `g`. Deterministic given `cfg.seed`.
pub fn train(g: &MultimodalGraph, cfg: &TaskConfig, arch: &ArchConfig) -> Result<(NsgRunner, TrainReport)> {
    cfg.validate()?;
    let data = prepare_task(g, cfg.task, cfg.seed)?;
    train_prepared(&data, cfg, arch)
}

pub fn train_prepared(data: &TaskData, cfg: &TaskConfig, arch: &ArchConfig) -> Result<(NsgRunner, TrainReport)> {
    let model = NsgMoeModel::init(&data.dims(), data.out_dim(arch.hgnn.hidden), arch, cfg.seed)?;
    let mut runner = NsgRunner::new(model, data)?;
    let report = fit(&mut runner, data, cfg)?;
    Ok((runner, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphdata::{generate_synthetic, SyntheticSpec};
    use crate::hgnn::HgnnConfig;

    fn small_arch() -> ArchConfig {
        ArchConfig {
            hgnn: HgnnConfig {
                hidden: 8,
                ..HgnnConfig::default()
            },
            ..ArchConfig::default()
        }
    }

    fn dataset(seed: u64) -> MultimodalGraph {
        let mut spec = SyntheticSpec::new(40, 2, 2, 6, seed);
        spec.intra_class_edge_prob = 0.2;
        spec.inter_class_edge_prob = 0.02;
        generate_synthetic(&spec).unwrap()
    }

    fn cfg(task: Task) -> TaskConfig {
        TaskConfig {
            task,
            lr: 1e-2,
            epochs: 5,
            lambda: 1.0,
            seed: 3,
            ..TaskConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let g = dataset(1);
        let c = TaskConfig { lr: 0.0, ..cfg(Task::NodeClassification) };
        let data = prepare_task(&g, c.task, c.seed).unwrap();
        let init = NsgMoeModel::init(&data.dims(), 2, &small_arch(), c.seed).unwrap();
        let (runner, report) = train_prepared(&data, &c, &small_arch()).unwrap();
        assert_eq!(runner.model, init);
        let first = report.history[0].val;
        assert!(report.history.iter().all(|r| r.val == first));
    }

    #[test]
    fn training_is_deterministic() {
        let g = dataset(2);
        for task in [Task::NodeClassification, Task::LinkPrediction] {
            let (_, a) = train(&g, &cfg(task), &small_arch()).unwrap();
            let (_, b) = train(&g, &cfg(task), &small_arch()).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn link_graphs_exclude_held_out_edges() {
        let g = dataset(4);
        let data = prepare_task(&g, Task::LinkPrediction, 9).unwrap();
        let Target::Links { val, test, .. } = &data.target else { panic!() };
        let (runner, _) = train_prepared(&data, &cfg(Task::LinkPrediction), &small_arch()).unwrap();
        let m = data.m();
        for nsg in [&runner.graph.self_nsg, &runner.graph.cross_nsg] {
            for (a, b, _) in &nsg.edges {
                let (u, v) = (a / m, b / m);
                if u != v {
                    let e = (u.min(v), u.max(v));
                    assert!(!val.contains(&e) && !test.contains(&e));
                }
            }
        }
    }

    #[test]
    fn task_mismatch_is_reported() {
        let mut g = dataset(1);
        g.labels = None;
        assert!(matches!(
            prepare_task(&g, Task::NodeClassification, 0),
            Err(NsgError::TaskMismatch(_))
        ));
        let g = dataset(1);
        let data = prepare_task(&g, Task::NodeClassification, 0).unwrap();
        let mut runner = NsgRunner::new(NsgMoeModel::init(&data.dims(), 2, &small_arch(), 0).unwrap(), &data).unwrap();
        assert!(fit(&mut runner, &data, &cfg(Task::LinkPrediction)).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TaskConfig { epochs: 0, ..TaskConfig::default() }.validate().is_err());
        assert!(TaskConfig { lr: -1.0, ..TaskConfig::default() }.validate().is_err());
        assert!(TaskConfig { lambda: f64::NAN, ..TaskConfig::default() }.validate().is_err());
        assert!(TaskConfig::default().validate().is_ok());
    }

    #[test]
    fn non_edge_sampler_avoids_edges() {
        let edges: HashSet<_> = [(0, 1), (1, 2), (0, 2)].into_iter().collect();
        let s = sample_non_edges(4, &edges, 50, &mut rng::stream(0, "t", 0)).unwrap();
        assert!(s.iter().all(|&(u, v)| u != v && (u == 3 || v == 3)));
        let full: HashSet<_> = [(0, 1)].into_iter().collect();
        assert!(sample_non_edges(2, &full, 1, &mut rng::stream(0, "t", 0)).is_err());
    }
}
