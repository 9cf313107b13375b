//! Run directories: `metrics.jsonl`, `best.ckpt` (+ `best.ckpt.json`
//! descriptor) and `manifest.json`, and evaluation from a checkpoint.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::{Metrics, Task, EVAL_NEGATIVES};
use super::model::{ArchConfig, NsgMoeModel};
use super::train::{prepare_task, NsgRunner, Split, TaskConfig, TrainReport, LP_TRAIN_FRAC, LP_VAL_FRAC};
use crate::error::{NsgError, Result};
use crate::graphdata::MultimodalGraph;
use crate::hgnn::{read_checkpoint, write_checkpoint, CheckpointHeader};
use crate::sparsifier::SpanningTree;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything needed to rebuild the model around a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointDescriptor {
    pub header: CheckpointHeader,
    pub arch: ArchConfig,
    pub task: TaskConfig,
    pub dims: Vec<usize>,
    pub out_dim: usize,
    pub dataset_hash: String,
    pub best_epoch: usize,
    pub trees: Option<Vec<SpanningTree>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeProtocol {
    pub eval_negatives_per_positive: usize,
    pub eval_rule: String,
    pub train_rule: String,
    /// Edge split fractions when the dataset has no edge split.
    pub lp_split: (f64, f64, f64),
}

impl NegativeProtocol {
    pub fn current() -> Self {
        Self {
            eval_negatives_per_positive: EVAL_NEGATIVES,
            eval_rule: "uniform with replacement over nodes that are neither the source nor its neighbour in the full graph; ties ranked pessimistically".into(),
            train_rule: "one uniform non-edge of the training graph per training positive, redrawn every epoch".into(),
            lp_split: (LP_TRAIN_FRAC, LP_VAL_FRAC, 1.0 - LP_TRAIN_FRAC - LP_VAL_FRAC),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub task: TaskConfig,
    pub arch: ArchConfig,
    pub seed: u64,
    pub dataset_hash: String,
    pub num_nodes: usize,
    pub num_edges: usize,
    pub dims: Vec<usize>,
    pub num_parameters: usize,
    pub sparsified: bool,
    /// `(relation, self-type count, cross-type count)`.
    pub relation_counts: Vec<(String, usize, usize)>,
    pub negative_sampling: NegativeProtocol,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub best_val: Metrics,
    pub test: Metrics,
}

fn hex(h: u64) -> String {
    format!("{h:016x}")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| NsgError::json(path.display().to_string(), e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| NsgError::io(path, e))
}

pub fn descriptor_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the three run files into `dir` (created if missing).
pub fn write_run(
    dir: &Path,
    g: &MultimodalGraph,
    cfg: &TaskConfig,
    runner: &NsgRunner,
    report: &TrainReport,
) -> Result<RunManifest> {
    fs::create_dir_all(dir).map_err(|e| NsgError::io(dir, e))?;
    let metrics_path = dir.join(METRICS_FILE);
    let mut lines = Vec::new();
    for rec in &report.history {
        serde_json::to_writer(&mut lines, rec).map_err(|e| NsgError::json(METRICS_FILE, e))?;
        lines.push(b'\n');
    }
    fs::File::create(&metrics_path)
        .and_then(|mut f| f.write_all(&lines))
        .map_err(|e| NsgError::io(&metrics_path, e))?;

    let model = &runner.model;
    let header = model.checkpoint_header();
    let ckpt = dir.join(CHECKPOINT_FILE);
    write_checkpoint(&ckpt, &header, &model.params())?;
    let descriptor = CheckpointDescriptor {
        header,
        arch: model.arch,
        task: *cfg,
        dims: model.dims.clone(),
        out_dim: model.out_dim,
        dataset_hash: hex(g.content_hash()),
        best_epoch: report.best_epoch,
        trees: runner.trees.clone(),
    };
    write_json(&descriptor_path(&ckpt), &descriptor)?;

    let manifest = RunManifest {
        task: *cfg,
        arch: model.arch,
        seed: cfg.seed,
        dataset_hash: hex(g.content_hash()),
        num_nodes: g.num_nodes,
        num_edges: g.edges.len(),
        dims: model.dims.clone(),
        num_parameters: model.num_scalars(),
        sparsified: runner.trees.is_some(),
        relation_counts: runner.graph.relation_counts(),
        negative_sampling: NegativeProtocol::current(),
        epochs_run: report.history.len(),
        best_epoch: report.best_epoch,
        stopped_early: report.stopped_early,
        best_val: report.best_val,
        test: report.test,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Rebuilds the model stored at `ckpt`.
pub fn load_model(ckpt: &Path) -> Result<(NsgMoeModel, CheckpointDescriptor)> {
    let (header, params) = read_checkpoint(ckpt)?;
    let dpath = descriptor_path(ckpt);
    let text = fs::read_to_string(&dpath).map_err(|e| NsgError::io(&dpath, e))?;
    let desc: CheckpointDescriptor =
        serde_json::from_str(&text).map_err(|e| NsgError::json(dpath.display().to_string(), e))?;
    if desc.header != header {
        return Err(NsgError::CheckpointMismatch("checkpoint header differs from its descriptor".into()));
    }
    let mut model = NsgMoeModel::init(&desc.dims, desc.out_dim, &desc.arch, desc.task.seed)?;
    if model.arch_hash() != header.arch_hash {
        return Err(NsgError::CheckpointMismatch(format!(
            "architecture hash {:016x} does not match checkpoint {:016x}",
            model.arch_hash(),
            header.arch_hash
        )));
    }
    model.set_params(params)?;
    Ok((model, desc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub task: Task,
    pub dataset_hash: String,
    pub val: Metrics,
    pub test: Metrics,
}

/// Evaluates the checkpoint on `g` with the task and seed it was trained with.
pub fn evaluate_checkpoint(ckpt: &Path, g: &MultimodalGraph) -> Result<EvalOutput> {
    let (model, desc) = load_model(ckpt)?;
    if g.dims() != desc.dims {
        return Err(NsgError::CheckpointMismatch(format!(
            "dataset modality dims {:?} do not match checkpoint {:?}",
            g.dims(),
            desc.dims
        )));
    }
    let data = prepare_task(g, desc.task.task, desc.task.seed)?;
    if data.out_dim(desc.arch.hgnn.hidden) != desc.out_dim {
        return Err(NsgError::CheckpointMismatch(format!(
            "dataset output width {} does not match checkpoint {}",
            data.out_dim(desc.arch.hgnn.hidden),
            desc.out_dim
        )));
    }
    if let Some(trees) = &desc.trees {
        if trees.len() != g.num_nodes {
            return Err(NsgError::CheckpointMismatch("stored spanning trees do not cover the dataset".into()));
        }
    }
    let runner = NsgRunner::with_trees(model, &data, desc.trees.clone())?;
    let z = runner.model.infer(&data.features, &runner.graph)?.0;
    Ok(EvalOutput {
        task: desc.task.task,
        dataset_hash: hex(g.content_hash()),
        val: data.evaluate(&z, Split::Val),
        test: data.evaluate(&z, Split::Test),
    })
}
