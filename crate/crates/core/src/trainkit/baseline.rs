//! Comparator: a two-layer mean-aggregation GCN on the original graph with
//! all modalities concatenated into one feature vector per node.

use std::sync::Arc;

use super::train::{fit, prepare_task, StepVars, TaskConfig, TaskData, TrainReport, Trainable};
use crate::error::Result;
use crate::graphdata::MultimodalGraph;
use crate::numerics::{SparseMatrix, Tape, Tensor2};
use crate::rng;

/// Mean over the closed neighbourhood `N(u) ∪ {u}`.
pub fn closed_mean_operator(n: usize, edges: &[(usize, usize)]) -> SparseMatrix {
    let mut deg = vec![1usize; n];
    for &(u, v) in edges {
        deg[u] += 1;
        deg[v] += 1;
    }
    let mut triplets: Vec<(usize, usize, f64)> = (0..n).map(|u| (u, u, 1.0 / deg[u] as f64)).collect();
    for &(u, v) in edges {
        triplets.push((u, v, 1.0 / deg[u] as f64));
        triplets.push((v, u, 1.0 / deg[v] as f64));
    }
    SparseMatrix::from_triplets(n, n, &triplets)
}

/// `Z = P·relu(P·X·W1 + b1)·W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcatGcn {
    pub w1: Tensor2,
    pub b1: Tensor2,
    pub w2: Tensor2,
    pub b2: Tensor2,
    x: Tensor2,
    op: Arc<SparseMatrix>,
}

impl ConcatGcn {
    pub fn init(data: &TaskData, hidden: usize, seed: u64) -> Self {
        let x = Tensor2::concat_cols(&data.features.iter().collect::<Vec<_>>()).expect("modalities share rows");
        let out = data.out_dim(hidden);
        let mut r = rng::stream(seed, "baseline/init", 0);
        Self {
            w1: Tensor2::glorot(x.cols(), hidden, &mut r),
            b1: Tensor2::zeros(1, hidden),
            w2: Tensor2::glorot(hidden, out, &mut r),
            b2: Tensor2::zeros(1, out),
            op: Arc::new(closed_mean_operator(data.n, &data.message_edges)),
            x,
        }
    }

    fn forward(&self, tape: &mut Tape, trainable: bool) -> Result<(Vec<crate::numerics::Var>, crate::numerics::Var)> {
        let params: Vec<_> = [&self.w1, &self.b1, &self.w2, &self.b2]
            .into_iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        let x = tape.constant(self.x.clone());
        let h = tape.propagate(x, Arc::clone(&self.op))?;
        let h = tape.matmul(h, params[0])?;
        let h = tape.add_row(h, params[1])?;
        let h = tape.relu(h);
        let h = tape.propagate(h, Arc::clone(&self.op))?;
        let z = tape.matmul(h, params[2])?;
        let z = tape.add_row(z, params[3])?;
        Ok((params, z))
    }
}

impl Trainable for ConcatGcn {
    fn param_values(&self) -> Vec<Tensor2> {
        vec![self.w1.clone(), self.b1.clone(), self.w2.clone(), self.b2.clone()]
    }

    fn set_params(&mut self, values: Vec<Tensor2>) -> Result<()> {
        let [w1, b1, w2, b2]: [Tensor2; 4] = values
            .try_into()
            .map_err(|_| crate::NsgError::CheckpointMismatch("baseline expects 4 tensors".into()))?;
        (self.w1, self.b1, self.w2, self.b2) = (w1, b1, w2, b2);
        Ok(())
    }

    fn record_step(&self, tape: &mut Tape, data: &TaskData, cfg: &TaskConfig, epoch: usize) -> Result<StepVars> {
        let (params, z) = self.forward(tape, true)?;
        let task = data.task_loss_vars(tape, z, cfg.seed, epoch)?;
        Ok(StepVars {
            total: task,
            task,
            aux: None,
            params,
            gate: None,
            skipped: Vec::new(),
        })
    }

    fn outputs(&self, _data: &TaskData) -> Result<Tensor2> {
        let mut tape = Tape::new();
        let (_, z) = self.forward(&mut tape, false)?;
        Ok(tape.value(z).clone())
    }
}

/// Trains the baseline with the same optimiser, budget and early stopping as
/// the NSG model.
pub fn baseline_concat_gcn(g: &MultimodalGraph, cfg: &TaskConfig, hidden: usize) -> Result<(ConcatGcn, TrainReport)> {
    cfg.validate()?;
    let data = prepare_task(g, cfg.task, cfg.seed)?;
    baseline_prepared(&data, cfg, hidden)
}

pub fn baseline_prepared(data: &TaskData, cfg: &TaskConfig, hidden: usize) -> Result<(ConcatGcn, TrainReport)> {
    let mut model = ConcatGcn::init(data, hidden, cfg.seed);
    let report = fit(&mut model, data, cfg)?;
    Ok((model, report))
}
