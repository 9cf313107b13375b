//! Accuracy and ranking metrics.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::losses::link_logit;
use crate::error::{NsgError, Result};
use crate::numerics::Tensor2;

/// Negatives drawn per held-out positive when ranking links.
pub const EVAL_NEGATIVES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    NodeClassification,
    LinkPrediction,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::NodeClassification => "nc",
            Task::LinkPrediction => "lp",
        })
    }
}

impl FromStr for Task {
    type Err = NsgError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nc" | "node_classification" => Ok(Task::NodeClassification),
            "lp" | "link_prediction" => Ok(Task::LinkPrediction),
            other => Err(NsgError::InvalidConfig(format!("unknown task `{other}` (expected nc or lp)"))),
        }
    }
}

/// Evaluation metrics of one split. Only the fields of the task are set.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hits1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hits3: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hits10: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mrr: Option<f64>,
}

impl Metrics {
    /// The model-selection metric: accuracy, else MRR.
    pub fn primary(&self) -> f64 {
        self.accuracy.or(self.mrr).unwrap_or(0.0)
    }

    pub fn from_ranks(ranks: &[usize]) -> Self {
        let n = ranks.len().max(1) as f64;
        let hits = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        Self {
            hits1: Some(hits(1)),
            hits3: Some(hits(3)),
            hits10: Some(hits(10)),
            mrr: Some(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n),
            ..Self::default()
        }
    }
}

/// Row-wise argmax, ties to the lower class.
pub fn predict(z: &Tensor2) -> Vec<usize> {
    (0..z.rows())
        .map(|r| {
            let row = z.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(z: &Tensor2, labels: &[usize], nodes: &[usize]) -> f64 {
    if nodes.is_empty() {
        return 0.0;
    }
    let pred = predict(z);
    nodes.iter().filter(|&&u| pred[u] == labels[u]).count() as f64 / nodes.len() as f64
}

/// 1-based rank of `positive` among `negatives`; equal scores rank ahead of
/// the positive.
pub fn pessimistic_rank(positive: f64, negatives: &[f64]) -> usize {
    1 + negatives.iter().filter(|&&s| s >= positive).count()
}

/// For each positive `(u, v)`, `EVAL_NEGATIVES` partners `w` of `u` drawn
/// uniformly with replacement from the nodes that are neither `u` nor a
/// neighbour of `u` in `adjacency`. Empty when `u` is adjacent to everything.
pub fn sample_eval_negatives(
    n: usize,
    adjacency: &[HashSet<usize>],
    positives: &[(usize, usize)],
    rng: &mut crate::rng::Rng,
) -> Vec<Vec<usize>> {
    positives
        .iter()
        .map(|&(u, _)| {
            let candidates: Vec<usize> = (0..n).filter(|&w| w != u && !adjacency[u].contains(&w)).collect();
            if candidates.is_empty() {
                return Vec::new();
            }
            (0..EVAL_NEGATIVES)
                .map(|_| candidates[rng.random_range(0..candidates.len())])
                .collect()
        })
        .collect()
}

/// Ranks every positive against its negatives using inner-product scores.
pub fn link_ranks(z: &Tensor2, positives: &[(usize, usize)], negatives: &[Vec<usize>]) -> Vec<usize> {
    positives
        .iter()
        .zip(negatives)
        .map(|(&(u, v), negs)| {
            let pos = link_logit(z, u, v);
            let scores: Vec<f64> = negs.iter().map(|&w| link_logit(z, u, w)).collect();
            pessimistic_rank(pos, &scores)
        })
        .collect()
}

pub fn link_metrics(z: &Tensor2, positives: &[(usize, usize)], negatives: &[Vec<usize>]) -> Metrics {
    Metrics::from_ranks(&link_ranks(z, positives, negatives))
}
