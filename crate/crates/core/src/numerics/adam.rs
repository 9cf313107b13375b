use serde::{Deserialize, Serialize};

use super::tensor::Tensor2;
use crate::error::{NsgError, Result};

/// Bias-corrected Adam with optional decoupled weight decay.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    first: Vec<Tensor2Moments>,
    second: Vec<Tensor2Moments>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Tensor2Moments {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2Moments {
    fn zeros_like(t: &Tensor2) -> Self {
        Self {
            rows: t.rows(),
            cols: t.cols(),
            data: vec![0.0; t.len()],
        }
    }
}

impl AdamState {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// One update of every parameter in place.
    pub fn step(&mut self, params: &mut [Tensor2], grads: &[Tensor2]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(NsgError::DimensionMismatch {
                context: "adam parameter/gradient count".into(),
                expected: params.len(),
                found: grads.len(),
            });
        }
        if self.first.is_empty() {
            self.first = params.iter().map(Tensor2Moments::zeros_like).collect();
            self.second = params.iter().map(Tensor2Moments::zeros_like).collect();
        }
        if self.first.len() != params.len() {
            return Err(NsgError::DimensionMismatch {
                context: "adam moment count".into(),
                expected: self.first.len(),
                found: params.len(),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let m = &self.first[i];
            if p.shape() != g.shape() || p.shape() != (m.rows, m.cols) {
                return Err(NsgError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape(),
                    rhs: g.shape(),
                });
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first[i].data;
            let v = &mut self.second[i].data;
            for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                if self.weight_decay != 0.0 {
                    *w -= self.lr * self.weight_decay * *w;
                }
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
