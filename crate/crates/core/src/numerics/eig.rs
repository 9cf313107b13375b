//! Symmetric eigendecomposition by cyclic Jacobi rotations.

use super::tensor::Tensor2;
use crate::error::{NsgError, Result};

/// Tolerance on `|a_ij - a_ji|` accepted as symmetric input.
pub const SYMMETRY_TOL: f64 = 1e-10;

const MAX_SWEEPS: usize = 100;

/// Eigenvalues in ascending order with matching orthonormal eigenvectors
/// stored as the columns of `vectors`.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub values: Vec<f64>,
    pub vectors: Tensor2,
}

impl SymEig {
    pub fn vector(&self, k: usize) -> Vec<f64> {
        (0..self.vectors.rows()).map(|i| self.vectors[(i, k)]).collect()
    }

    /// `max |A U - U Λ|`.
    pub fn residual(&self, a: &Tensor2) -> f64 {
        let au = a.matmul(&self.vectors).expect("square input");
        let mut worst = 0.0f64;
        for i in 0..au.rows() {
            for k in 0..au.cols() {
                worst = worst.max((au[(i, k)] - self.vectors[(i, k)] * self.values[k]).abs());
            }
        }
        worst
    }
}

pub fn sym_eig(a: &Tensor2) -> Result<SymEig> {
    let asym = a.asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(NsgError::NotSymmetric(asym));
    }
    let n = a.rows();
    // Work on the exactly symmetrised copy.
    let mut m = Tensor2::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]));
    let mut v = Tensor2::identity(n);
    let scale = m.max_abs().max(f64::MIN_POSITIVE);

    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum();
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut m, &mut v, p, q, c, s);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].total_cmp(&m[(j, j)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = Tensor2::from_fn(n, n, |r, k| v[(r, order[k])]);
    Ok(SymEig { values, vectors })
}

/// Applies the Jacobi rotation `Jᵀ M J` in the (p, q) plane and
/// accumulates `V ← V J`.
fn rotate(m: &mut Tensor2, v: &mut Tensor2, p: usize, q: usize, c: f64, s: f64) {
    let n = m.rows();
    for k in 0..n {
        let mkp = m[(k, p)];
        let mkq = m[(k, q)];
        m[(k, p)] = c * mkp - s * mkq;
        m[(k, q)] = s * mkp + c * mkq;
    }
    for k in 0..n {
        let mpk = m[(p, k)];
        let mqk = m[(q, k)];
        m[(p, k)] = c * mpk - s * mqk;
        m[(q, k)] = s * mpk + c * mqk;
    }
    m[(p, q)] = 0.0;
    m[(q, p)] = 0.0;
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}
