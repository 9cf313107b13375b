//! Task losses on plain tensors. Training uses the fused tape ops
//! (`softmax_cross_entropy`, `bce_with_logits`); these are the reference
//! forms used for reporting and by the tests.

use crate::error::{NsgError, Result};
use crate::numerics::{dot, sigmoid, Tensor2};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-12;

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Mean of `-log softmax(z_u)[label_u]` over `mask`.
pub fn cross_entropy_nc(z: &Tensor2, labels: &[usize], mask: &[usize]) -> Result<f64> {
    if mask.is_empty() {
        return Err(NsgError::InvalidConfig("cross-entropy over an empty node set".into()));
    }
    let mut total = 0.0;
    for &u in mask {
        let label = labels[u];
        if label >= z.cols() {
            return Err(NsgError::InvalidConfig(format!(
                "label {label} out of range for {} classes",
                z.cols()
            )));
        }
        total += log_sum_exp(z.row(u)) - z[(u, label)];
    }
    Ok(total / mask.len() as f64)
}

/// Inner-product logit `z_iᵀ z_j`.
pub fn link_logit(z: &Tensor2, i: usize, j: usize) -> f64 {
    dot(z.row(i), z.row(j))
}

/// `σ(z_iᵀ z_j)` for every pair.
pub fn link_scores(z: &Tensor2, pairs: &[(usize, usize)]) -> Vec<f64> {
    pairs.iter().map(|&(i, j)| sigmoid(link_logit(z, i, j))).collect()
}

/// Mean binary cross-entropy with targets 1 for `pos` and 0 for `neg`.
pub fn bce_link_loss(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() {
        return Err(NsgError::InvalidConfig("link loss needs at least one positive".into()));
    }
    let clamp = |p: f64| p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let total: f64 = pos.iter().map(|&p| -clamp(p).ln()).sum::<f64>()
        + neg.iter().map(|&p| -(1.0 - clamp(p)).ln()).sum::<f64>();
    Ok(total / (pos.len() + neg.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn uniform_logits_give_ln_c() {
        let z = Tensor2::zeros(4, 5);
        let loss = cross_entropy_nc(&z, &[0, 1, 2, 3], &[0, 2, 3]).unwrap();
        assert_relative_eq!(loss, 5f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn huge_correct_margin_gives_zero_loss() {
        let z = Tensor2::from_rows(&[vec![200.0, 0.0, 0.0], vec![0.0, 0.0, 200.0]]);
        let loss = cross_entropy_nc(&z, &[0, 2], &[0, 1]).unwrap();
        assert!(loss < 1e-80);
    }

    #[test]
    fn three_node_hand_case() {
        // Row 0: softmax(1, 0)[0] = e/(e+1); row 1: softmax(0, 2)[0] = 1/(1+e²);
        // row 2: softmax(3, 3)[1] = 1/2.
        let z = Tensor2::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 3.0]]);
        let e = std::f64::consts::E;
        let want = (-(e / (e + 1.0)).ln() - (1.0 / (1.0 + e * e)).ln() - 0.5f64.ln()) / 3.0;
        let got = cross_entropy_nc(&z, &[0, 0, 1], &[0, 1, 2]).unwrap();
        assert_relative_eq!(got, want, epsilon = 1e-14);
    }

    #[test]
    fn empty_mask_is_rejected() {
        assert!(cross_entropy_nc(&Tensor2::zeros(2, 2), &[0, 1], &[]).is_err());
    }

    #[test]
    fn zero_embedding_scores_half() {
        let z = Tensor2::from_rows(&[vec![0.0, 0.0], vec![1.0, -3.0], vec![2.0, 5.0]]);
        for s in link_scores(&z, &[(0, 1), (0, 2), (2, 0)]) {
            assert_eq!(s, 0.5);
        }
    }

    #[test]
    fn equal_embeddings_with_norm_two() {
        let z = Tensor2::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        let s = link_scores(&z, &[(0, 1)])[0];
        assert_relative_eq!(s, 1.0 / (1.0 + (-2f64).exp()), epsilon = 1e-15);
        assert!((s - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn scores_are_symmetric() {
        let z = Tensor2::from_rows(&[vec![0.3, -1.2, 0.5], vec![2.0, 0.1, -0.7]]);
        let s = link_scores(&z, &[(0, 1), (1, 0)]);
        assert_eq!(s[0], s[1]);
    }

    #[test]
    fn bce_limits() {
        assert!(bce_link_loss(&[1.0, 1.0], &[0.0, 0.0]).unwrap() < 1e-11);
        assert_relative_eq!(bce_link_loss(&[0.5; 3], &[0.5; 3]).unwrap(), 2f64.ln(), epsilon = 1e-15);
        assert!(bce_link_loss(&[], &[0.5]).is_err());
    }

    #[test]
    fn bce_two_by_two_hand_case() {
        let want = (-(0.9f64.ln()) - 0.6f64.ln() - 0.8f64.ln() - 0.7f64.ln()) / 4.0;
        let got = bce_link_loss(&[0.9, 0.6], &[0.2, 0.3]).unwrap();
        assert_relative_eq!(got, want, epsilon = 1e-15);
    }
}
