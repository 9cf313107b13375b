//! Block-Laplacian properties against an independent dense eigensolver.

use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;

use nsg_core::spectral::{
    analyze, block_diagonalize, build_block_laplacian, filter_matrix, frequency_response, SpectralConfig, Subspace,
};
use nsg_core::numerics::Tensor2;

const TOL: f64 = 1e-8;

fn to_dmatrix(t: &Tensor2) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn adjacency(n: usize, bits: &[bool], weights: &[f64], weighted: bool) -> Tensor2 {
    let mut a = Tensor2::zeros(n, n);
    let mut at = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            if bits[at] {
                let w = if weighted { weights[at] } else { 1.0 };
                a[(i, j)] = w;
                a[(j, i)] = w;
            }
            at += 1;
        }
    }
    a
}

fn instance() -> impl Strategy<Value = (Tensor2, Tensor2, SpectralConfig)> {
    (1usize..=30).prop_flat_map(|n| {
        let pairs = n * (n - 1) / 2;
        (
            proptest::collection::vec(proptest::bool::weighted(0.2), pairs),
            proptest::collection::vec(0.1f64..2.0, pairs),
            any::<bool>(),
            any::<bool>(),
            -1.0f64..1.0,
            -1.0f64..1.0,
        )
            .prop_map(move |(bits, weights, weighted, plus_a, alpha, beta)| {
                let a = adjacency(n, &bits, &weights, weighted);
                let b = if plus_a {
                    Tensor2::identity(n).add(&a).unwrap()
                } else {
                    Tensor2::identity(n)
                };
                let cfg = SpectralConfig {
                    alpha,
                    beta,
                    ..SpectralConfig::default()
                };
                (a, b, cfg)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn full_spectrum_is_the_union_of_block_spectra((a, b, cfg) in instance()) {
        let bl = build_block_laplacian(&a, &b, &cfg).unwrap();
        let n = bl.n;

        let mut oracle: Vec<f64> = SymmetricEigen::new(to_dmatrix(&bl.l)).eigenvalues.iter().copied().collect();
        oracle.sort_by(f64::total_cmp);
        let spectra = block_diagonalize(&bl).unwrap();
        let mut union = spectra.assembled_values();
        union.sort_by(f64::total_cmp);
        for (x, y) in union.iter().zip(&oracle) {
            prop_assert!((x - y).abs() < TOL, "{x} vs {y}");
        }

        // Each assembled vector is an eigenvector of L with the [v; ±v] shape
        // and is scaled by h(λ; u) under the filter.
        let u = spectra.assembled_vectors();
        let values = spectra.assembled_values();
        let lu = bl.l.matmul(&u).unwrap();
        let gu = filter_matrix(&bl, &cfg).matmul(&u).unwrap();
        for (j, &lam) in values.iter().enumerate() {
            let sub = if j < n { Subspace::F1 } else { Subspace::F2 };
            let sign = if sub == Subspace::F1 { -1.0 } else { 1.0 };
            let h = frequency_response(lam, sub, &cfg);
            for i in 0..2 * n {
                prop_assert!((lu[(i, j)] - lam * u[(i, j)]).abs() < TOL);
                prop_assert!((gu[(i, j)] - h * u[(i, j)]).abs() < TOL);
            }
            for i in 0..n {
                prop_assert!((u[(i, j)] + sign * u[(i + n, j)]).abs() < TOL);
            }
        }

        let report = analyze(&bl, &cfg).unwrap();
        prop_assert!(report.max_deviation() < TOL);
        prop_assert_eq!(report.projected_f1_dim, n);
        prop_assert_eq!(report.projected_f2_dim, n);
    }

    #[test]
    fn f1_minus_f2_gap_is_twice_beta(lambda in 0.0f64..2.0, alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
        let cfg = SpectralConfig { alpha, beta, ..SpectralConfig::default() };
        let gap = frequency_response(lambda, Subspace::F1, &cfg) - frequency_response(lambda, Subspace::F2, &cfg);
        let scale = 1.0 + alpha.abs() + beta.abs() + lambda;
        prop_assert!((gap - 2.0 * beta).abs() <= 4.0 * f64::EPSILON * scale);
    }
}

#[test]
fn identity_cross_block_on_empty_graph() {
    // A = 0, B = I: every node is a two-sub-node pair, so Λ₁ = {0} and Λ₂ = {2}.
    let n = 4;
    let bl = build_block_laplacian(&Tensor2::zeros(n, n), &Tensor2::identity(n), &SpectralConfig::default()).unwrap();
    let spectra = block_diagonalize(&bl).unwrap();
    assert!(spectra.lambda1.iter().all(|v| v.abs() < TOL));
    assert!(spectra.lambda2.iter().all(|v| (v - 2.0).abs() < TOL));
}
