//! Two-block spectral structure of a two-modality NSG.
//!
//! With identical within-modality connectivity `a` and cross-modality
//! coupling `b`, the normalised Laplacian is `L = I − [[Â, B̂], [B̂, Â]]`.
//! The orthogonal `Q = [[I, I], [I, −I]]/√2` block-diagonalises it into
//! `I − Â − B̂` (eigenvectors `[v; v]/√2`, the shared subspace F1) and
//! `I − Â + B̂` (eigenvectors `[v; −v]/√2`, the discrepancy subspace F2).
//! The filter `[[αI + Â, βI + B̂], [βI + B̂, αI + Â]]` then acts on each
//! eigenvector with gain `α ± β + 1 − λ`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NsgError, Result};
use crate::numerics::{sym_eig, Tensor2, SYMMETRY_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    SymmetricDegree,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralConfig {
    pub alpha: f64,
    pub beta: f64,
    pub normalization: Normalization,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.5,
            normalization: Normalization::SymmetricDegree,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Subspace {
    F1,
    F2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockLaplacian {
    pub n: usize,
    pub a_hat: Tensor2,
    pub b_hat: Tensor2,
    pub l: Tensor2,
}

/// Normalises `[[a, b], [b, a]]` (degrees over both blocks) and assembles
/// `L`.
pub fn build_block_laplacian(a: &Tensor2, b: &Tensor2, cfg: &SpectralConfig) -> Result<BlockLaplacian> {
    let n = a.rows();
    if a.shape() != (n, n) || b.shape() != (n, n) {
        return Err(NsgError::ShapeMismatch {
            op: "build_block_laplacian",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    for m in [a, b] {
        if !m.is_symmetric(SYMMETRY_TOL) {
            return Err(NsgError::NotSymmetric(m.asymmetry()));
        }
    }
    let (a_hat, b_hat) = match cfg.normalization {
        Normalization::None => (a.clone(), b.clone()),
        Normalization::SymmetricDegree => {
            let deg: Vec<f64> = (0..n)
                .map(|i| a.row(i).iter().sum::<f64>() + b.row(i).iter().sum::<f64>())
                .collect();
            if let Some(i) = deg.iter().position(|&d| d <= 0.0) {
                return Err(NsgError::IsolatedNode(i));
            }
            let norm = |i: usize, j: usize| (deg[i] * deg[j]).sqrt();
            (
                Tensor2::from_fn(n, n, |i, j| a[(i, j)] / norm(i, j)),
                Tensor2::from_fn(n, n, |i, j| b[(i, j)] / norm(i, j)),
            )
        }
    };
    let l = Tensor2::from_fn(2 * n, 2 * n, |i, j| {
        let block = if (i < n) == (j < n) { &a_hat } else { &b_hat };
        let v = block[(i % n, j % n)];
        f64::from(u8::from(i == j)) - v
    });
    Ok(BlockLaplacian { n, a_hat, b_hat, l })
}

/// `Λ₁, U₁` of `I − Â − B̂` and `Λ₂, U₂` of `I − Â + B̂`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpectra {
    pub lambda1: Vec<f64>,
    pub u1: Tensor2,
    pub lambda2: Vec<f64>,
    pub u2: Tensor2,
}

impl BlockSpectra {
    /// `U = Q·diag(U₁, U₂)`: F1 columns first, then F2.
    pub fn assembled_vectors(&self) -> Tensor2 {
        let n = self.u1.rows();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        Tensor2::from_fn(2 * n, 2 * n, |i, j| {
            let (u, sign) = if j < n {
                (&self.u1, 1.0)
            } else {
                (&self.u2, if i < n { 1.0 } else { -1.0 })
            };
            s * sign * u[(i % n, j % n)]
        })
    }

    pub fn assembled_values(&self) -> Vec<f64> {
        self.lambda1.iter().chain(&self.lambda2).copied().collect()
    }
}

pub fn block_diagonalize(bl: &BlockLaplacian) -> Result<BlockSpectra> {
    let n = bl.n;
    let l1 = Tensor2::from_fn(n, n, |i, j| {
        f64::from(u8::from(i == j)) - bl.a_hat[(i, j)] - bl.b_hat[(i, j)]
    });
    let l2 = Tensor2::from_fn(n, n, |i, j| {
        f64::from(u8::from(i == j)) - bl.a_hat[(i, j)] + bl.b_hat[(i, j)]
    });
    let e1 = sym_eig(&l1)?;
    let e2 = sym_eig(&l2)?;
    Ok(BlockSpectra {
        lambda1: e1.values,
        u1: e1.vectors,
        lambda2: e2.values,
        u2: e2.vectors,
    })
}

pub fn frequency_response(lambda: f64, subspace: Subspace, cfg: &SpectralConfig) -> f64 {
    match subspace {
        Subspace::F1 => cfg.alpha + cfg.beta + 1.0 - lambda,
        Subspace::F2 => cfg.alpha - cfg.beta + 1.0 - lambda,
    }
}

/// `[[αI + Â, βI + B̂], [βI + B̂, αI + Â]]`.
pub fn filter_matrix(bl: &BlockLaplacian, cfg: &SpectralConfig) -> Tensor2 {
    let n = bl.n;
    Tensor2::from_fn(2 * n, 2 * n, |i, j| {
        let diag = f64::from(u8::from(i % n == j % n));
        if (i < n) == (j < n) {
            cfg.alpha * diag + bl.a_hat[(i % n, j % n)]
        } else {
            cfg.beta * diag + bl.b_hat[(i % n, j % n)]
        }
    })
}

/// Max over assembled eigenvectors of `‖G·u − h(λ;u)·u‖_∞`.
pub fn verify_filter(bl: &BlockLaplacian, cfg: &SpectralConfig) -> Result<f64> {
    let spectra = block_diagonalize(bl)?;
    Ok(filter_residual(bl, cfg, &spectra))
}

fn filter_residual(bl: &BlockLaplacian, cfg: &SpectralConfig, spectra: &BlockSpectra) -> f64 {
    let g = filter_matrix(bl, cfg);
    let u = spectra.assembled_vectors();
    let gu = g.matmul(&u).expect("square");
    let n = bl.n;
    let mut worst: f64 = 0.0;
    for (j, lam) in spectra.assembled_values().into_iter().enumerate() {
        let sub = if j < n { Subspace::F1 } else { Subspace::F2 };
        let h = frequency_response(lam, sub, cfg);
        for i in 0..2 * n {
            worst = worst.max((gu[(i, j)] - h * u[(i, j)]).abs());
        }
    }
    worst
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenPair {
    pub lambda: f64,
    pub response: f64,
    /// `‖L·u − λ·u‖_∞`.
    pub residual: f64,
    /// `‖top − bottom‖₂` for F1, `‖top + bottom‖₂` for F2.
    pub block_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub n: usize,
    pub config: SpectralConfig,
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub f1: Vec<EigenPair>,
    pub f2: Vec<EigenPair>,
    /// Ascending spectrum of `L` solved as one `2n x 2n` problem.
    pub full_spectrum: Vec<f64>,
    /// Max gap between `full_spectrum` and sorted `Λ₁ ∪ Λ₂`.
    pub spectrum_max_diff: f64,
    pub max_residual: f64,
    pub max_block_residual: f64,
    pub filter_residual: f64,
    /// F1 dimension found by projecting the eigenvectors of the full
    /// problem onto `[v; v]` forms cluster by cluster.
    pub projected_f1_dim: usize,
    pub projected_f2_dim: usize,
}

impl SpectralReport {
    pub fn max_deviation(&self) -> f64 {
        self.spectrum_max_diff
            .max(self.max_residual)
            .max(self.max_block_residual)
            .max(self.filter_residual)
    }
}

/// Eigenvalue clusters closer than this are treated as degenerate.
const CLUSTER_TOL: f64 = 1e-7;

/// Counts how many full-problem eigenvectors lie in F1 and F2. Within each
/// degenerate cluster the basis is arbitrary, so the dimension of its F1
/// component is read off the eigenvalues of `U_cᵀ·P₁·U_c`, where `P₁`
/// projects onto `[v; v]` vectors.
fn projected_dimensions(l: &Tensor2) -> Result<(Vec<f64>, usize, usize)> {
    let full = sym_eig(l)?;
    let size = l.rows();
    let n = size / 2;
    let mut f1 = 0;
    let mut f2 = 0;
    let mut start = 0;
    while start < size {
        let mut end = start + 1;
        while end < size && full.values[end] - full.values[end - 1] < CLUSTER_TOL {
            end += 1;
        }
        let k = end - start;
        // P₁ = ½[[I, I], [I, I]], so uᵀP₁w = ½ Σ_i (u_i + u_{i+n})(w_i + w_{i+n}).
        let sums: Vec<Vec<f64>> = (start..end)
            .map(|c| (0..n).map(|i| full.vectors[(i, c)] + full.vectors[(i + n, c)]).collect())
            .collect();
        let gram = Tensor2::from_fn(k, k, |p, q| {
            0.5 * sums[p].iter().zip(&sums[q]).map(|(x, y)| x * y).sum::<f64>()
        });
        for v in sym_eig(&gram)?.values {
            if v > 0.5 {
                f1 += 1;
            } else {
                f2 += 1;
            }
        }
        start = end;
    }
    Ok((full.values, f1, f2))
}

pub fn analyze(bl: &BlockLaplacian, cfg: &SpectralConfig) -> Result<SpectralReport> {
    let n = bl.n;
    let spectra = block_diagonalize(bl)?;
    let u = spectra.assembled_vectors();
    let values = spectra.assembled_values();
    let lu = bl.l.matmul(&u)?;

    let mut f1 = Vec::with_capacity(n);
    let mut f2 = Vec::with_capacity(n);
    for (j, &lam) in values.iter().enumerate() {
        let sub = if j < n { Subspace::F1 } else { Subspace::F2 };
        let residual = (0..2 * n)
            .map(|i| (lu[(i, j)] - lam * u[(i, j)]).abs())
            .fold(0.0, f64::max);
        let sign = if sub == Subspace::F1 { -1.0 } else { 1.0 };
        let block_residual = (0..n)
            .map(|i| (u[(i, j)] + sign * u[(i + n, j)]).powi(2))
            .sum::<f64>()
            .sqrt();
        let pair = EigenPair {
            lambda: lam,
            response: frequency_response(lam, sub, cfg),
            residual,
            block_residual,
        };
        if sub == Subspace::F1 {
            f1.push(pair);
        } else {
            f2.push(pair);
        }
    }

    let (full_spectrum, projected_f1_dim, projected_f2_dim) = projected_dimensions(&bl.l)?;
    let mut merged = values.clone();
    merged.sort_by(f64::total_cmp);
    let spectrum_max_diff = merged
        .iter()
        .zip(&full_spectrum)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let max_residual = f1.iter().chain(&f2).map(|p| p.residual).fold(0.0, f64::max);
    let max_block_residual = f1.iter().chain(&f2).map(|p| p.block_residual).fold(0.0, f64::max);
    Ok(SpectralReport {
        n,
        config: *cfg,
        filter_residual: filter_residual(bl, cfg, &spectra),
        lambda1: spectra.lambda1,
        lambda2: spectra.lambda2,
        f1,
        f2,
        full_spectrum,
        spectrum_max_diff,
        max_residual,
        max_block_residual,
        projected_f1_dim,
        projected_f2_dim,
    })
}

/// `lambda,h_f1,h_f2` rows on an even grid over `[0, 2]`.
pub fn response_csv(cfg: &SpectralConfig, points: usize) -> String {
    let mut out = String::from("lambda,h_f1,h_f2\n");
    let steps = points.max(2) - 1;
    for s in 0..=steps {
        let lam = 2.0 * s as f64 / steps as f64;
        writeln!(
            out,
            "{lam},{},{}",
            frequency_response(lam, Subspace::F1, cfg),
            frequency_response(lam, Subspace::F2, cfg)
        )
        .expect("write to string");
    }
    out
}

pub fn write_report(dir: &Path, report: &SpectralReport, extra: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| NsgError::io(dir, e))?;
    let mut value = serde_json::to_value(report).map_err(|e| NsgError::json("spectral report", e))?;
    if let (Some(obj), serde_json::Value::Object(more)) = (value.as_object_mut(), extra) {
        obj.extend(more);
    }
    let text = serde_json::to_string_pretty(&value).map_err(|e| NsgError::json("spectral report", e))?;
    let path = dir.join("report.json");
    fs::write(&path, text).map_err(|e| NsgError::io(&path, e))?;
    let path = dir.join("response.csv");
    fs::write(&path, response_csv(&report.config, 41)).map_err(|e| NsgError::io(&path, e))
}
