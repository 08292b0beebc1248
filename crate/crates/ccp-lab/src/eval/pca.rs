use super::{EvalError, Result};
use crate::num::Tensor;
use nalgebra::DMatrix;

/// Mean-centered projection onto the leading principal directions.
#[derive(Debug, Clone)]
pub struct PcaProjection {
    /// `[n, out_dim]` coordinates.
    pub coords: Tensor,
    /// `[dim, out_dim]` component directions, one per column.
    pub components: Tensor,
    /// Eigenvalues of the covariance for the kept components, descending.
    pub eigenvalues: Vec<f64>,
    /// All eigenvalues, descending, for explained-variance ratios.
    pub spectrum: Vec<f64>,
    pub mean: Vec<f64>,
}

impl PcaProjection {
    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        let total: f64 = self.spectrum.iter().sum();
        self.eigenvalues.iter().map(|v| v / total).collect()
    }
}

/// PCA via eigen-decomposition of the covariance matrix. The sign
/// convention makes the largest-magnitude loading of each component
/// positive (ties to the lowest index). Errors when the covariance rank is
/// below `out_dim`.
pub fn pca_project(x: &Tensor, out_dim: usize) -> Result<PcaProjection> {
    let (n, d) = (x.rows(), x.cols());
    if n < out_dim {
        return Err(EvalError::TooFewRows { need: out_dim, got: n });
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += x.row(i)[j];
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut centered = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            centered[i * d + j] = x.row(i)[j] - mean[j];
        }
    }
    let cov_data = crate::num::matmul_tn(&centered, &centered, n, d, d);
    let cov = DMatrix::from_row_slice(d, d, &cov_data) / n as f64;
    let eig = cov.symmetric_eigen();

    // Sort descending by eigenvalue, deterministically.
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let spectrum: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();

    let max_ev = spectrum.first().cloned().unwrap_or(0.0).max(0.0);
    let rank = spectrum.iter().filter(|v| **v > max_ev * 1e-12 && **v > 1e-300).count();
    if rank < out_dim {
        return Err(EvalError::DegenerateCovariance { rank, want: out_dim });
    }

    let mut components = vec![0.0; d * out_dim];
    for (c, &src) in order.iter().take(out_dim).enumerate() {
        let col = eig.eigenvectors.column(src);
        // sign convention: largest-|loading| entry positive
        let mut best = 0usize;
        for i in 1..d {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        let flip = if col[best] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            components[i * out_dim + c] = col[i] * flip;
        }
    }

    let coords_data = crate::num::matmul(&centered, &components, n, d, out_dim);
    Ok(PcaProjection {
        coords: Tensor::new(vec![n, out_dim], coords_data).unwrap(),
        components: Tensor::new(vec![d, out_dim], components).unwrap(),
        eigenvalues: spectrum.iter().take(out_dim).cloned().collect(),
        spectrum,
        mean,
    })
}
