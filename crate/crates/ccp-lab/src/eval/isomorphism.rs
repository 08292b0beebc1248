use super::{EvalError, Result};
use crate::calibration::procrustes;
use crate::num::Tensor;
use serde::{Deserialize, Serialize};

/// Quantifies "different region, similar structure" for two aligned
/// clouds: how correlated their internal cosine geometries are, how well a
/// single rotation maps one onto the other, and how far apart their means
/// sit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IsomorphismReport {
    pub lang_a: String,
    pub lang_b: String,
    /// Pearson correlation of the two within-cloud cosine matrices over the
    /// strict upper triangle.
    pub similarity_pearson: f64,
    /// `‖XW − Y‖_F / ‖Y‖_F` for the best orthogonal `W` on aligned pairs.
    pub procrustes_residual: f64,
    /// `‖mean(X) − mean(Y)‖` before any shifting.
    pub mean_offset_norm: f64,
    pub num_pairs: usize,
}

fn upper_triangle_cosines(x: &Tensor) -> Result<Vec<f64>> {
    let n = x.rows();
    let xn = x.l2_normalize_rows().map_err(|e| match e {
        crate::num::NumError::ZeroRow { row } => EvalError::ZeroRow(row),
        other => EvalError::BadFile(other.to_string()),
    })?;
    let sim = crate::num::matmul_nt(xn.data(), xn.data(), n, x.cols(), n);
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            out.push(sim[i * n + j]);
        }
    }
    Ok(out)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// Pearson correlation between the upper-triangle entries of the two
/// within-cloud cosine matrices of row-aligned clouds.
pub fn similarity_correlation(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(EvalError::RowMismatch {
            a: x.rows(),
            b: y.rows(),
        });
    }
    if x.rows() < 3 {
        return Err(EvalError::TooFewRows {
            need: 3,
            got: x.rows(),
        });
    }
    let ca = upper_triangle_cosines(x)?;
    let cb = upper_triangle_cosines(y)?;
    Ok(pearson(&ca, &cb))
}

impl IsomorphismReport {
    pub fn compute(lang_a: &str, lang_b: &str, x: &Tensor, y: &Tensor) -> Result<Self> {
        let r = similarity_correlation(x, y)?;
        let w = procrustes(lang_a, lang_b, x, y)
            .map_err(|e| EvalError::BadFile(e.to_string()))?;
        let xw = w.apply_rows(x);
        let mut num = 0.0;
        let mut den = 0.0;
        for (a, b) in xw.data().iter().zip(y.data()) {
            num += (a - b) * (a - b);
            den += b * b;
        }
        let residual = if den == 0.0 { 0.0 } else { (num / den).sqrt() };

        let d = x.cols();
        let mut mean_x = vec![0.0; d];
        let mut mean_y = vec![0.0; d];
        for i in 0..x.rows() {
            for j in 0..d {
                mean_x[j] += x.row(i)[j];
                mean_y[j] += y.row(i)[j];
            }
        }
        let n = x.rows() as f64;
        let offset: f64 = (0..d)
            .map(|j| {
                let diff = mean_x[j] / n - mean_y[j] / n;
                diff * diff
            })
            .sum::<f64>()
            .sqrt();

        Ok(IsomorphismReport {
            lang_a: lang_a.to_string(),
            lang_b: lang_b.to_string(),
            similarity_pearson: r,
            procrustes_residual: residual,
            mean_offset_norm: offset,
            num_pairs: x.rows(),
        })
    }
}
