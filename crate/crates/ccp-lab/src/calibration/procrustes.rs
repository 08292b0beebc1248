use super::{CalibrationError, Result};
use crate::num::{matmul_tn, Tensor};
use nalgebra::DMatrix;

/// Orthogonal map carrying `src`-space row vectors into `dst` space:
/// `y ≈ x · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationMap {
    pub src: String,
    pub dst: String,
    pub matrix: Tensor,
}

impl RotationMap {
    pub fn identity(src: &str, dst: &str, dim: usize) -> Self {
        let mut matrix = Tensor::zeros(vec![dim, dim]);
        for i in 0..dim {
            matrix.data_mut()[i * dim + i] = 1.0;
        }
        RotationMap {
            src: src.to_string(),
            dst: dst.to_string(),
            matrix,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let m = self.matrix.data();
        let mut out = vec![0.0; d];
        for (i, &xi) in x.iter().enumerate() {
            let row = &m[i * d..(i + 1) * d];
            for (o, w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
        out
    }

    /// Rotate every row of a matrix.
    pub fn apply_rows(&self, x: &Tensor) -> Tensor {
        let d = self.dim();
        let data = crate::num::matmul(x.data(), self.matrix.data(), x.rows(), d, d);
        Tensor::new(vec![x.rows(), d], data).unwrap()
    }

    /// `‖WᵀW − I‖_F`.
    pub fn orthogonality_error(&self) -> f64 {
        let d = self.dim();
        let wtw = matmul_tn(self.matrix.data(), self.matrix.data(), d, d, d);
        let mut sum = 0.0;
        for i in 0..d {
            for j in 0..d {
                let target = if i == j { 1.0 } else { 0.0 };
                let diff = wtw[i * d + j] - target;
                sum += diff * diff;
            }
        }
        sum.sqrt()
    }
}

/// The orthogonal minimizer of `‖X·W − Y‖_F` over aligned row pairs:
/// `W = U·Vᵀ` from the singular decomposition `XᵀY = U·S·Vᵀ`. No
/// reflection constraint, so `det(W)` may be ±1. Row counts below the
/// dimension and rank-deficient cross-covariances are warned about but
/// still solved.
pub fn procrustes(src: &str, dst: &str, x: &Tensor, y: &Tensor) -> Result<RotationMap> {
    let (n, d) = (x.rows(), x.cols());
    if y.rows() != n || y.cols() != d {
        return Err(CalibrationError::DimMismatch {
            expected: d,
            got: y.cols(),
        });
    }
    if n < d {
        log::warn!("procrustes on {n} pairs in {d} dimensions is under-determined");
    }
    let m = matmul_tn(x.data(), y.data(), n, d, d);
    let m = DMatrix::from_row_slice(d, d, &m);
    let svd = m.svd(true, true);
    let u = svd.u.as_ref().expect("svd with u");
    let v_t = svd.v_t.as_ref().expect("svd with v_t");

    let max_sv = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let rank = svd
        .singular_values
        .iter()
        .filter(|s| **s > max_sv * 1e-12)
        .count();
    if rank < d {
        log::warn!("cross-covariance is rank-deficient ({rank} < {d}); rotation is not unique");
    }

    let w = u * v_t;
    let mut data = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            data[i * d + j] = w[(i, j)];
        }
    }
    Ok(RotationMap {
        src: src.to_string(),
        dst: dst.to_string(),
        matrix: Tensor::new(vec![d, d], data).unwrap(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    pub(crate) fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Tensor {
        let g = DMatrix::<f64>::from_fn(d, d, |_, _| rng.sample(StandardNormal));
        let qr = g.qr();
        let mut q = qr.q();
        let r = qr.r();
        for j in 0..d {
            if r[(j, j)] < 0.0 {
                for i in 0..d {
                    q[(i, j)] = -q[(i, j)];
                }
            }
        }
        let mut data = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                data[i * d + j] = q[(i, j)];
            }
        }
        Tensor::new(vec![d, d], data).unwrap()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        let data: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
        Tensor::new(vec![n, d], data).unwrap()
    }

    fn frob_diff(a: &Tensor, b: &Tensor) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn exact_recovery_of_a_random_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let r = random_orthogonal(&mut rng, 8);
        let x = random_matrix(&mut rng, 50, 8);
        let y = {
            let data = crate::num::matmul(x.data(), r.data(), 50, 8, 8);
            Tensor::new(vec![50, 8], data).unwrap()
        };
        let w = procrustes("a", "b", &x, &y).unwrap();
        assert!(frob_diff(&w.matrix, &r) <= 1e-6, "{}", frob_diff(&w.matrix, &r));
        assert!(w.orthogonality_error() <= 1e-8);
    }

    #[test]
    fn identity_when_targets_equal_sources() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_matrix(&mut rng, 30, 5);
        let w = procrustes("a", "b", &x, &x).unwrap();
        let eye = RotationMap::identity("a", "b", 5);
        assert!(frob_diff(&w.matrix, &eye.matrix) <= 1e-10);
    }

    #[test]
    fn noisy_recovery_stays_close() {
        // Monte-Carlo oracle: tiny observation noise perturbs the recovered
        // rotation only slightly.
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let r = random_orthogonal(&mut rng, 8);
            let x = random_matrix(&mut rng, 50, 8);
            let mut y = {
                let data = crate::num::matmul(x.data(), r.data(), 50, 8, 8);
                Tensor::new(vec![50, 8], data).unwrap()
            };
            for v in y.data_mut() {
                let n: f64 = rng.sample(StandardNormal);
                *v += 1e-3 * n;
            }
            let w = procrustes("a", "b", &x, &y).unwrap();
            assert!(frob_diff(&w.matrix, &r) <= 1e-2);
        }
    }

    #[test]
    fn rotation_preserves_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let r = random_orthogonal(&mut rng, 6);
        let map = RotationMap {
            src: "a".into(),
            dst: "b".into(),
            matrix: r,
        };
        for _ in 0..20 {
            let x: Vec<f64> = (0..6).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let y = map.apply(&x);
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((nx - ny).abs() <= 1e-10);
        }
    }

    #[test]
    fn optimality_against_random_orthogonal_candidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random_matrix(&mut rng, 40, 6);
        let y = random_matrix(&mut rng, 40, 6);
        let w = procrustes("a", "b", &x, &y).unwrap();
        let residual = |m: &Tensor| {
            let xr = crate::num::matmul(x.data(), m.data(), 40, 6, 6);
            xr.iter()
                .zip(y.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        let best = residual(&w.matrix);
        for _ in 0..200 {
            let q = random_orthogonal(&mut rng, 6);
            assert!(best <= residual(&q) + 1e-9);
        }
    }
}
