use super::{CalibrationError, Result};
use crate::num::Tensor;

/// Mutual-nearest-neighbor pairs under CSLS, with their adjusted scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    pub pairs: Vec<(usize, usize)>,
    pub scores: Vec<f64>,
}

impl Dictionary {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn mean_top_k(values: impl Iterator<Item = f64>, k: usize) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
    v.iter().take(k).sum::<f64>() / k as f64
}

/// Cross-domain similarity local scaling of a similarity matrix:
/// `csls(i,j) = 2·sim(i,j) − r_T(i) − r_S(j)` where `r_T(i)` is the mean of
/// row `i`'s top-k entries and `r_S(j)` of column `j`'s.
pub fn csls_scores(sim: &Tensor, k: usize) -> Result<Tensor> {
    let (n, m) = (sim.rows(), sim.cols());
    if k < 1 || k > n.min(m) {
        return Err(CalibrationError::BadK { k, max: n.min(m) });
    }
    let r_t: Vec<f64> = (0..n)
        .map(|i| mean_top_k(sim.row(i).iter().cloned(), k))
        .collect();
    let r_s: Vec<f64> = (0..m)
        .map(|j| mean_top_k((0..n).map(|i| sim.data()[i * m + j]), k))
        .collect();
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = 2.0 * sim.data()[i * m + j] - r_t[i] - r_s[j];
        }
    }
    Ok(Tensor::new(vec![n, m], out).unwrap())
}

fn argmax_tie_lowest(values: impl Iterator<Item = f64>) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut best_idx = 0;
    for (i, v) in values.enumerate() {
        if v > best {
            best = v;
            best_idx = i;
        }
    }
    best_idx
}

const NORM_TOL: f64 = 1e-6;

fn check_normalized(x: &Tensor) -> Result<()> {
    for r in 0..x.rows() {
        let norm = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(CalibrationError::NotNormalized(r));
        }
    }
    Ok(())
}

/// Pairs `(i, j)` that are mutual argmax under CSLS over the cosine matrix
/// of the row-normalized inputs; ties break to the lowest index. An empty
/// result is an error (more data or seed pairs needed).
pub fn build_dictionary(xw: &Tensor, y: &Tensor, k: usize) -> Result<Dictionary> {
    check_normalized(xw)?;
    check_normalized(y)?;
    let sim_data = crate::num::matmul_nt(xw.data(), y.data(), xw.rows(), xw.cols(), y.rows());
    let sim = Tensor::new(vec![xw.rows(), y.rows()], sim_data).unwrap();
    let adjusted = csls_scores(&sim, k)?;
    let (n, m) = (adjusted.rows(), adjusted.cols());

    let fwd: Vec<usize> = (0..n)
        .map(|i| argmax_tie_lowest(adjusted.row(i).iter().cloned()))
        .collect();
    let bwd: Vec<usize> = (0..m)
        .map(|j| argmax_tie_lowest((0..n).map(|i| adjusted.data()[i * m + j])))
        .collect();

    let mut pairs = Vec::new();
    let mut scores = Vec::new();
    for i in 0..n {
        let j = fwd[i];
        if bwd[j] == i {
            pairs.push((i, j));
            scores.push(adjusted.data()[i * m + j]);
        }
    }
    if pairs.is_empty() {
        return Err(CalibrationError::EmptyDictionary);
    }
    Ok(Dictionary { pairs, scores })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csls_hand_example() {
        // sim = [[0.9, 0.1], [0.2, 0.8]], k = 1
        let sim = Tensor::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        let c = csls_scores(&sim, 1).unwrap();
        // csls(0,0) = 2·0.9 − 0.9 − 0.9 = 0.0
        assert!((c.data()[0] - 0.0).abs() < 1e-12);
        // csls(0,1) = 2·0.1 − 0.9 − 0.8 = −1.5
        assert!((c.data()[1] + 1.5).abs() < 1e-12);
    }

    #[test]
    fn constant_similarity_cancels_to_zero() {
        let sim = Tensor::full(vec![3, 3], 0.42);
        let c = csls_scores(&sim, 2).unwrap();
        for v in c.data() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn k_equal_to_m_uses_the_full_row_mean() {
        let sim = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap();
        let c = csls_scores(&sim, 2).unwrap();
        // r_T(0) = 0.5, r_T(1) = 0.5, r_S(0) = 0.75, r_S(1) = 0.25
        assert!((c.data()[0] - (2.0 - 0.5 - 0.75)).abs() < 1e-12);
        assert!(csls_scores(&sim, 3).is_err());
        assert!(csls_scores(&sim, 0).is_err());
    }

    #[test]
    fn identical_clouds_give_the_identity_pairing() {
        let x = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let d = build_dictionary(&x, &x, 2).unwrap();
        assert_eq!(d.pairs, vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn example_matrix_pairs_match() {
        // Rows engineered so the cosine matrix is [[0.9, ...],[...]]-like:
        // use orthonormal-ish vectors whose dots reproduce the example.
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let y = Tensor::from_rows(&[
            vec![0.9, (1.0f64 - 0.81).sqrt()],
            vec![0.1, (1.0f64 - 0.01).sqrt()],
        ])
        .unwrap();
        let d = build_dictionary(&x, &y, 1).unwrap();
        assert!(d.pairs.contains(&(0, 0)));
    }

    #[test]
    fn unnormalized_inputs_are_rejected() {
        let x = Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap();
        let y = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(matches!(
            build_dictionary(&x, &y, 1),
            Err(CalibrationError::NotNormalized(0))
        ));
    }
}
