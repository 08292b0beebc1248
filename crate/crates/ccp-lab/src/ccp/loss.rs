use super::{CcpError, Result};
use crate::num::{Tape, Tensor, Var};

const NORM_TOL: f64 = 1e-6;
/// Additive mask that zeroes a softmax slot exactly: exp(x − max − 1e30)
/// underflows to 0.0 for any finite score.
const EXCLUDE: f64 = -1e30;

/// Symmetric binary matrix pairing anchors with their positives; the
/// diagonal is zero (an anchor is never its own candidate).
#[derive(Debug, Clone, PartialEq)]
pub struct PositiveMask {
    size: usize,
    m: Vec<f64>,
}

impl PositiveMask {
    /// The training layout: rows `[centers; contexts]`, row `i` paired with
    /// row `n + i` and symmetrically. No other positives.
    pub fn column_pairs(n: usize) -> Self {
        let size = 2 * n;
        let mut m = vec![0.0; size * size];
        for i in 0..n {
            m[i * size + n + i] = 1.0;
            m[(n + i) * size + i] = 1.0;
        }
        PositiveMask { size, m }
    }

    /// Arbitrary pairing for tests and ablations; `pairs` are unordered.
    pub fn from_pairs(size: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut m = vec![0.0; size * size];
        for &(a, b) in pairs {
            if a >= size || b >= size {
                return Err(CcpError::BadMask(format!(
                    "pair ({a},{b}) outside mask of size {size}"
                )));
            }
            if a == b {
                return Err(CcpError::BadMask(format!("self-pair ({a},{a})")));
            }
            m[a * size + b] = 1.0;
            m[b * size + a] = 1.0;
        }
        Ok(PositiveMask { size, m })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Number of (anchor, positive) ordered entries.
    pub fn positive_count(&self) -> usize {
        self.m.iter().filter(|v| **v == 1.0).count()
    }

    pub fn validate(&self) -> Result<()> {
        for c in 0..self.size {
            if self.m[c * self.size + c] != 0.0 {
                return Err(CcpError::BadMask(format!("nonzero diagonal at {c}")));
            }
            for i in 0..self.size {
                if self.m[c * self.size + i] != self.m[i * self.size + c] {
                    return Err(CcpError::BadMask(format!("asymmetric at ({c},{i})")));
                }
            }
        }
        Ok(())
    }

    fn as_tensor(&self) -> Tensor {
        Tensor::new(vec![self.size, self.size], self.m.clone()).unwrap()
    }
}

/// The windowed contrastive loss over one batch of `2N` anchor rows.
///
/// For every anchor `c` and positive `i` the per-pair term is
/// `−log( exp(s(c,i)/τ) / Σ_{k≠c} exp(s(c,k)/τ) )` where `k` ranges over
/// the other in-batch rows plus the bank rows for the anchor's language,
/// and `s` is the dot product (equal to cosine when rows are unit-norm).
/// The result is the mean over positive pairs; multiply by
/// [`PositiveMask::positive_count`] to recover the raw sum. Bank rows are
/// constants: their gradient is identically zero.
pub fn ccp_loss(
    tape: &mut Tape,
    z: Var,
    mask: &PositiveMask,
    bank_negatives: &Tensor,
    temperature: f64,
    require_normalized: bool,
) -> Result<Var> {
    if temperature <= 0.0 {
        return Err(CcpError::BadTemperature(temperature));
    }
    mask.validate()?;
    let rows = tape.value(z).rows();
    if rows != mask.size() {
        return Err(CcpError::BadMask(format!(
            "mask of size {} against {rows} anchor rows",
            mask.size()
        )));
    }
    if require_normalized {
        for (r, row) in (0..rows).map(|r| (r, tape.value(z).row(r))) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > NORM_TOL {
                return Err(CcpError::NotNormalized {
                    row: r,
                    deviation: (norm - 1.0).abs(),
                });
            }
        }
    }

    let sim = tape.matmul_nt(z, z);
    let scaled = tape.scale(sim, 1.0 / temperature);

    // Exclude the anchor itself from its own denominator.
    let mut diag = Tensor::zeros(vec![rows, rows]);
    for c in 0..rows {
        diag.data_mut()[c * rows + c] = EXCLUDE;
    }
    let diag_leaf = tape.leaf(diag, false);
    let in_batch = tape.add(scaled, diag_leaf);

    let candidates = if bank_negatives.rows() > 0 {
        let bank_leaf = tape.leaf(bank_negatives.clone(), false);
        let bank_sim = tape.matmul_nt(z, bank_leaf);
        let bank_scaled = tape.scale(bank_sim, 1.0 / temperature);
        tape.concat_cols(in_batch, bank_scaled)
    } else {
        in_batch
    };

    let lse = tape.row_logsumexp(candidates);
    // term(c, i) = lse[c] − s(c,i)/τ, kept only where the mask is 1
    let terms = tape.col_minus(lse, in_batch);
    let mask_leaf = tape.leaf(mask.as_tensor(), false);
    let picked = tape.mul(terms, mask_leaf);
    let total = tape.sum_all(picked);
    Ok(tape.scale(total, 1.0 / mask.positive_count() as f64))
}

/// InfoNCE lower bound on the mutual information between an anchor and its
/// context, in nats: `max(0, ln K − mean per-positive loss)` for `K`
/// candidates per anchor. At chance level (`loss = ln K`) the bound is 0.
pub fn mi_lower_bound(mean_per_positive_loss: f64, k_candidates: usize) -> f64 {
    debug_assert!(k_candidates >= 1);
    ((k_candidates as f64).ln() - mean_per_positive_loss).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_of(
        rows: &[Vec<f64>],
        mask: &PositiveMask,
        bank: &Tensor,
        tau: f64,
        normalized: bool,
    ) -> f64 {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::from_rows(rows).unwrap(), true);
        let l = ccp_loss(&mut tape, z, mask, bank, tau, normalized).unwrap();
        tape.value(l).data()[0]
    }

    #[test]
    fn sole_candidate_positive_gives_zero_loss() {
        // N = 1, empty bank: the positive is the only denominator entry.
        let mask = PositiveMask::column_pairs(1);
        let bank = Tensor::zeros(vec![0, 2]);
        let loss = loss_of(
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &mask,
            &bank,
            0.5,
            true,
        );
        assert!(loss.abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn four_identical_vectors_give_ln3_per_term() {
        let mask = PositiveMask::from_pairs(4, &[(0, 1), (2, 3)]).unwrap();
        let bank = Tensor::zeros(vec![0, 2]);
        let row = vec![1.0, 0.0];
        let loss = loss_of(
            &[row.clone(), row.clone(), row.clone(), row],
            &mask,
            &bank,
            0.1,
            true,
        );
        // Mean over the 4 positive entries; every term is ln 3. The raw sum
        // of Algorithm-style terms is 4·ln 3, recovered by multiplication.
        assert!((loss - 3.0f64.ln()).abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn bank_negative_closed_form() {
        // 2N = 2, cos(z1,z2) = 1, one orthogonal bank vector, τ = 0.1:
        // each term is ln(1 + e^{-10}) ≈ 4.54e-5.
        let mask = PositiveMask::column_pairs(1);
        let bank = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let loss = loss_of(
            &[vec![1.0, 0.0], vec![1.0, 0.0]],
            &mask,
            &bank,
            0.1,
            true,
        );
        let expected = (1.0 + (-10.0f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-9, "loss {loss} vs {expected}");
        assert!((loss - 4.539889921686465e-5).abs() < 1e-9);
    }

    #[test]
    fn equal_similarities_give_ln_candidate_count() {
        // positive similarity == all negative similarities ⇒ term = ln(#candidates)
        for n in [2usize, 3, 5] {
            let mask = PositiveMask::column_pairs(n);
            let bank = Tensor::zeros(vec![0, 2]);
            let rows: Vec<Vec<f64>> = (0..2 * n).map(|_| vec![1.0, 0.0]).collect();
            let loss = loss_of(&rows, &mask, &bank, 0.3, true);
            let k = 2 * n - 1;
            assert!(
                (loss - (k as f64).ln()).abs() < 1e-9,
                "n={n}: loss {loss} vs ln {k}"
            );
        }
    }

    #[test]
    fn anchors_receive_gradient_while_bank_stays_constant() {
        // The bank enters the tape as a no-grad leaf, so backward never
        // produces a gradient for it; the anchors must still get one.
        let mask = PositiveMask::column_pairs(1);
        let bank = Tensor::from_rows(&[vec![0.6, 0.8]]).unwrap();
        let bank_before = bank.clone();
        let mut tape = Tape::new();
        let z = tape.leaf(
            Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            true,
        );
        let l = ccp_loss(&mut tape, z, &mask, &bank, 0.2, true).unwrap();
        tape.backward(l).unwrap();
        let zg = tape.grad(z);
        assert!(zg.data().iter().any(|g| g.abs() > 1e-9));
        assert_eq!(bank.data(), bank_before.data());
    }

    #[test]
    fn scale_invariance_under_l2_normalization() {
        // Scaling a pre-normalization row by any positive constant leaves
        // the loss unchanged once rows pass through l2 normalization.
        let mask = PositiveMask::column_pairs(2);
        let bank = Tensor::zeros(vec![0, 3]);
        let base = vec![
            vec![0.3, -0.2, 0.9],
            vec![-0.5, 0.1, 0.4],
            vec![0.2, 0.8, -0.1],
            vec![0.7, 0.3, 0.3],
        ];
        let loss_at = |scale: f64| {
            let mut rows = base.clone();
            for v in rows[1].iter_mut() {
                *v *= scale;
            }
            let mut tape = Tape::new();
            let raw = tape.leaf(Tensor::from_rows(&rows).unwrap(), true);
            let z = tape.l2_normalize_rows(raw).unwrap();
            let l = ccp_loss(&mut tape, z, &mask, &bank, 0.15, true).unwrap();
            tape.value(l).data()[0]
        };
        let a = loss_at(1.0);
        for s in [0.01, 3.0, 250.0] {
            assert!((loss_at(s) - a).abs() < 1e-10);
        }
    }

    #[test]
    fn loss_is_monotone_in_the_right_directions() {
        // Raising the positive similarity lowers the loss; raising a
        // negative similarity raises it.
        let mask = PositiveMask::column_pairs(1);
        let loss_at = |pos_cos: f64, neg_cos: f64| {
            // anchor e1; the positive makes the requested cosine with the
            // anchor; the single bank negative does likewise.
            let pos = vec![pos_cos, (1.0 - pos_cos * pos_cos).sqrt(), 0.0];
            let rows = vec![vec![1.0, 0.0, 0.0], pos];
            let neg = vec![neg_cos, 0.0, (1.0 - neg_cos * neg_cos).sqrt()];
            let bank = Tensor::from_rows(&[neg]).unwrap();
            let mut tape = Tape::new();
            let z = tape.leaf(Tensor::from_rows(&rows).unwrap(), true);
            let l = ccp_loss(&mut tape, z, &mask, &bank, 0.2, true).unwrap();
            tape.value(l).data()[0]
        };
        assert!(loss_at(0.9, 0.0) < loss_at(0.5, 0.0));
        assert!(loss_at(0.2, 0.0) < loss_at(0.1, 0.0));
        // and strictly increasing in the negative's similarity
        assert!(loss_at(0.5, 0.4) > loss_at(0.5, 0.1));
    }

    #[test]
    fn temperature_and_normalization_errors() {
        let mask = PositiveMask::column_pairs(1);
        let bank = Tensor::zeros(vec![0, 2]);
        let mut tape = Tape::new();
        let z = tape.leaf(
            Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            true,
        );
        assert!(matches!(
            ccp_loss(&mut tape, z, &mask, &bank, 0.0, true),
            Err(CcpError::BadTemperature(_))
        ));
        let z2 = tape.leaf(
            Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            true,
        );
        assert!(matches!(
            ccp_loss(&mut tape, z2, &mask, &bank, 0.1, true),
            Err(CcpError::NotNormalized { row: 0, .. })
        ));
        // Without the flag, unnormalized rows are accepted (raw dot scoring).
        assert!(ccp_loss(&mut tape, z2, &mask, &bank, 0.1, false).is_ok());
    }

    #[test]
    fn mi_bound_examples() {
        assert!((mi_lower_bound(0.0, 4096) - (4096.0f64).ln()).abs() < 1e-12);
        assert_eq!(mi_lower_bound((64.0f64).ln(), 64), 0.0);
        assert_eq!(mi_lower_bound(10.0, 3), 0.0); // clamped
    }

    #[test]
    fn mask_validation() {
        assert!(PositiveMask::from_pairs(4, &[(0, 0)]).is_err());
        assert!(PositiveMask::from_pairs(4, &[(0, 7)]).is_err());
        let m = PositiveMask::column_pairs(3);
        m.validate().unwrap();
        assert_eq!(m.positive_count(), 6);
    }
}
