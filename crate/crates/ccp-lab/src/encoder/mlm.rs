use super::model::{forward_hidden, pack, EncoderVars};
use super::{EncoderConfig, EncoderError, Result, MASK_ID};
use crate::num::{Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Loss node plus how many positions were masked to produce it.
pub struct MlmOutcome {
    pub loss: Var,
    pub masked_positions: usize,
}

/// Masked-language-model loss: every real token is masked independently
/// with `mask_prob`, replaced by the reserved mask id, and predicted from
/// its final hidden state through the linear vocabulary head. The loss is
/// the mean cross-entropy over masked positions.
///
/// If the sampling round masks nothing, it is retried once; a second miss
/// force-masks one uniformly chosen position.
pub fn mlm_loss(
    tape: &mut Tape,
    vars: &EncoderVars,
    config: &EncoderConfig,
    batch: &[&[usize]],
    mask_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<MlmOutcome> {
    if !(0.0 < mask_prob && mask_prob < 1.0) {
        return Err(EncoderError::InvalidConfig(format!(
            "mask_prob must lie in (0,1), got {mask_prob}"
        )));
    }
    let mut packed = pack(config, batch)?;
    if packed.token_positions.is_empty() {
        return Err(EncoderError::InvalidConfig(
            "batch has no maskable tokens".into(),
        ));
    }

    let mut masked: Vec<(usize, usize)> = Vec::new(); // (flat position, original id)
    for _attempt in 0..2 {
        for &pos in &packed.token_positions {
            if rng.gen_bool(mask_prob) {
                masked.push((pos, packed.ids[pos]));
            }
        }
        if !masked.is_empty() {
            break;
        }
    }
    if masked.is_empty() {
        let pos = packed.token_positions[rng.gen_range(0..packed.token_positions.len())];
        masked.push((pos, packed.ids[pos]));
    }
    for &(pos, _) in &masked {
        packed.ids[pos] = MASK_ID;
    }

    let hidden = forward_hidden(tape, vars, config, &packed)?;
    let positions: Vec<usize> = masked.iter().map(|(p, _)| *p).collect();
    let targets: Vec<usize> = masked.iter().map(|(_, id)| *id).collect();
    let states = tape.gather_rows(hidden, &positions);
    let logits0 = tape.matmul(states, vars.mlm_w);
    let logits = tape.add_row_vec(logits0, vars.mlm_b);
    let loss = tape.softmax_cross_entropy(logits, &targets)?;
    Ok(MlmOutcome {
        loss,
        masked_positions: masked.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderParams;
    use crate::num::Tensor;
    use rand_chacha::rand_core::SeedableRng;

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 16,
            model_dim: 8,
            num_layers: 1,
            num_heads: 2,
            max_seq_len: 8,
            feedforward_dim: 12,
            dropout_rate: 0.0,
            mlm_mask_prob: 0.3,
        }
    }

    #[test]
    fn zero_logit_head_gives_log_vocab_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = EncoderParams::init(&tiny_config(), &mut rng).unwrap();
        p.mlm_w = Tensor::zeros(vec![8, 16]);
        p.mlm_b = Tensor::zeros(vec![16]);
        let mut tape = Tape::new();
        let vars = p.leaf(&mut tape);
        let out = mlm_loss(&mut tape, &vars, &p.config, &[&[3, 4, 5], &[6, 7]], 0.4, &mut rng)
            .unwrap();
        let got = tape.value(out.loss).data()[0];
        assert!((got - (16.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn masked_count_matches_probability() {
        // Monte-Carlo oracle: across many trials the masked fraction should
        // land within 3σ of mask_prob.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = EncoderParams::init(&tiny_config(), &mut rng).unwrap();
        let prob = 0.15;
        // A long batch keeps the resample-on-empty path dormant
        // (P(no mask) = 0.85^56 ≈ 1e-4), so counts follow the binomial law.
        let sentence = [3usize, 4, 5, 6, 7, 8, 9];
        let batch: Vec<&[usize]> = (0..8).map(|_| &sentence[..]).collect();
        let tokens_per_batch = 56.0;
        let trials = 300;
        let mut total_masked = 0usize;
        for _ in 0..trials {
            let mut tape = Tape::new();
            let vars = p.leaf(&mut tape);
            let out = mlm_loss(&mut tape, &vars, &p.config, &batch, prob, &mut rng).unwrap();
            total_masked += out.masked_positions;
        }
        let n = trials as f64 * tokens_per_batch;
        let freq = total_masked as f64 / n;
        let sigma = (prob * (1.0 - prob) / n).sqrt();
        assert!(
            (freq - prob).abs() <= 3.0 * sigma,
            "masked fraction {freq} outside {prob} ± {}",
            3.0 * sigma
        );
    }

    #[test]
    fn no_maskable_tokens_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = EncoderParams::init(&tiny_config(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let vars = p.leaf(&mut tape);
        let empty: Vec<&[usize]> = vec![&[]];
        assert!(mlm_loss(&mut tape, &vars, &p.config, &empty, 0.3, &mut rng).is_err());
    }

    #[test]
    fn tiny_probability_still_masks_at_least_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = EncoderParams::init(&tiny_config(), &mut rng).unwrap();
        for _ in 0..50 {
            let mut tape = Tape::new();
            let vars = p.leaf(&mut tape);
            let out = mlm_loss(&mut tape, &vars, &p.config, &[&[3]], 1e-9, &mut rng).unwrap();
            assert!(tape.value(out.loss).data()[0].is_finite());
            assert_eq!(out.masked_positions, 1);
        }
    }
}
