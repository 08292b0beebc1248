use super::head::{asymmetric_forward, ProjectionHead};
use super::loss::{ccp_loss, mi_lower_bound, PositiveMask};
use super::{CCPConfig, CcpError, MemoryBank, Result};
use crate::corpus::{sample_pair_batch, Document};
use crate::encoder::{encode, mlm_loss, EncoderConfig, EncoderParams, TokenMapper};
use crate::num::{Adam, Tape};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepTask {
    Ccp,
    Mlm,
}

/// Per-step diagnostics, one JSON line each in training logs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub task: StepTask,
    pub lang: String,
    pub loss: f64,
    /// Denominator candidates per anchor (in-batch plus bank); 0 for MLM.
    pub k_candidates: usize,
    /// InfoNCE mutual-information lower bound in nats; 0 for MLM.
    pub mi_bound: f64,
    /// Batch-normalization mode flag before this step.
    pub e: u8,
}

/// Owns everything the training loop mutates: encoder and head parameters,
/// optimizer moments, the memory bank, the mode flag, and the RNG stream.
pub struct Trainer {
    pub encoder: EncoderParams,
    pub head: ProjectionHead,
    pub bank: MemoryBank,
    pub opt: Adam,
    pub config: CCPConfig,
    pub mapper: TokenMapper,
    pub mode_flag: u8,
    pub step: u64,
    pub rng: ChaCha8Rng,
    languages: Vec<String>,
}

impl Trainer {
    /// Fresh trainer seeded end to end: parameter initialization consumes
    /// the head of the seed's RNG stream and training continues on it.
    pub fn new(
        encoder_config: &EncoderConfig,
        ccp_config: &CCPConfig,
        languages: &[String],
        per_lang_vocab: usize,
        learning_rate: f64,
        warmup_steps: u64,
        seed: u64,
    ) -> Result<Self> {
        ccp_config.validate()?;
        let mapper = TokenMapper::new(languages, per_lang_vocab);
        if encoder_config.vocab_size < mapper.required_vocab() {
            return Err(CcpError::InvalidConfig(format!(
                "encoder vocab_size {} cannot hold {} languages × {} tokens (+reserved); need ≥ {}",
                encoder_config.vocab_size,
                languages.len(),
                per_lang_vocab,
                mapper.required_vocab()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams::init(encoder_config, &mut rng)?;
        let head = ProjectionHead::init(
            encoder_config.model_dim,
            ccp_config.proj_hidden,
            ccp_config.proj_dim,
            &mut rng,
        );
        let bank = MemoryBank::new(ccp_config.bank_mode, ccp_config.bank_capacity, ccp_config.proj_dim);
        let mut sorted: Vec<String> = languages.to_vec();
        sorted.sort();
        Ok(Trainer {
            encoder,
            head,
            bank,
            opt: Adam::new(learning_rate, warmup_steps),
            config: ccp_config.clone(),
            mapper,
            mode_flag: 0,
            step: 0,
            rng,
            languages: sorted,
        })
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    /// One training step on the language whose turn it is (round-robin).
    ///
    /// A contrastive step encodes both columns, projects them through the
    /// shared head under the configured batch-norm wiring, applies the
    /// windowed InfoNCE loss against in-batch plus bank negatives, updates
    /// all parameters with Adam, pushes the batch's (normalized, detached)
    /// projections into the bank, and flips the mode flag. When MLM is
    /// enabled, a fair coin picks the masked-language-model task instead;
    /// those steps leave the head, bank, and mode flag untouched.
    pub fn train_step(&mut self, corpus: &[Document]) -> Result<StepMetrics> {
        let lang = self.languages[(self.step as usize) % self.languages.len()].clone();
        let run_mlm = self.config.mlm_enabled && self.rng.gen_bool(0.5);
        if run_mlm {
            self.mlm_step(corpus, &lang)
        } else {
            self.ccp_step(corpus, &lang)
        }
    }

    fn sample_tokens(
        &mut self,
        corpus: &[Document],
        lang: &str,
    ) -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
        let batch = sample_pair_batch(
            corpus,
            lang,
            self.config.pairs_per_batch,
            self.config.window,
            &mut self.rng,
        )?;
        let mut centers = Vec::with_capacity(batch.pairs.len());
        let mut contexts = Vec::with_capacity(batch.pairs.len());
        for tokens in batch.center_tokens(corpus) {
            centers.push(self.mapper.map_sentence(lang, tokens)?);
        }
        for tokens in batch.context_tokens(corpus) {
            contexts.push(self.mapper.map_sentence(lang, tokens)?);
        }
        Ok((centers, contexts))
    }

    fn ccp_step(&mut self, corpus: &[Document], lang: &str) -> Result<StepMetrics> {
        let n = self.config.pairs_per_batch;
        let e_before = self.mode_flag;
        let (centers, contexts) = self.sample_tokens(corpus, lang)?;

        let mut tape = Tape::new();
        let enc_vars = self.encoder.leaf(&mut tape);
        let head_vars = self.head.leaf(&mut tape);

        let mut refs: Vec<&[usize]> = Vec::with_capacity(2 * n);
        refs.extend(centers.iter().map(|v| v.as_slice()));
        refs.extend(contexts.iter().map(|v| v.as_slice()));
        let h_all = encode(&mut tape, &enc_vars, &self.encoder.config, &refs)?;
        let idx_c: Vec<usize> = (0..n).collect();
        let idx_i: Vec<usize> = (n..2 * n).collect();
        let h_c = tape.gather_rows(h_all, &idx_c);
        let h_i = tape.gather_rows(h_all, &idx_i);

        let (z_c, z_i, e_next) = asymmetric_forward(
            &mut tape,
            &mut self.head,
            &head_vars,
            h_c,
            h_i,
            e_before,
            &self.config,
        )?;
        let z = tape.concat_rows(z_c, z_i);
        let z = if self.config.l2_normalize {
            tape.l2_normalize_rows(z)?
        } else {
            z
        };

        let negatives = self.bank.negatives(lang);
        let k_candidates = 2 * n - 1 + negatives.rows();
        let mask = PositiveMask::column_pairs(n);
        let loss = ccp_loss(
            &mut tape,
            z,
            &mask,
            &negatives,
            self.config.temperature,
            self.config.l2_normalize,
        )?;

        let loss_val = tape.value(loss).data()[0];
        if !loss_val.is_finite() {
            return Err(CcpError::NonFiniteLoss {
                step: self.step,
                lang: lang.to_string(),
                task: "ccp".into(),
                value: loss_val,
            });
        }
        tape.backward(loss)?;

        let mut grads = self.encoder.grads(&tape, &enc_vars);
        grads.append(&mut self.head.grads(&tape, &head_vars));
        let z_values = tape.value(z).clone();
        self.apply_update(grads, true)?;

        // Both columns enter the bank post-step, detached and unit-norm.
        let push_rows = if self.config.l2_normalize {
            z_values
        } else {
            z_values.l2_normalize_rows()?
        };
        let langs: Vec<&str> = std::iter::repeat(lang).take(2 * n).collect();
        self.bank.push(&push_rows, &langs)?;

        self.mode_flag = e_next;
        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            task: StepTask::Ccp,
            lang: lang.to_string(),
            loss: loss_val,
            k_candidates,
            mi_bound: mi_lower_bound(loss_val, k_candidates),
            e: e_before,
        })
    }

    fn mlm_step(&mut self, corpus: &[Document], lang: &str) -> Result<StepMetrics> {
        let (centers, contexts) = self.sample_tokens(corpus, lang)?;
        let mut tape = Tape::new();
        let enc_vars = self.encoder.leaf(&mut tape);
        let mut refs: Vec<&[usize]> = Vec::new();
        refs.extend(centers.iter().map(|v| v.as_slice()));
        refs.extend(contexts.iter().map(|v| v.as_slice()));
        let out = mlm_loss(
            &mut tape,
            &enc_vars,
            &self.encoder.config,
            &refs,
            self.encoder.config.mlm_mask_prob,
            &mut self.rng,
        )?;
        let loss_val = tape.value(out.loss).data()[0];
        if !loss_val.is_finite() {
            return Err(CcpError::NonFiniteLoss {
                step: self.step,
                lang: lang.to_string(),
                task: "mlm".into(),
                value: loss_val,
            });
        }
        tape.backward(out.loss)?;
        let grads = self.encoder.grads(&tape, &enc_vars);
        self.apply_update(grads, false)?;
        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            task: StepTask::Mlm,
            lang: lang.to_string(),
            loss: loss_val,
            k_candidates: 0,
            mi_bound: 0.0,
            e: self.mode_flag,
        })
    }

    fn apply_update(&mut self, grads: BTreeMap<String, crate::num::Tensor>, with_head: bool) -> Result<()> {
        let mut params = self.encoder.named_mut();
        if with_head {
            params.extend(self.head.named_mut());
        }
        self.opt.step(&mut params, &grads)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, SyntheticSpec};

    fn tiny_world() -> (Vec<Document>, Trainer) {
        let spec = SyntheticSpec {
            languages: vec!["en".into(), "fr".into()],
            latent_dim: 4,
            walk_correlation: 0.6,
            docs_per_language: 6,
            heldout_docs_per_language: 0,
            sentences_per_doc: 6,
            vocab_size: 8,
            noise_std: 0.05,
            seed: 5,
        };
        let (corpus, _, _, _) = generate_synthetic_corpus(&spec).unwrap();
        let enc = EncoderConfig {
            vocab_size: 32,
            model_dim: 8,
            num_layers: 1,
            num_heads: 2,
            max_seq_len: 6,
            feedforward_dim: 12,
            dropout_rate: 0.0,
            mlm_mask_prob: 0.15,
        };
        let ccp = CCPConfig {
            pairs_per_batch: 4,
            bank_capacity: 16,
            proj_hidden: 8,
            proj_dim: 6,
            ..CCPConfig::default()
        };
        let trainer =
            Trainer::new(&enc, &ccp, &spec.languages, spec.vocab_size, 1e-3, 0, 42).unwrap();
        (corpus, trainer)
    }

    #[test]
    fn bank_fill_grows_by_two_n_per_step_until_capacity() {
        let (corpus, mut t) = tiny_world();
        assert_eq!(t.bank.fill("en"), 0);
        let m = t.train_step(&corpus).unwrap();
        assert_eq!(m.lang, "en");
        assert_eq!(t.bank.fill("en"), 8); // 2N = 8
        let _ = t.train_step(&corpus).unwrap(); // fr
        assert_eq!(t.bank.fill("fr"), 8);
        let _ = t.train_step(&corpus).unwrap(); // en again
        assert_eq!(t.bank.fill("en"), 16);
        let _ = t.train_step(&corpus).unwrap();
        let _ = t.train_step(&corpus).unwrap();
        assert_eq!(t.bank.fill("en"), 16); // capacity
    }

    #[test]
    fn mode_flag_alternates_across_steps() {
        let (corpus, mut t) = tiny_world();
        let mut seen = Vec::new();
        for _ in 0..5 {
            let m = t.train_step(&corpus).unwrap();
            seen.push(m.e);
        }
        assert_eq!(seen, vec![0, 1, 0, 1, 0]);
    }

    #[test]
    fn fixed_seed_runs_are_bitwise_identical() {
        let (corpus, mut a) = tiny_world();
        let (_, mut b) = tiny_world();
        for _ in 0..6 {
            let ma = a.train_step(&corpus).unwrap();
            let mb = b.train_step(&corpus).unwrap();
            assert_eq!(ma.loss.to_bits(), mb.loss.to_bits());
        }
        for ((na, ta), (nb, tb)) in a.encoder.named().iter().zip(b.encoder.named().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn languages_cycle_round_robin_and_stay_pure() {
        let (corpus, mut t) = tiny_world();
        let labels: Vec<String> = (0..4)
            .map(|_| t.train_step(&corpus).unwrap().lang)
            .collect();
        assert_eq!(labels, vec!["en", "fr", "en", "fr"]);
    }

    #[test]
    fn k_candidates_counts_batch_and_bank() {
        let (corpus, mut t) = tiny_world();
        let m1 = t.train_step(&corpus).unwrap();
        assert_eq!(m1.k_candidates, 7); // 2N−1, empty bank
        let _ = t.train_step(&corpus).unwrap();
        let m3 = t.train_step(&corpus).unwrap();
        assert_eq!(m3.k_candidates, 7 + 8); // plus one pushed batch for "en"
    }

    #[test]
    fn mlm_steps_leave_head_and_flag_alone() {
        let (corpus, mut t) = tiny_world();
        t.config.mlm_enabled = true;
        let head_before = t.head.w1.clone();
        let mut saw_mlm = false;
        let mut saw_ccp = false;
        for _ in 0..12 {
            let m = t.train_step(&corpus).unwrap();
            if m.task == StepTask::Mlm {
                saw_mlm = true;
                assert_eq!(m.k_candidates, 0);
            } else {
                saw_ccp = true;
            }
        }
        assert!(saw_mlm && saw_ccp, "coin should pick both tasks in 12 draws");
        // Head changed only via CCP steps; it must differ from init since we
        // saw at least one CCP step.
        assert_ne!(head_before.data(), t.head.w1.data());
    }
}
