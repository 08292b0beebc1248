//! Tiny transformer sentence encoder: embeddings plus learned positions,
//! pre-norm self-attention blocks, and a `[CLS]` readout. The masked
//! language model head lives in [`mlm`].

mod mlm;
mod model;

pub use mlm::{mlm_loss, MlmOutcome};
pub use model::{embed_corpus, encode, EncoderParams, EncoderVars, SentenceEmbedding};

use crate::num::NumError;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Reserved token ids at the bottom of every vocabulary.
pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const MASK_ID: usize = 2;
pub const RESERVED_TOKENS: usize = 3;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("sequence of {len} tokens exceeds max_seq_len {max} (one slot is reserved for [CLS])")]
    SequenceTooLong { len: usize, max: usize },
    #[error("unknown language {0:?}")]
    UnknownLanguage(String),
    #[error("local token id {id} outside per-language vocabulary {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Total embedding-table size, including the reserved ids.
    pub vocab_size: usize,
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_seq_len: usize,
    pub feedforward_dim: usize,
    /// Kept at 0 at desk scale; nonzero values are rejected.
    pub dropout_rate: f64,
    pub mlm_mask_prob: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 512,
            model_dim: 64,
            num_layers: 2,
            num_heads: 4,
            max_seq_len: 33,
            feedforward_dim: 128,
            dropout_rate: 0.0,
            mlm_mask_prob: 0.15,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.model_dim % self.num_heads != 0 {
            return Err(EncoderError::InvalidConfig(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.vocab_size <= RESERVED_TOKENS {
            return Err(EncoderError::InvalidConfig(format!(
                "vocab_size {} leaves no room for data tokens",
                self.vocab_size
            )));
        }
        if self.max_seq_len < 2 {
            return Err(EncoderError::InvalidConfig(
                "max_seq_len must be at least 2".into(),
            ));
        }
        if self.dropout_rate != 0.0 {
            return Err(EncoderError::InvalidConfig(
                "dropout is not supported at desk scale; set dropout_rate = 0".into(),
            ));
        }
        if !(0.0 < self.mlm_mask_prob && self.mlm_mask_prob < 1.0) {
            return Err(EncoderError::InvalidConfig(format!(
                "mlm_mask_prob must lie in (0,1), got {}",
                self.mlm_mask_prob
            )));
        }
        if self.num_layers == 0 || self.feedforward_dim == 0 {
            return Err(EncoderError::InvalidConfig(
                "num_layers and feedforward_dim must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Maps per-language local token ids onto the shared embedding table.
///
/// Languages get disjoint id ranges (think distinct scripts): language `k`
/// of the sorted language list owns
/// `[RESERVED + k·vocab, RESERVED + (k+1)·vocab)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMapper {
    per_lang_vocab: usize,
    langs: BTreeMap<String, usize>,
}

impl TokenMapper {
    pub fn new(languages: &[String], per_lang_vocab: usize) -> Self {
        let mut sorted: Vec<String> = languages.to_vec();
        sorted.sort();
        sorted.dedup();
        let langs = sorted.into_iter().enumerate().map(|(i, l)| (l, i)).collect();
        TokenMapper { per_lang_vocab, langs }
    }

    pub fn global_id(&self, lang: &str, local: usize) -> Result<usize> {
        let idx = self
            .langs
            .get(lang)
            .ok_or_else(|| EncoderError::UnknownLanguage(lang.to_string()))?;
        if local >= self.per_lang_vocab {
            return Err(EncoderError::TokenOutOfRange {
                id: local,
                vocab: self.per_lang_vocab,
            });
        }
        Ok(RESERVED_TOKENS + idx * self.per_lang_vocab + local)
    }

    pub fn map_sentence(&self, lang: &str, tokens: &[usize]) -> Result<Vec<usize>> {
        tokens.iter().map(|&t| self.global_id(lang, t)).collect()
    }

    /// Smallest embedding table that fits every language.
    pub fn required_vocab(&self) -> usize {
        RESERVED_TOKENS + self.langs.len() * self.per_lang_vocab
    }

    pub fn per_lang_vocab(&self) -> usize {
        self.per_lang_vocab
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.langs.keys().map(|s| s.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mapper_gives_disjoint_ranges() {
        let m = TokenMapper::new(&["fr".into(), "en".into()], 10);
        // sorted: en = 0, fr = 1
        assert_eq!(m.global_id("en", 0).unwrap(), RESERVED_TOKENS);
        assert_eq!(m.global_id("fr", 0).unwrap(), RESERVED_TOKENS + 10);
        assert_eq!(m.required_vocab(), RESERVED_TOKENS + 20);
        assert!(m.global_id("de", 0).is_err());
        assert!(m.global_id("en", 10).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let mut c = EncoderConfig::default();
        c.model_dim = 65;
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::default();
        c.dropout_rate = 0.1;
        assert!(c.validate().is_err());
    }
}
