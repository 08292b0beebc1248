//! Multilingual document corpora: synthetic generation with exact
//! translation ground truth, JSON-Lines persistence, and context-window
//! pair sampling for the contrastive task.

mod io;
mod sampling;
mod synthetic;

pub use io::{load_corpus, load_parallel_index, save_corpus, save_parallel_index, LoadedCorpus};
pub use sampling::{context_set, sample_pair_batch, PairBatch, SampledPair};
pub use synthetic::{generate_synthetic_corpus, language_transforms, LanguageTransform};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("position {pos} out of range for a document of {len} sentences")]
    PositionOutOfRange { pos: usize, len: usize },
    #[error("window radius must be at least 1, got {0}")]
    WindowTooSmall(usize),
    #[error("no document with at least 2 sentences in language {0:?}")]
    NoEligibleDocuments(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// One sentence: token indices plus the language tag, and (for synthetic
/// corpora) the ground-truth latent vector it was generated from.
#[derive(Debug, Clone, PartialEq)]
pub struct Sentence {
    pub tokens: Vec<usize>,
    pub lang: String,
    pub latent: Option<Vec<f64>>,
}

/// An ordered sequence of same-language sentences; adjacency is the
/// contextual signal the pretraining task consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub doc_id: String,
    pub lang: String,
    pub sentences: Vec<Sentence>,
}

impl Document {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

/// Generator configuration for a synthetic multilingual corpus.
///
/// Parallel documents across languages share identical latent sequences;
/// only the per-language orthogonal transform, offset, and observation noise
/// differ, which gives exact translation ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub languages: Vec<String>,
    pub latent_dim: usize,
    /// Latent autocorrelation ρ of adjacent sentences within a document.
    pub walk_correlation: f64,
    pub docs_per_language: usize,
    /// Extra documents generated per language as a held-out split.
    pub heldout_docs_per_language: usize,
    pub sentences_per_doc: usize,
    /// Per-language token buckets per latent coordinate.
    pub vocab_size: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 2 {
            return Err(CorpusError::InvalidSpec(format!(
                "latent_dim must be at least 2, got {}",
                self.latent_dim
            )));
        }
        if self.languages.len() < 2 {
            return Err(CorpusError::InvalidSpec(format!(
                "need at least 2 languages for a parallel index, got {}",
                self.languages.len()
            )));
        }
        if !(0.0..1.0).contains(&self.walk_correlation) {
            return Err(CorpusError::InvalidSpec(format!(
                "walk_correlation must lie in [0,1), got {}",
                self.walk_correlation
            )));
        }
        if self.vocab_size < 2 {
            return Err(CorpusError::InvalidSpec("vocab_size must be at least 2".into()));
        }
        if self.sentences_per_doc == 0 || self.docs_per_language == 0 {
            return Err(CorpusError::InvalidSpec(
                "docs_per_language and sentences_per_doc must be positive".into(),
            ));
        }
        if self.noise_std < 0.0 {
            return Err(CorpusError::InvalidSpec("noise_std must be non-negative".into()));
        }
        let mut sorted = self.languages.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.languages.len() {
            return Err(CorpusError::InvalidSpec("duplicate language ids".into()));
        }
        Ok(())
    }
}

/// One cross-language alignment: sentence `pos` of `doc` in `lang_a` was
/// generated from the same latent as sentence `pos2` of `doc2` in `lang_b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParallelPair {
    pub lang_a: String,
    pub doc: String,
    pub pos: usize,
    pub lang_b: String,
    pub doc2: String,
    pub pos2: usize,
}

pub type ParallelIndex = Vec<ParallelPair>;
