//! The contrastive context prediction objective: projection head with
//! asymmetric batch normalization, language-tagged FIFO memory bank,
//! windowed InfoNCE loss, and the training loop that ties them together.

mod bank;
mod head;
mod loss;
mod trainer;

pub use bank::MemoryBank;
pub use head::{asymmetric_forward, HeadVars, ProjectionHead};
pub use loss::{ccp_loss, mi_lower_bound, PositiveMask};
pub use trainer::{StepMetrics, StepTask, Trainer};

use crate::corpus::CorpusError;
use crate::encoder::EncoderError;
use crate::num::NumError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CcpError {
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("row {row} must be unit-norm (|norm−1| = {deviation:.3e} exceeds 1e-6)")]
    NotNormalized { row: usize, deviation: f64 },
    #[error("positive mask is invalid: {0}")]
    BadMask(String),
    #[error("non-finite loss {value} at step {step} (language {lang}, task {task})")]
    NonFiniteLoss {
        step: u64,
        lang: String,
        task: String,
        value: f64,
    },
    #[error("invalid ccp config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

pub type Result<T> = std::result::Result<T, CcpError>;

/// Which vectors the memory bank serves as negatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankMode {
    /// Per-language rings; negatives always share the anchor's language.
    LanguageSpecific,
    /// One ring for all languages (ablation wiring).
    Shared,
    /// No extra negatives.
    Off,
}

/// How the two projection branches use batch normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnWiring {
    /// One branch in train mode, the other in eval mode, roles alternating
    /// per step.
    Asymmetric,
    /// Both branches in train mode (the information-leak configuration).
    SymmetricTrain,
    /// Both branches in eval mode.
    SymmetricEval,
    /// No batch normalization stage in the head at all.
    Off,
}

/// Knobs of the contrastive task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CCPConfig {
    /// Softmax temperature τ.
    pub temperature: f64,
    /// Context window radius w.
    pub window: usize,
    /// Pairs per batch N (the batch holds 2N sentences).
    pub pairs_per_batch: usize,
    /// Memory bank capacity per ring.
    pub bank_capacity: usize,
    pub bank_mode: BankMode,
    pub l2_normalize: bool,
    pub bn_mode: BnWiring,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    /// Interleave the masked-language-model task by per-batch coin flip.
    pub mlm_enabled: bool,
}

impl Default for CCPConfig {
    fn default() -> Self {
        CCPConfig {
            temperature: 0.1,
            window: 2,
            pairs_per_batch: 32,
            bank_capacity: 256,
            bank_mode: BankMode::LanguageSpecific,
            l2_normalize: true,
            bn_mode: BnWiring::Asymmetric,
            proj_hidden: 64,
            proj_dim: 32,
            mlm_enabled: false,
        }
    }
}

impl CCPConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(CcpError::BadTemperature(self.temperature));
        }
        if self.pairs_per_batch < 1 {
            return Err(CcpError::InvalidConfig("pairs_per_batch must be ≥ 1".into()));
        }
        if self.window < 1 {
            return Err(CcpError::InvalidConfig("window must be ≥ 1".into()));
        }
        if self.proj_hidden == 0 || self.proj_dim == 0 {
            return Err(CcpError::InvalidConfig(
                "proj_hidden and proj_dim must be positive".into(),
            ));
        }
        Ok(())
    }
}
