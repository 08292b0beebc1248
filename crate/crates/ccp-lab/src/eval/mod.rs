//! Retrieval metrics (bidirectional top-1, MRR@k, Recall@k), isomorphism
//! diagnostics over aligned clouds, PCA export, and the binary/TSV
//! embedding file formats.

mod embfile;
mod isomorphism;
mod pca;
mod retrieval;

pub use embfile::{load_embeddings, save_embeddings, write_embeddings_tsv, EmbeddingMatrix};
pub use isomorphism::{similarity_correlation, IsomorphismReport};
pub use pca::{pca_project, PcaProjection};
pub use retrieval::{mrr_at_k, rank_of_gold, recall_at_k, top1_accuracy, RetrievalReport};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty candidate set")]
    EmptyCandidates,
    #[error("need at least {need} rows, got {got}")]
    TooFewRows { need: usize, got: usize },
    #[error("row counts must match: {a} vs {b}")]
    RowMismatch { a: usize, b: usize },
    #[error("covariance has rank {rank}, cannot extract {want} components")]
    DegenerateCovariance { rank: usize, want: usize },
    #[error("row {0} has zero norm")]
    ZeroRow(usize),
    #[error("k must be at least 1")]
    BadK,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad embedding file: {0}")]
    BadFile(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;
