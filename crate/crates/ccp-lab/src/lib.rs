//! A desk-scale laboratory for contrastive context prediction (CCP):
//! sentence-level contrastive pretraining on multilingual documents, with a
//! language-tagged memory bank, asymmetric batch normalization in the
//! projection head, and a post-training cross-lingual calibration stage
//! (shift, scale, rotate).
//!
//! The crate is organized as a pipeline:
//!
//! * [`num`] — dense-tensor numerical core with reverse-mode differentiation,
//!   batch normalization with running statistics, and Adam.
//! * [`corpus`] — synthetic multilingual corpora with exact translation
//!   ground truth, corpus file I/O, and context-window pair sampling.
//! * [`encoder`] — a tiny transformer sentence encoder with a `[CLS]`
//!   readout and an optional masked-language-model head.
//! * [`ccp`] — the contrastive objective: projection head, memory bank,
//!   windowed InfoNCE loss, and the training loop.
//! * [`calibration`] — per-language shift/scale statistics plus orthogonal
//!   rotations learned by Procrustes with CSLS dictionary induction.
//! * [`eval`] — retrieval metrics (bidirectional top-1, MRR@k, Recall@k),
//!   isomorphism diagnostics, and PCA export.
//! * [`cli`] — configuration, checkpoints, file formats, and the seven
//!   command verbs that drive the pipeline.
//!
//! The guide under `book/` walks through each stage; its code listings are
//! compiled as doc-tests (see `book.rs`), so the narrative cannot drift from
//! the library.

pub mod calibration;
pub mod ccp;
pub mod cli;
pub mod corpus;
pub mod encoder;
pub mod eval;
pub mod num;

mod book;

/// Crate version string recorded in run outputs for reproducibility.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
