use super::{EvalError, Result};
use crate::num::Tensor;
use serde::{Deserialize, Serialize};

/// Metric bundle for one language pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub lang_a: String,
    pub lang_b: String,
    pub top1_forward: f64,
    pub top1_backward: f64,
    pub top1_avg: f64,
    /// (k, MRR@k) in ascending k.
    pub mrr_at_k: Vec<(usize, f64)>,
    /// (k, Recall@k) in ascending k.
    pub recall_at_k: Vec<(usize, f64)>,
    pub num_queries: usize,
}

fn cosine_rows(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let xn = x.l2_normalize_rows().map_err(zero_row)?;
    let yn = y.l2_normalize_rows().map_err(zero_row)?;
    let data = crate::num::matmul_nt(xn.data(), yn.data(), xn.rows(), xn.cols(), yn.rows());
    Ok(Tensor::new(vec![x.rows(), y.rows()], data).unwrap())
}

fn zero_row(e: crate::num::NumError) -> EvalError {
    match e {
        crate::num::NumError::ZeroRow { row } => EvalError::ZeroRow(row),
        other => EvalError::BadFile(other.to_string()),
    }
}

/// Fraction of queries whose cosine-argmax candidate (ties to the lowest
/// index) is the gold row.
pub fn top1_accuracy(queries: &Tensor, candidates: &Tensor, gold: &[usize]) -> Result<f64> {
    if candidates.rows() == 0 {
        return Err(EvalError::EmptyCandidates);
    }
    if gold.len() != queries.rows() {
        return Err(EvalError::RowMismatch {
            a: gold.len(),
            b: queries.rows(),
        });
    }
    let sim = cosine_rows(queries, candidates)?;
    let m = candidates.rows();
    let mut hits = 0usize;
    for (q, &g) in gold.iter().enumerate() {
        let row = sim.row(q);
        let mut best = f64::NEG_INFINITY;
        let mut best_j = 0usize;
        for (j, &v) in row.iter().enumerate().take(m) {
            if v > best {
                best = v;
                best_j = j;
            }
        }
        if best_j == g {
            hits += 1;
        }
    }
    Ok(hits as f64 / gold.len() as f64)
}

/// 1-based rank of the best gold candidate under descending similarity,
/// ties broken toward the lowest index. `gold` may hold several relevant
/// rows; the best (lowest) rank counts.
pub fn rank_of_gold(similarities: &[f64], gold: &[usize]) -> usize {
    let mut best_rank = usize::MAX;
    for &g in gold {
        let sg = similarities[g];
        let mut rank = 1;
        for (j, &v) in similarities.iter().enumerate() {
            if v > sg || (v == sg && j < g) {
                rank += 1;
            }
        }
        best_rank = best_rank.min(rank);
    }
    best_rank
}

/// MRR@k: mean over queries of `1/rank` when `rank ≤ k`, else 0.
pub fn mrr_at_k(queries: &Tensor, candidates: &Tensor, gold: &[Vec<usize>], k: usize) -> Result<f64> {
    if k < 1 {
        return Err(EvalError::BadK);
    }
    if candidates.rows() == 0 {
        return Err(EvalError::EmptyCandidates);
    }
    let sim = cosine_rows(queries, candidates)?;
    let mut total = 0.0;
    for (q, golds) in gold.iter().enumerate() {
        let rank = rank_of_gold(sim.row(q), golds);
        if rank <= k {
            total += 1.0 / rank as f64;
        }
    }
    Ok(total / gold.len() as f64)
}

/// Recall@k: fraction of queries whose best gold rank is ≤ k.
pub fn recall_at_k(
    queries: &Tensor,
    candidates: &Tensor,
    gold: &[Vec<usize>],
    k: usize,
) -> Result<f64> {
    if k < 1 {
        return Err(EvalError::BadK);
    }
    if candidates.rows() == 0 {
        return Err(EvalError::EmptyCandidates);
    }
    let sim = cosine_rows(queries, candidates)?;
    let mut hits = 0usize;
    for (q, golds) in gold.iter().enumerate() {
        if rank_of_gold(sim.row(q), golds) <= k {
            hits += 1;
        }
    }
    Ok(hits as f64 / gold.len() as f64)
}

impl RetrievalReport {
    /// Bidirectional report over aligned pairs: row `i` of `xs` translates
    /// row `i` of `ys`. Top-1 runs both directions and averages; MRR@k and
    /// Recall@k are computed in the forward direction for each `k`.
    pub fn compute(
        lang_a: &str,
        lang_b: &str,
        xs: &Tensor,
        ys: &Tensor,
        ks: &[usize],
    ) -> Result<RetrievalReport> {
        if xs.rows() != ys.rows() {
            return Err(EvalError::RowMismatch {
                a: xs.rows(),
                b: ys.rows(),
            });
        }
        let identity: Vec<usize> = (0..xs.rows()).collect();
        let forward = top1_accuracy(xs, ys, &identity)?;
        let backward = top1_accuracy(ys, xs, &identity)?;
        let gold: Vec<Vec<usize>> = identity.iter().map(|&i| vec![i]).collect();
        let mut mrr = Vec::with_capacity(ks.len());
        let mut recall = Vec::with_capacity(ks.len());
        for &k in ks {
            mrr.push((k, mrr_at_k(xs, ys, &gold, k)?));
            recall.push((k, recall_at_k(xs, ys, &gold, k)?));
        }
        Ok(RetrievalReport {
            lang_a: lang_a.to_string(),
            lang_b: lang_b.to_string(),
            top1_forward: forward,
            top1_backward: backward,
            top1_avg: 0.5 * (forward + backward),
            mrr_at_k: mrr,
            recall_at_k: recall,
            num_queries: xs.rows(),
        })
    }
}
