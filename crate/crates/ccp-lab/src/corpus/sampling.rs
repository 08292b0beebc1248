use super::{CorpusError, Document, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Context positions of center `c` in a document of `len` sentences:
/// `{p : max(0, c−w) ≤ p ≤ min(len−1, c+w), p ≠ c}`.
pub fn context_set(doc: &Document, c: usize, w: usize) -> Result<Vec<usize>> {
    if w < 1 {
        return Err(CorpusError::WindowTooSmall(w));
    }
    let len = doc.len();
    if c >= len {
        return Err(CorpusError::PositionOutOfRange { pos: c, len });
    }
    let lo = c.saturating_sub(w);
    let hi = (c + w).min(len - 1);
    Ok((lo..=hi).filter(|&p| p != c).collect())
}

/// One center/context draw; indices refer to the corpus slice the batch was
/// sampled from.
#[derive(Debug, Clone)]
pub struct SampledPair {
    pub doc_index: usize,
    pub center_pos: usize,
    pub context_pos: usize,
}

/// A monolingual batch of center/context pairs.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub lang: String,
    pub pairs: Vec<SampledPair>,
}

impl PairBatch {
    pub fn center_tokens<'a>(&self, corpus: &'a [Document]) -> Vec<&'a [usize]> {
        self.pairs
            .iter()
            .map(|p| corpus[p.doc_index].sentences[p.center_pos].tokens.as_slice())
            .collect()
    }

    pub fn context_tokens<'a>(&self, corpus: &'a [Document]) -> Vec<&'a [usize]> {
        self.pairs
            .iter()
            .map(|p| corpus[p.doc_index].sentences[p.context_pos].tokens.as_slice())
            .collect()
    }
}

/// Draw `n` center/context pairs from one language of the corpus.
///
/// Centers are uniform over all eligible positions of that language
/// (documents weighted by their number of eligible centers); the context
/// sentence is uniform over the center's window. Documents with fewer than
/// two sentences are excluded.
pub fn sample_pair_batch(
    corpus: &[Document],
    lang: &str,
    n: usize,
    w: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PairBatch> {
    if w < 1 {
        return Err(CorpusError::WindowTooSmall(w));
    }
    // All eligible (document, center) slots for the language.
    let mut centers: Vec<(usize, usize)> = Vec::new();
    for (di, doc) in corpus.iter().enumerate() {
        if doc.lang == lang && doc.len() >= 2 {
            for p in 0..doc.len() {
                centers.push((di, p));
            }
        }
    }
    if centers.is_empty() {
        return Err(CorpusError::NoEligibleDocuments(lang.to_string()));
    }
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let (doc_index, center_pos) = centers[rng.gen_range(0..centers.len())];
        let ctx = context_set(&corpus[doc_index], center_pos, w)?;
        let context_pos = ctx[rng.gen_range(0..ctx.len())];
        pairs.push(SampledPair {
            doc_index,
            center_pos,
            context_pos,
        });
    }
    Ok(PairBatch {
        lang: lang.to_string(),
        pairs,
    })
}
