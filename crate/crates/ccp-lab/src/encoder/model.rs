use super::{EncoderConfig, EncoderError, Result, CLS_ID, PAD_ID};
use crate::num::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub ff_w1: Tensor,
    pub ff_b1: Tensor,
    pub ff_w2: Tensor,
    pub ff_b2: Tensor,
}

/// All encoder parameters, including the linear vocabulary head used by the
/// masked-language-model task.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub token_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_gamma: Tensor,
    pub final_beta: Tensor,
    pub mlm_w: Tensor,
    pub mlm_b: Tensor,
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

impl EncoderParams {
    pub fn init(config: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let layers = (0..config.num_layers)
            .map(|_| LayerParams {
                ln1_gamma: Tensor::full(vec![d], 1.0),
                ln1_beta: Tensor::zeros(vec![d]),
                wq: normal_tensor(rng, vec![d, d], INIT_STD),
                bq: Tensor::zeros(vec![d]),
                wk: normal_tensor(rng, vec![d, d], INIT_STD),
                bk: Tensor::zeros(vec![d]),
                wv: normal_tensor(rng, vec![d, d], INIT_STD),
                bv: Tensor::zeros(vec![d]),
                wo: normal_tensor(rng, vec![d, d], INIT_STD),
                bo: Tensor::zeros(vec![d]),
                ln2_gamma: Tensor::full(vec![d], 1.0),
                ln2_beta: Tensor::zeros(vec![d]),
                ff_w1: normal_tensor(rng, vec![d, config.feedforward_dim], INIT_STD),
                ff_b1: Tensor::zeros(vec![config.feedforward_dim]),
                ff_w2: normal_tensor(rng, vec![config.feedforward_dim, d], INIT_STD),
                ff_b2: Tensor::zeros(vec![d]),
            })
            .collect();
        Ok(EncoderParams {
            config: config.clone(),
            token_emb: normal_tensor(rng, vec![config.vocab_size, d], INIT_STD),
            pos_emb: normal_tensor(rng, vec![config.max_seq_len, d], INIT_STD),
            layers,
            final_gamma: Tensor::full(vec![d], 1.0),
            final_beta: Tensor::zeros(vec![d]),
            mlm_w: normal_tensor(rng, vec![d, config.vocab_size], INIT_STD),
            mlm_b: Tensor::zeros(vec![config.vocab_size]),
        })
    }

    /// Stable traversal of all named parameter blocks.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("enc.token_emb".into(), &self.token_emb),
            ("enc.pos_emb".into(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("enc.layer{i}.ln1_gamma"), &l.ln1_gamma));
            out.push((format!("enc.layer{i}.ln1_beta"), &l.ln1_beta));
            out.push((format!("enc.layer{i}.wq"), &l.wq));
            out.push((format!("enc.layer{i}.bq"), &l.bq));
            out.push((format!("enc.layer{i}.wk"), &l.wk));
            out.push((format!("enc.layer{i}.bk"), &l.bk));
            out.push((format!("enc.layer{i}.wv"), &l.wv));
            out.push((format!("enc.layer{i}.bv"), &l.bv));
            out.push((format!("enc.layer{i}.wo"), &l.wo));
            out.push((format!("enc.layer{i}.bo"), &l.bo));
            out.push((format!("enc.layer{i}.ln2_gamma"), &l.ln2_gamma));
            out.push((format!("enc.layer{i}.ln2_beta"), &l.ln2_beta));
            out.push((format!("enc.layer{i}.ff_w1"), &l.ff_w1));
            out.push((format!("enc.layer{i}.ff_b1"), &l.ff_b1));
            out.push((format!("enc.layer{i}.ff_w2"), &l.ff_w2));
            out.push((format!("enc.layer{i}.ff_b2"), &l.ff_b2));
        }
        out.push(("enc.final_gamma".into(), &self.final_gamma));
        out.push(("enc.final_beta".into(), &self.final_beta));
        out.push(("enc.mlm_w".into(), &self.mlm_w));
        out.push(("enc.mlm_b".into(), &self.mlm_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("enc.token_emb".into(), &mut self.token_emb),
            ("enc.pos_emb".into(), &mut self.pos_emb),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("enc.layer{i}.ln1_gamma"), &mut l.ln1_gamma));
            out.push((format!("enc.layer{i}.ln1_beta"), &mut l.ln1_beta));
            out.push((format!("enc.layer{i}.wq"), &mut l.wq));
            out.push((format!("enc.layer{i}.bq"), &mut l.bq));
            out.push((format!("enc.layer{i}.wk"), &mut l.wk));
            out.push((format!("enc.layer{i}.bk"), &mut l.bk));
            out.push((format!("enc.layer{i}.wv"), &mut l.wv));
            out.push((format!("enc.layer{i}.bv"), &mut l.bv));
            out.push((format!("enc.layer{i}.wo"), &mut l.wo));
            out.push((format!("enc.layer{i}.bo"), &mut l.bo));
            out.push((format!("enc.layer{i}.ln2_gamma"), &mut l.ln2_gamma));
            out.push((format!("enc.layer{i}.ln2_beta"), &mut l.ln2_beta));
            out.push((format!("enc.layer{i}.ff_w1"), &mut l.ff_w1));
            out.push((format!("enc.layer{i}.ff_b1"), &mut l.ff_b1));
            out.push((format!("enc.layer{i}.ff_w2"), &mut l.ff_w2));
            out.push((format!("enc.layer{i}.ff_b2"), &mut l.ff_b2));
        }
        out.push(("enc.final_gamma".into(), &mut self.final_gamma));
        out.push(("enc.final_beta".into(), &mut self.final_beta));
        out.push(("enc.mlm_w".into(), &mut self.mlm_w));
        out.push(("enc.mlm_b".into(), &mut self.mlm_b));
        out
    }

    /// Register every parameter as a differentiable leaf on the tape.
    pub fn leaf(&self, tape: &mut Tape) -> EncoderVars {
        self.leaf_with(tape, true)
    }

    /// Leaves without gradient tracking, for inference-only passes.
    pub fn leaf_frozen(&self, tape: &mut Tape) -> EncoderVars {
        self.leaf_with(tape, false)
    }

    fn leaf_with(&self, tape: &mut Tape, needs_grad: bool) -> EncoderVars {
        let g = needs_grad;
        EncoderVars {
            token_emb: tape.leaf(self.token_emb.clone(), g),
            pos_emb: tape.leaf(self.pos_emb.clone(), g),
            layers: self
                .layers
                .iter()
                .map(|l| LayerVars {
                    ln1_gamma: tape.leaf(l.ln1_gamma.clone(), g),
                    ln1_beta: tape.leaf(l.ln1_beta.clone(), g),
                    wq: tape.leaf(l.wq.clone(), g),
                    bq: tape.leaf(l.bq.clone(), g),
                    wk: tape.leaf(l.wk.clone(), g),
                    bk: tape.leaf(l.bk.clone(), g),
                    wv: tape.leaf(l.wv.clone(), g),
                    bv: tape.leaf(l.bv.clone(), g),
                    wo: tape.leaf(l.wo.clone(), g),
                    bo: tape.leaf(l.bo.clone(), g),
                    ln2_gamma: tape.leaf(l.ln2_gamma.clone(), g),
                    ln2_beta: tape.leaf(l.ln2_beta.clone(), g),
                    ff_w1: tape.leaf(l.ff_w1.clone(), g),
                    ff_b1: tape.leaf(l.ff_b1.clone(), g),
                    ff_w2: tape.leaf(l.ff_w2.clone(), g),
                    ff_b2: tape.leaf(l.ff_b2.clone(), g),
                })
                .collect(),
            final_gamma: tape.leaf(self.final_gamma.clone(), g),
            final_beta: tape.leaf(self.final_beta.clone(), g),
            mlm_w: tape.leaf(self.mlm_w.clone(), g),
            mlm_b: tape.leaf(self.mlm_b.clone(), g),
        }
    }

    /// Gradients for every block, read back from a tape built by
    /// [`EncoderParams::leaf`], keyed like [`EncoderParams::named`].
    pub fn grads(&self, tape: &Tape, vars: &EncoderVars) -> std::collections::BTreeMap<String, Tensor> {
        let mut out = std::collections::BTreeMap::new();
        out.insert("enc.token_emb".to_string(), tape.grad(vars.token_emb));
        out.insert("enc.pos_emb".to_string(), tape.grad(vars.pos_emb));
        for (i, l) in vars.layers.iter().enumerate() {
            out.insert(format!("enc.layer{i}.ln1_gamma"), tape.grad(l.ln1_gamma));
            out.insert(format!("enc.layer{i}.ln1_beta"), tape.grad(l.ln1_beta));
            out.insert(format!("enc.layer{i}.wq"), tape.grad(l.wq));
            out.insert(format!("enc.layer{i}.bq"), tape.grad(l.bq));
            out.insert(format!("enc.layer{i}.wk"), tape.grad(l.wk));
            out.insert(format!("enc.layer{i}.bk"), tape.grad(l.bk));
            out.insert(format!("enc.layer{i}.wv"), tape.grad(l.wv));
            out.insert(format!("enc.layer{i}.bv"), tape.grad(l.bv));
            out.insert(format!("enc.layer{i}.wo"), tape.grad(l.wo));
            out.insert(format!("enc.layer{i}.bo"), tape.grad(l.bo));
            out.insert(format!("enc.layer{i}.ln2_gamma"), tape.grad(l.ln2_gamma));
            out.insert(format!("enc.layer{i}.ln2_beta"), tape.grad(l.ln2_beta));
            out.insert(format!("enc.layer{i}.ff_w1"), tape.grad(l.ff_w1));
            out.insert(format!("enc.layer{i}.ff_b1"), tape.grad(l.ff_b1));
            out.insert(format!("enc.layer{i}.ff_w2"), tape.grad(l.ff_w2));
            out.insert(format!("enc.layer{i}.ff_b2"), tape.grad(l.ff_b2));
        }
        out.insert("enc.final_gamma".to_string(), tape.grad(vars.final_gamma));
        out.insert("enc.final_beta".to_string(), tape.grad(vars.final_beta));
        out.insert("enc.mlm_w".to_string(), tape.grad(vars.mlm_w));
        out.insert("enc.mlm_b".to_string(), tape.grad(vars.mlm_b));
        out
    }
}

pub struct LayerVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub ff_w1: Var,
    pub ff_b1: Var,
    pub ff_w2: Var,
    pub ff_b2: Var,
}

pub struct EncoderVars {
    pub token_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<LayerVars>,
    pub final_gamma: Var,
    pub final_beta: Var,
    pub mlm_w: Var,
    pub mlm_b: Var,
}

impl EncoderVars {
    /// Assemble from leaves that were created elsewhere, keyed like
    /// [`EncoderParams::named`]. Used by gradient-check harnesses that own
    /// the leaf creation.
    pub fn from_map(
        num_layers: usize,
        map: &std::collections::BTreeMap<String, Var>,
    ) -> EncoderVars {
        let get = |name: &str| *map.get(name).unwrap_or_else(|| panic!("missing leaf {name}"));
        EncoderVars {
            token_emb: get("enc.token_emb"),
            pos_emb: get("enc.pos_emb"),
            layers: (0..num_layers)
                .map(|i| LayerVars {
                    ln1_gamma: get(&format!("enc.layer{i}.ln1_gamma")),
                    ln1_beta: get(&format!("enc.layer{i}.ln1_beta")),
                    wq: get(&format!("enc.layer{i}.wq")),
                    bq: get(&format!("enc.layer{i}.bq")),
                    wk: get(&format!("enc.layer{i}.wk")),
                    bk: get(&format!("enc.layer{i}.bk")),
                    wv: get(&format!("enc.layer{i}.wv")),
                    bv: get(&format!("enc.layer{i}.bv")),
                    wo: get(&format!("enc.layer{i}.wo")),
                    bo: get(&format!("enc.layer{i}.bo")),
                    ln2_gamma: get(&format!("enc.layer{i}.ln2_gamma")),
                    ln2_beta: get(&format!("enc.layer{i}.ln2_beta")),
                    ff_w1: get(&format!("enc.layer{i}.ff_w1")),
                    ff_b1: get(&format!("enc.layer{i}.ff_b1")),
                    ff_w2: get(&format!("enc.layer{i}.ff_w2")),
                    ff_b2: get(&format!("enc.layer{i}.ff_b2")),
                })
                .collect(),
            final_gamma: get("enc.final_gamma"),
            final_beta: get("enc.final_beta"),
            mlm_w: get("enc.mlm_w"),
            mlm_b: get("enc.mlm_b"),
        }
    }
}

/// Padded batch layout shared by the `[CLS]` readout and the MLM head.
pub(crate) struct PackedBatch {
    pub ids: Vec<usize>,
    pub valid: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
    /// Flat positions of real (non-[CLS], non-padding) tokens.
    pub token_positions: Vec<usize>,
}

/// Prepend `[CLS]`, pad to the longest sentence, and record validity.
pub(crate) fn pack(config: &EncoderConfig, batch: &[&[usize]]) -> Result<PackedBatch> {
    let longest = batch.iter().map(|s| s.len()).max().unwrap_or(0);
    if longest + 1 > config.max_seq_len {
        return Err(EncoderError::SequenceTooLong {
            len: longest,
            max: config.max_seq_len,
        });
    }
    let seq = longest + 1;
    let b = batch.len();
    let mut ids = vec![PAD_ID; b * seq];
    let mut valid = vec![false; b * seq];
    let mut token_positions = Vec::new();
    for (r, sent) in batch.iter().enumerate() {
        ids[r * seq] = CLS_ID;
        valid[r * seq] = true;
        for (j, &t) in sent.iter().enumerate() {
            ids[r * seq + 1 + j] = t;
            valid[r * seq + 1 + j] = true;
            token_positions.push(r * seq + 1 + j);
        }
    }
    Ok(PackedBatch {
        ids,
        valid,
        batch: b,
        seq,
        token_positions,
    })
}

/// Full hidden states `[B·T, D]` after all blocks and the final norm.
pub(crate) fn forward_hidden(
    tape: &mut Tape,
    vars: &EncoderVars,
    config: &EncoderConfig,
    packed: &PackedBatch,
) -> Result<Var> {
    let (b, t) = (packed.batch, packed.seq);
    let emb = tape.embed_lookup(vars.token_emb, &packed.ids)?;
    let pos_idx: Vec<usize> = (0..b * t).map(|i| i % t).collect();
    let pos = tape.gather_rows(vars.pos_emb, &pos_idx);
    let mut x = tape.add(emb, pos);

    for layer in &vars.layers {
        let h = tape.layer_norm(x, layer.ln1_gamma, layer.ln1_beta, LN_EPS);
        let q0 = tape.matmul(h, layer.wq);
        let q = tape.add_row_vec(q0, layer.bq);
        let k0 = tape.matmul(h, layer.wk);
        let k = tape.add_row_vec(k0, layer.bk);
        let v0 = tape.matmul(h, layer.wv);
        let v = tape.add_row_vec(v0, layer.bv);
        let attn = tape.attention(q, k, v, b, t, config.num_heads, &packed.valid);
        let o0 = tape.matmul(attn, layer.wo);
        let o = tape.add_row_vec(o0, layer.bo);
        x = tape.add(x, o);

        let h2 = tape.layer_norm(x, layer.ln2_gamma, layer.ln2_beta, LN_EPS);
        let f0 = tape.matmul(h2, layer.ff_w1);
        let f1 = tape.add_row_vec(f0, layer.ff_b1);
        let f2 = tape.gelu(f1);
        let f3 = tape.matmul(f2, layer.ff_w2);
        let f = tape.add_row_vec(f3, layer.ff_b2);
        x = tape.add(x, f);
    }

    Ok(tape.layer_norm(x, vars.final_gamma, vars.final_beta, LN_EPS))
}

/// Encode a batch of token sequences to their `[CLS]` embeddings `[B, D]`.
///
/// Token ids must already be global (see
/// [`TokenMapper`](super::TokenMapper)); sequences may have different
/// lengths and are padded internally, with padding masked out of every
/// attention softmax so the `[CLS]` state is invariant to padding length.
pub fn encode(
    tape: &mut Tape,
    vars: &EncoderVars,
    config: &EncoderConfig,
    batch: &[&[usize]],
) -> Result<Var> {
    let packed = pack(config, batch)?;
    let hidden = forward_hidden(tape, vars, config, &packed)?;
    let cls_idx: Vec<usize> = (0..packed.batch).map(|r| r * packed.seq).collect();
    Ok(tape.gather_rows(hidden, &cls_idx))
}

/// One sentence's `[CLS]` embedding with its corpus coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEmbedding {
    pub doc_id: String,
    pub pos: usize,
    pub lang: String,
    pub vector: Vec<f64>,
}

/// Embed every sentence of `docs` in corpus order, `chunk` sentences per
/// forward pass. The projection head plays no part here: embeddings are the
/// encoder's `[CLS]` states.
pub fn embed_corpus(
    params: &EncoderParams,
    mapper: &super::TokenMapper,
    docs: &[crate::corpus::Document],
    chunk: usize,
) -> Result<Vec<SentenceEmbedding>> {
    let mut slots: Vec<(usize, usize)> = Vec::new(); // (doc index, pos)
    for (di, doc) in docs.iter().enumerate() {
        for p in 0..doc.len() {
            slots.push((di, p));
        }
    }
    let mut out = Vec::with_capacity(slots.len());
    for group in slots.chunks(chunk.max(1)) {
        let mut mapped: Vec<Vec<usize>> = Vec::with_capacity(group.len());
        for &(di, p) in group {
            let doc = &docs[di];
            mapped.push(mapper.map_sentence(&doc.lang, &doc.sentences[p].tokens)?);
        }
        let mut tape = Tape::new();
        let vars = params.leaf_frozen(&mut tape);
        let refs: Vec<&[usize]> = mapped.iter().map(|v| v.as_slice()).collect();
        let cls = encode(&mut tape, &vars, &params.config, &refs)?;
        let values = tape.value(cls);
        values.validate_finite("sentence embedding")?;
        for (row, &(di, p)) in group.iter().enumerate() {
            out.push(SentenceEmbedding {
                doc_id: docs[di].doc_id.clone(),
                pos: p,
                lang: docs[di].lang.clone(),
                vector: values.row(row).to_vec(),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 16,
            model_dim: 8,
            num_layers: 2,
            num_heads: 2,
            max_seq_len: 6,
            feedforward_dim: 12,
            dropout_rate: 0.0,
            mlm_mask_prob: 0.3,
        }
    }

    fn params(seed: u64) -> EncoderParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EncoderParams::init(&tiny_config(), &mut rng).unwrap()
    }

    fn run(p: &EncoderParams, batch: &[&[usize]]) -> Tensor {
        let mut tape = Tape::new();
        let vars = p.leaf(&mut tape);
        let out = encode(&mut tape, &vars, &p.config, batch).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn output_shape_and_determinism() {
        let p = params(1);
        let batch: Vec<&[usize]> = vec![&[3, 4, 5], &[6, 7], &[8]];
        let a = run(&p, &batch);
        assert_eq!(a.shape(), &[3, 8]);
        let b = run(&p, &batch);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn cls_is_invariant_to_padding_length() {
        // The same sentence embedded next to a short or a long neighbor
        // (hence different padded lengths) must agree at [CLS].
        let p = params(2);
        let short = run(&p, &[&[3, 4, 5], &[6]]);
        let long = run(&p, &[&[3, 4, 5], &[6, 7, 8, 9, 10]]);
        for j in 0..8 {
            assert!(
                (short.data()[j] - long.data()[j]).abs() < 1e-10,
                "cls drifted at dim {j}"
            );
        }
    }

    #[test]
    fn permuting_the_batch_permutes_outputs() {
        let p = params(3);
        let fwd = run(&p, &[&[3, 4], &[5, 6, 7], &[8]]);
        let rev = run(&p, &[&[8], &[5, 6, 7], &[3, 4]]);
        assert_eq!(fwd.row(0), rev.row(2));
        assert_eq!(fwd.row(1), rev.row(1));
        assert_eq!(fwd.row(2), rev.row(0));
    }

    #[test]
    fn overlong_sequences_are_rejected() {
        let p = params(4);
        let mut tape = Tape::new();
        let vars = p.leaf(&mut tape);
        let too_long = vec![3usize; 6]; // 6 + [CLS] > max_seq_len 6
        let err = encode(&mut tape, &vars, &p.config, &[&too_long]).unwrap_err();
        assert!(matches!(err, EncoderError::SequenceTooLong { .. }));
    }

    #[test]
    fn unknown_token_ids_are_rejected() {
        let p = params(5);
        let mut tape = Tape::new();
        let vars = p.leaf(&mut tape);
        let err = encode(&mut tape, &vars, &p.config, &[&[99]]).unwrap_err();
        assert!(matches!(err, EncoderError::Num(_)));
    }
}
