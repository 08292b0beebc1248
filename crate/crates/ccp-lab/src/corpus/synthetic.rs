use super::{CorpusError, Document, ParallelIndex, ParallelPair, Result, Sentence, SyntheticSpec};
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;

/// Ground-truth per-language observation model: `y = Q·x + b + noise`,
/// with tokens produced by per-coordinate Gaussian-quantile binning of `y`.
#[derive(Debug, Clone)]
pub struct LanguageTransform {
    /// Orthogonal `latent_dim × latent_dim` rotation, row-major.
    pub rotation: Vec<f64>,
    /// Offset placing the language in its own region of observation space.
    pub offset: Vec<f64>,
    pub latent_dim: usize,
}

impl LanguageTransform {
    pub fn apply(&self, latent: &[f64]) -> Vec<f64> {
        let d = self.latent_dim;
        let mut out = self.offset.clone();
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.rotation[i * d..(i + 1) * d];
            for (r, x) in row.iter().zip(latent) {
                *o += r * x;
            }
        }
        out
    }

    /// Max deviation of `QᵀQ` from the identity.
    pub fn orthogonality_error(&self) -> f64 {
        let d = self.latent_dim;
        let mut worst = 0.0f64;
        for i in 0..d {
            for j in 0..d {
                let mut dot = 0.0;
                for k in 0..d {
                    dot += self.rotation[k * d + i] * self.rotation[k * d + j];
                }
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }
}

/// Scale by which offsets separate the language regions; ~2 standard
/// deviations keeps clouds distinct without dwarfing the signal.
const OFFSET_SCALE: f64 = 2.0;

/// Haar-ish random orthogonal matrix: QR of a Gaussian matrix with the R
/// diagonal sign absorbed into Q.
fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let g = DMatrix::<f64>::from_fn(d, d, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            for i in 0..d {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = q[(i, j)];
        }
    }
    out
}

/// The per-language transforms implied by a spec, keyed by language id.
/// Derived deterministically from the seed, independent of corpus size.
pub fn language_transforms(spec: &SyntheticSpec) -> Result<BTreeMap<String, LanguageTransform>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7472_616e_7366_6f72); // "transfor"
    let mut sorted = spec.languages.clone();
    sorted.sort();
    let mut out = BTreeMap::new();
    for lang in sorted {
        let rotation = random_orthogonal(&mut rng, spec.latent_dim);
        let offset: Vec<f64> = (0..spec.latent_dim)
            .map(|_| {
                let n: f64 = rng.sample(StandardNormal);
                n * OFFSET_SCALE
            })
            .collect();
        out.insert(
            lang,
            LanguageTransform {
                rotation,
                offset,
                latent_dim: spec.latent_dim,
            },
        );
    }
    Ok(out)
}

/// Abramowitz–Stegun 7.1.26 rational approximation of erf (|err| < 1.5e-7);
/// plenty for quantile binning.
fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

/// Equal-probability bucket of a single observed coordinate.
fn quantize(value: f64, center: f64, spread: f64, buckets: usize) -> usize {
    let z = (value - center) / spread;
    let u = normal_cdf(z);
    ((u * buckets as f64) as usize).min(buckets - 1)
}

/// Generate the training and held-out splits plus their parallel indices.
///
/// Deterministic given the spec: the latent sequence of each parallel
/// document is drawn once and shared by every language; per-language
/// observation noise is drawn afterwards in sorted language order.
pub fn generate_synthetic_corpus(
    spec: &SyntheticSpec,
) -> Result<(Vec<Document>, ParallelIndex, Vec<Document>, ParallelIndex)> {
    spec.validate()?;
    let transforms = language_transforms(spec)?;
    let mut langs = spec.languages.clone();
    langs.sort();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rho = spec.walk_correlation;
    let innovation = (1.0 - rho * rho).sqrt();
    let spread = (1.0 + spec.noise_std * spec.noise_std).sqrt();

    let total_docs = spec.docs_per_language + spec.heldout_docs_per_language;
    let mut train: Vec<Document> = Vec::new();
    let mut heldout: Vec<Document> = Vec::new();

    for d in 0..total_docs {
        // Shared latent walk for this parallel document.
        let mut latents: Vec<Vec<f64>> = Vec::with_capacity(spec.sentences_per_doc);
        let mut x: Vec<f64> = (0..spec.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
        latents.push(x.clone());
        for _ in 1..spec.sentences_per_doc {
            for v in x.iter_mut() {
                let eta: f64 = rng.sample(StandardNormal);
                *v = rho * *v + innovation * eta;
            }
            latents.push(x.clone());
        }

        for lang in &langs {
            let tf = &transforms[lang];
            let sentences: Vec<Sentence> = latents
                .iter()
                .map(|latent| {
                    let mut y = tf.apply(latent);
                    for v in y.iter_mut() {
                        let eps: f64 = rng.sample(StandardNormal);
                        *v += spec.noise_std * eps;
                    }
                    let tokens: Vec<usize> = y
                        .iter()
                        .zip(&tf.offset)
                        .map(|(&v, &b)| quantize(v, b, spread, spec.vocab_size))
                        .collect();
                    Sentence {
                        tokens,
                        lang: lang.clone(),
                        latent: Some(latent.clone()),
                    }
                })
                .collect();
            let doc = Document {
                doc_id: format!("{lang}-{d:05}"),
                lang: lang.clone(),
                sentences,
            };
            if d < spec.docs_per_language {
                train.push(doc);
            } else {
                heldout.push(doc);
            }
        }
    }

    let pairs_for = |first_doc: usize, count: usize| -> ParallelIndex {
        let mut index = Vec::new();
        for d in first_doc..first_doc + count {
            for ai in 0..langs.len() {
                for bi in ai + 1..langs.len() {
                    for p in 0..spec.sentences_per_doc {
                        index.push(ParallelPair {
                            lang_a: langs[ai].clone(),
                            doc: format!("{}-{d:05}", langs[ai]),
                            pos: p,
                            lang_b: langs[bi].clone(),
                            doc2: format!("{}-{d:05}", langs[bi]),
                            pos2: p,
                        });
                    }
                }
            }
        }
        index
    };

    let train_index = pairs_for(0, spec.docs_per_language);
    let heldout_index = pairs_for(spec.docs_per_language, spec.heldout_docs_per_language);

    if train.is_empty() {
        return Err(CorpusError::InvalidSpec("empty corpus".into()));
    }
    Ok((train, train_index, heldout, heldout_index))
}
