//! Post-training cross-lingual alignment: per-language shift and scale
//! statistics, orthogonal rotations from Procrustes, and unsupervised
//! rotation refinement by CSLS mutual-nearest-neighbor dictionary
//! induction.

mod csls;
mod procrustes;
mod refine;
mod stats;

pub use csls::{build_dictionary, csls_scores, Dictionary};
pub use procrustes::{procrustes, RotationMap};
pub use refine::{refine_rotation, RefineInit};
pub use stats::{compute_stats, shift_scale, LanguageStats, SHIFT_SCALE_EPS};

use crate::num::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("language {0:?} has no statistics")]
    UnknownLanguage(String),
    #[error("language {lang:?} needs at least 2 vectors, got {got}")]
    TooFewVectors { lang: String, got: usize },
    #[error("no rotation {src:?} → {dst:?}")]
    MissingRotation { src: String, dst: String },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("neighborhood size k={k} out of range 1..={max}")]
    BadK { k: usize, max: usize },
    #[error("empty dictionary: no mutual nearest neighbors survived; use more data or seed pairs")]
    EmptyDictionary,
    #[error("rows must be unit-norm for dictionary induction (row {0})")]
    NotNormalized(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, CalibrationError>;

/// Everything the eval stage needs to compare embeddings across languages:
/// shift/scale statistics per language plus directional rotations.
#[derive(Debug, Clone)]
pub struct CalibrationParams {
    pub stats: LanguageStats,
    rotations: BTreeMap<(String, String), RotationMap>,
}

impl CalibrationParams {
    pub fn new(stats: LanguageStats) -> Self {
        CalibrationParams {
            stats,
            rotations: BTreeMap::new(),
        }
    }

    pub fn insert_rotation(&mut self, rotation: RotationMap) {
        self.rotations
            .insert((rotation.src.clone(), rotation.dst.clone()), rotation);
    }

    pub fn rotation(&self, src: &str, dst: &str) -> Option<&RotationMap> {
        self.rotations.get(&(src.to_string(), dst.to_string()))
    }

    pub fn rotations(&self) -> impl Iterator<Item = &RotationMap> {
        self.rotations.values()
    }

    /// Shift, scale, then rotate `x` from the space of `lang_src` into the
    /// space of `lang_dst`. Equal languages shift-scale only.
    pub fn calibrate(&self, x: &[f64], lang_src: &str, lang_dst: &str) -> Result<Vec<f64>> {
        let scaled = shift_scale(x, lang_src, &self.stats, SHIFT_SCALE_EPS)?;
        if lang_src == lang_dst {
            return Ok(scaled);
        }
        let rot = self
            .rotation(lang_src, lang_dst)
            .ok_or_else(|| CalibrationError::MissingRotation {
                src: lang_src.to_string(),
                dst: lang_dst.to_string(),
            })?;
        Ok(rot.apply(&scaled))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file: CalibrationFile = self.into();
        let json = serde_json::to_string_pretty(&file)
            .map_err(|e| CalibrationError::Parse(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: CalibrationFile =
            serde_json::from_str(&text).map_err(|e| CalibrationError::Parse(e.to_string()))?;
        file.try_into()
    }
}

/// Wire format of the calibration parameter file.
#[derive(Serialize, Deserialize)]
struct CalibrationFile {
    stats: BTreeMap<String, StatsRecord>,
    rotations: Vec<RotationRecord>,
}

#[derive(Serialize, Deserialize)]
struct StatsRecord {
    mean: Vec<f64>,
    std: Vec<f64>,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct RotationRecord {
    src: String,
    dst: String,
    w: Vec<Vec<f64>>,
}

impl From<&CalibrationParams> for CalibrationFile {
    fn from(p: &CalibrationParams) -> Self {
        let stats = p
            .stats
            .languages()
            .map(|lang| {
                let s = p.stats.get(lang).unwrap();
                (
                    lang.to_string(),
                    StatsRecord {
                        mean: s.mean.clone(),
                        std: s.std(),
                        count: s.count,
                    },
                )
            })
            .collect();
        let rotations = p
            .rotations
            .values()
            .map(|r| {
                let d = r.dim();
                let w = (0..d).map(|i| r.matrix.row(i).to_vec()).collect();
                RotationRecord {
                    src: r.src.clone(),
                    dst: r.dst.clone(),
                    w,
                }
            })
            .collect();
        CalibrationFile { stats, rotations }
    }
}

impl TryFrom<CalibrationFile> for CalibrationParams {
    type Error = CalibrationError;

    fn try_from(file: CalibrationFile) -> Result<Self> {
        let mut stats = LanguageStats::default();
        for (lang, rec) in file.stats {
            if rec.mean.len() != rec.std.len() {
                return Err(CalibrationError::DimMismatch {
                    expected: rec.mean.len(),
                    got: rec.std.len(),
                });
            }
            let var = rec.std.iter().map(|s| s * s).collect();
            stats.insert(lang, rec.mean, var, rec.count);
        }
        let mut params = CalibrationParams::new(stats);
        for rec in file.rotations {
            let d = rec.w.len();
            let mut data = Vec::with_capacity(d * d);
            for row in &rec.w {
                if row.len() != d {
                    return Err(CalibrationError::Parse("ragged rotation matrix".into()));
                }
                data.extend_from_slice(row);
            }
            let matrix = Tensor::new(vec![d, d], data)
                .map_err(|e| CalibrationError::Parse(e.to_string()))?;
            params.insert_rotation(RotationMap {
                src: rec.src,
                dst: rec.dst,
                matrix,
            });
        }
        Ok(params)
    }
}
