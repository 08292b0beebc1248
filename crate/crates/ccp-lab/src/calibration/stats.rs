use super::{CalibrationError, Result};
use std::collections::BTreeMap;

/// Epsilon added to the standard deviation's denominator in shift-scale.
pub const SHIFT_SCALE_EPS: f64 = 1e-8;

/// One language's embedding statistics: sample mean and biased
/// per-dimension variance.
#[derive(Debug, Clone, PartialEq)]
pub struct LangStat {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

impl LangStat {
    pub fn std(&self) -> Vec<f64> {
        self.var.iter().map(|v| v.sqrt()).collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct LanguageStats {
    map: BTreeMap<String, LangStat>,
}

impl LanguageStats {
    pub fn insert(&mut self, lang: String, mean: Vec<f64>, var: Vec<f64>, count: usize) {
        self.map.insert(lang, LangStat { mean, var, count });
    }

    pub fn get(&self, lang: &str) -> Option<&LangStat> {
        self.map.get(lang)
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }
}

/// Per-language sample mean and biased per-dimension variance over grouped
/// embedding rows. Every language needs at least 2 vectors.
pub fn compute_stats(groups: &BTreeMap<String, Vec<Vec<f64>>>) -> Result<LanguageStats> {
    let mut out = LanguageStats::default();
    for (lang, rows) in groups {
        if rows.len() < 2 {
            return Err(CalibrationError::TooFewVectors {
                lang: lang.clone(),
                got: rows.len(),
            });
        }
        let dim = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for row in rows {
            if row.len() != dim {
                return Err(CalibrationError::DimMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut var = vec![0.0; dim];
        for row in rows {
            for j in 0..dim {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        for v in var.iter_mut() {
            *v /= n;
        }
        out.insert(lang.clone(), mean, var, rows.len());
    }
    Ok(out)
}

/// `(x − μ_lang) / (σ_lang + ε)`, elementwise, with σ the per-dimension
/// standard deviation.
pub fn shift_scale(x: &[f64], lang: &str, stats: &LanguageStats, eps: f64) -> Result<Vec<f64>> {
    let s = stats
        .get(lang)
        .ok_or_else(|| CalibrationError::UnknownLanguage(lang.to_string()))?;
    if x.len() != s.mean.len() {
        return Err(CalibrationError::DimMismatch {
            expected: s.mean.len(),
            got: x.len(),
        });
    }
    Ok(x.iter()
        .enumerate()
        .map(|(j, v)| (v - s.mean[j]) / (s.var[j].sqrt() + eps))
        .collect())
}
