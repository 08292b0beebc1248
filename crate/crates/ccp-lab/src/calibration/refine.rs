use super::csls::build_dictionary;
use super::procrustes::{procrustes, RotationMap};
use super::{CalibrationError, Result};
use crate::num::Tensor;

/// Starting point for the alternating refinement.
pub enum RefineInit<'a> {
    /// Begin from an existing rotation (identity for the fully
    /// unsupervised route).
    Rotation(RotationMap),
    /// Begin from known aligned row pairs (weak supervision / oracle
    /// comparisons); the initial rotation is their Procrustes fit.
    Seed(&'a [(usize, usize)]),
}

fn gather(x: &Tensor, rows: impl Iterator<Item = usize>) -> Tensor {
    let d = x.cols();
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        data.extend_from_slice(x.row(r));
        n += 1;
    }
    Tensor::new(vec![n, d], data).unwrap()
}

/// Alternate CSLS dictionary induction with Procrustes re-fitting:
/// `dictionary ← mutual-NN(X·W, Y)`, then `W ← procrustes(dictionary)`,
/// stopping after `iters` rounds or as soon as the dictionary repeats.
/// Inputs must be shifted, scaled, and row-normalized; the returned map is
/// orthogonal to machine precision.
pub fn refine_rotation(
    src: &str,
    dst: &str,
    x: &Tensor,
    y: &Tensor,
    init: RefineInit,
    iters: usize,
    k: usize,
) -> Result<RotationMap> {
    let d = x.cols();
    let mut w = match init {
        RefineInit::Rotation(r) => {
            if r.dim() != d {
                return Err(CalibrationError::DimMismatch {
                    expected: d,
                    got: r.dim(),
                });
            }
            RotationMap {
                src: src.to_string(),
                dst: dst.to_string(),
                matrix: r.matrix,
            }
        }
        RefineInit::Seed(pairs) => {
            if pairs.is_empty() {
                return Err(CalibrationError::EmptyDictionary);
            }
            let xs = gather(x, pairs.iter().map(|p| p.0));
            let ys = gather(y, pairs.iter().map(|p| p.1));
            procrustes(src, dst, &xs, &ys)?
        }
    };

    let mut prev_pairs: Option<Vec<(usize, usize)>> = None;
    for _ in 0..iters {
        let xw = w.apply_rows(x);
        let dict = build_dictionary(&xw, y, k)?;
        if prev_pairs.as_ref() == Some(&dict.pairs) {
            break;
        }
        let xs = gather(x, dict.pairs.iter().map(|p| p.0));
        let ys = gather(y, dict.pairs.iter().map(|p| p.1));
        w = procrustes(src, dst, &xs, &ys)?;
        prev_pairs = Some(dict.pairs);
    }
    Ok(w)
}
