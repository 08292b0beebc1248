use super::{NumError, Result};

/// A dense, row-major tensor of 64-bit floats.
///
/// The invariant `product(shape) == data.len()` is enforced by every
/// constructor. Values are not checked for finiteness on construction;
/// call [`Tensor::validate_finite`] to surface NaN/Inf as a hard error.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NumError::ShapeMismatch {
                expected: shape.clone(),
                got: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    /// A fresh 2-D tensor from nested rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(NumError::Invalid("ragged rows".into()));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a 2-D matrix.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Number of columns when viewed as a 2-D matrix.
    pub fn cols(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[1]
        } else if self.shape.len() == 1 {
            1
        } else {
            self.data.len() / self.rows().max(1)
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Hard error on any NaN or infinity, naming the offending entry.
    pub fn validate_finite(&self, context: &str) -> Result<()> {
        for (i, &v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(NumError::NonFinite {
                    context: context.to_string(),
                    index: i,
                    value: v,
                });
            }
        }
        Ok(())
    }

    /// Euclidean norm of the whole tensor viewed as a flat vector.
    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Rows rescaled to unit Euclidean norm. Errors on a zero row, naming it.
    pub fn l2_normalize_rows(&self) -> Result<Tensor> {
        let (r, c) = (self.rows(), self.cols());
        let mut out = self.data.clone();
        for i in 0..r {
            let row = &self.data[i * c..(i + 1) * c];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(NumError::ZeroRow { row: i });
            }
            for j in 0..c {
                out[i * c + j] = row[j] / norm;
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor { shape: vec![c, r], data: out }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match_data_len() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn validate_finite_names_the_entry() {
        let t = Tensor::new(vec![3], vec![1.0, f64::NAN, 2.0]).unwrap();
        let err = t.validate_finite("unit").unwrap_err();
        match err {
            NumError::NonFinite { index, .. } => assert_eq!(index, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn l2_normalize_rows_examples() {
        let t = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let n = t.l2_normalize_rows().unwrap();
        assert_eq!(n.data(), &[0.6, 0.8]);

        // idempotence on already unit-norm input
        let again = n.l2_normalize_rows().unwrap();
        for (a, b) in again.data().iter().zip(n.data()) {
            assert!((a - b).abs() < 1e-12);
        }

        let t = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, -5.0]]).unwrap();
        let n = t.l2_normalize_rows().unwrap();
        assert_eq!(n.data(), &[1.0, 0.0, 0.0, -1.0]);
    }

    #[test]
    fn l2_normalize_zero_row_names_the_row() {
        let t = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        match t.l2_normalize_rows().unwrap_err() {
            NumError::ZeroRow { row } => assert_eq!(row, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
