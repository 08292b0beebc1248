use super::{BankMode, CcpError, Result};
use crate::num::Tensor;
use std::collections::{BTreeMap, VecDeque};

const SHARED_KEY: &str = "*";
const NORM_TOL: f64 = 1e-6;

/// FIFO ring buffers of unit-norm embedding rows, tagged by language.
///
/// Pushing past capacity evicts the oldest row of that ring; queries return
/// the current fill in push order, detached from any gradient machinery.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    mode: BankMode,
    capacity: usize,
    dim: usize,
    rings: BTreeMap<String, VecDeque<Vec<f64>>>,
}

impl MemoryBank {
    pub fn new(mode: BankMode, capacity: usize, dim: usize) -> Self {
        MemoryBank {
            mode,
            capacity,
            dim,
            rings: BTreeMap::new(),
        }
    }

    pub fn mode(&self) -> BankMode {
        self.mode
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn key<'a>(&self, lang: &'a str) -> &'a str {
        match self.mode {
            BankMode::Shared => SHARED_KEY,
            _ => lang,
        }
    }

    /// Append rows for their languages, evicting FIFO past capacity.
    /// Rows must be unit-norm within 1e-6. A no-op in `Off` mode.
    pub fn push(&mut self, rows: &Tensor, langs: &[&str]) -> Result<()> {
        if self.mode == BankMode::Off || self.capacity == 0 {
            return Ok(());
        }
        let (r, c) = (rows.rows(), rows.cols());
        if c != self.dim {
            return Err(CcpError::InvalidConfig(format!(
                "bank dimension {} does not match rows of width {c}",
                self.dim
            )));
        }
        if langs.len() != r {
            return Err(CcpError::InvalidConfig(format!(
                "{r} rows but {} language tags",
                langs.len()
            )));
        }
        for i in 0..r {
            let row = rows.row(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > NORM_TOL {
                return Err(CcpError::NotNormalized {
                    row: i,
                    deviation: (norm - 1.0).abs(),
                });
            }
            let ring = self
                .rings
                .entry(self.key(langs[i]).to_string())
                .or_default();
            if ring.len() == self.capacity {
                ring.pop_front();
            }
            ring.push_back(row.to_vec());
        }
        Ok(())
    }

    /// Current fill for one language, oldest first, as a `[fill, dim]` matrix.
    pub fn negatives(&self, lang: &str) -> Tensor {
        if self.mode == BankMode::Off {
            return Tensor::zeros(vec![0, self.dim]);
        }
        match self.rings.get(self.key(lang)) {
            None => Tensor::zeros(vec![0, self.dim]),
            Some(ring) => {
                let mut data = Vec::with_capacity(ring.len() * self.dim);
                for row in ring {
                    data.extend_from_slice(row);
                }
                Tensor::new(vec![ring.len(), self.dim], data).unwrap()
            }
        }
    }

    pub fn fill(&self, lang: &str) -> usize {
        if self.mode == BankMode::Off {
            return 0;
        }
        self.rings.get(self.key(lang)).map_or(0, |r| r.len())
    }

    /// (language key, rows) pairs in deterministic key order.
    pub fn snapshot(&self) -> Vec<(String, Vec<Vec<f64>>)> {
        self.rings
            .iter()
            .map(|(k, ring)| (k.clone(), ring.iter().cloned().collect()))
            .collect()
    }

    pub fn restore(&mut self, snapshot: Vec<(String, Vec<Vec<f64>>)>) {
        self.rings = snapshot
            .into_iter()
            .map(|(k, rows)| (k, rows.into_iter().collect()))
            .collect();
    }
}
