//! Pattern batches in bipolar or unit-box coordinates.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    /// Entries in {-1, +1}.
    Bipolar,
    /// Entries in [0, 1].
    UnitBox,
}

#[derive(Debug, Error, PartialEq)]
pub enum PatternError {
    #[error("pattern data length {len} is not a multiple of dimension {dim}")]
    Ragged { len: usize, dim: usize },
    #[error("value {value} at index {index} is outside the {domain:?} domain")]
    OutOfDomain { domain: Domain, index: usize, value: f64 },
    #[error("pattern dimension must be positive")]
    ZeroDim,
}

/// `N` patterns of dimension `d`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PatternBatch {
    domain: Domain,
    dim: usize,
    data: Vec<f64>,
}

impl PatternBatch {
    pub fn new(domain: Domain, dim: usize, data: Vec<f64>) -> Result<Self, PatternError> {
        if dim == 0 {
            return Err(PatternError::ZeroDim);
        }
        if data.len() % dim != 0 {
            return Err(PatternError::Ragged { len: data.len(), dim });
        }
        for (index, &value) in data.iter().enumerate() {
            let ok = match domain {
                Domain::Bipolar => value == 1.0 || value == -1.0,
                Domain::UnitBox => (0.0..=1.0).contains(&value),
            };
            if !ok {
                return Err(PatternError::OutOfDomain { domain, index, value });
            }
        }
        Ok(PatternBatch { domain, dim, data })
    }

    pub fn from_rows(domain: Domain, rows: &[Vec<f64>]) -> Result<Self, PatternError> {
        let dim = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != dim) {
            return Err(PatternError::Ragged { len: rows.iter().map(|r| r.len()).sum(), dim });
        }
        Self::new(domain, dim, rows.concat())
    }

    /// Uniform random bipolar patterns.
    pub fn random_bipolar<R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> Self {
        let data = (0..n * dim).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
        PatternBatch { domain: Domain::Bipolar, dim, data }
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Select a subset of rows.
    pub fn select(&self, idx: &[usize]) -> PatternBatch {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        PatternBatch { domain: self.domain, dim: self.dim, data }
    }

    /// Map {-1, +1} onto {0, 1}; unit-box batches are returned as is.
    pub fn to_unit_box(&self) -> PatternBatch {
        match self.domain {
            Domain::UnitBox => self.clone(),
            Domain::Bipolar => PatternBatch {
                domain: Domain::UnitBox,
                dim: self.dim,
                data: self.data.iter().map(|&s| bipolar_to_unit(s)).collect(),
            },
        }
    }
}

#[inline]
pub fn bipolar_to_unit(s: f64) -> f64 {
    0.5 * (s + 1.0)
}

/// Threshold a unit-box value at 0.5.
#[inline]
pub fn unit_to_bipolar(u: f64) -> f64 {
    if u >= 0.5 {
        1.0
    } else {
        -1.0
    }
}

/// Number of coordinates where the signs of two bipolar vectors differ.
pub fn hamming(a: &[f64], b: &[f64]) -> usize {
    a.iter().zip(b).filter(|(x, y)| (**x >= 0.0) != (**y >= 0.0)).count()
}
