//! Vectors, vector collections and the squared-Euclidean distance kernel.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense embedding with finite coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidValue("embedding must have at least one coordinate".into()));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!("non-finite coordinate at position {pos}")));
        }
        Ok(Embedding(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Embedding::new(values)
    }
}

impl TryFrom<&[f64]> for Embedding {
    type Error = Error;

    fn try_from(values: &[f64]) -> Result<Self> {
        Embedding::new(values.to_vec())
    }
}

/// Squared Euclidean distance. Never negative.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SquaredDistance(f64);

impl SquaredDistance {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_nan() || value < 0.0 {
            return Err(Error::Range(format!("squared distance must be >= 0, got {value}")));
        }
        Ok(SquaredDistance(value))
    }

    pub(crate) fn from_raw(value: f64) -> Self {
        debug_assert!(value >= 0.0);
        SquaredDistance(value)
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl fmt::Display for SquaredDistance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Row-major collection of same-dimension embeddings with unique ids.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    data: Vec<f64>,
    ids: Vec<String>,
}

impl EmbeddingSet {
    /// An empty set of the given dimension.
    pub fn empty(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidValue("dimension must be positive".into()));
        }
        Ok(EmbeddingSet { dim, data: Vec::new(), ids: Vec::new() })
    }

    /// Builds a set from a flat row-major buffer.
    pub fn from_flat(dim: usize, data: Vec<f64>, ids: Vec<String>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidValue("dimension must be positive".into()));
        }
        if data.len() != dim * ids.len() {
            return Err(Error::Dimension { expected: dim * ids.len(), actual: data.len() });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "non-finite coordinate in row {} (`{}`)",
                pos / dim,
                ids[pos / dim]
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::InvalidValue(format!("duplicate id `{id}`")));
            }
        }
        Ok(EmbeddingSet { dim, data, ids })
    }

    /// Builds a set from `(id, values)` rows.
    pub fn from_rows<I, S>(dim: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: Into<String>,
    {
        let mut data = Vec::new();
        let mut ids = Vec::new();
        for (id, row) in rows {
            if row.len() != dim {
                return Err(Error::Dimension { expected: dim, actual: row.len() });
            }
            data.extend_from_slice(&row);
            ids.push(id.into());
        }
        Self::from_flat(dim, data, ids)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn embedding(&self, i: usize) -> Embedding {
        Embedding(self.row(i).to_vec())
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = (&str, &[f64])> + '_ {
        self.ids.iter().map(String::as_str).zip(self.data.chunks_exact(self.dim))
    }

    /// A subset made of the given row indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Range(format!("row {i} out of {} rows", self.len())));
            }
            data.extend_from_slice(self.row(i));
            ids.push(self.ids[i].clone());
        }
        Self::from_flat(self.dim, data, ids)
    }

    /// Up to `max_rows` rows taken at an even stride, always including row 0.
    pub fn strided_sample(&self, max_rows: usize) -> Result<Self> {
        if max_rows == 0 || max_rows >= self.len() {
            return Ok(self.clone());
        }
        let n = self.len();
        let indices: Vec<usize> = (0..max_rows).map(|i| i * n / max_rows).collect();
        self.select(&indices)
    }
}

/// Squared Euclidean distance between two equal-length vectors.
pub fn squared_euclidean(a: &[f64], b: &[f64]) -> Result<SquaredDistance> {
    if a.len() != b.len() {
        return Err(Error::Dimension { expected: a.len(), actual: b.len() });
    }
    Ok(SquaredDistance(sq_dist(a, b)))
}

/// Unchecked kernel; callers guarantee equal lengths.
#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four independent accumulators so the loop vectorizes.
    let mut acc = [0.0f64; 4];
    let chunks_a = a.chunks_exact(4);
    let chunks_b = b.chunks_exact(4);
    let tail: f64 = chunks_a
        .remainder()
        .iter()
        .zip(chunks_b.remainder())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    for (ca, cb) in chunks_a.zip(chunks_b) {
        for j in 0..4 {
            let d = ca[j] - cb[j];
            acc[j] += d * d;
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}
