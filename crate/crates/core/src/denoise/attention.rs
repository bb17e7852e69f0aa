//! Per-layer, per-head attention maps captured from or injected into a denoiser.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-sum tolerance for the row-stochastic invariant.
pub const ROW_SUM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    /// Queries over latent positions, keys over prompt tokens.
    Cross,
    /// Queries and keys over latent positions.
    #[serde(rename = "self")]
    SelfAttn,
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttentionKind::Cross => f.write_str("cross"),
            AttentionKind::SelfAttn => f.write_str("self"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LayerKey {
    pub layer: u32,
    pub kind: AttentionKind,
}

impl LayerKey {
    pub fn new(layer: u32, kind: AttentionKind) -> Self {
        Self { layer, kind }
    }
}

/// Attention weights laid out `[head][query][key]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    heads: usize,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl AttentionMap {
    pub fn new(heads: usize, rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if heads * rows * cols != data.len() || heads == 0 || rows == 0 || cols == 0 {
            return Err(Error::ShapeMismatch {
                expected: vec![heads, rows, cols],
                found: vec![data.len()],
            });
        }
        Ok(Self {
            heads,
            rows,
            cols,
            data,
        })
    }

    /// Every row set to `row`.
    pub fn from_row(heads: usize, rows: usize, row: &[f64]) -> Result<Self> {
        let data = (0..heads * rows).flat_map(|_| row.iter().copied()).collect();
        Self::new(heads, rows, row.len(), data)
    }

    pub fn uniform(heads: usize, rows: usize, cols: usize) -> Self {
        Self {
            heads,
            rows,
            cols,
            data: vec![1.0 / cols as f64; heads * rows * cols],
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.heads, self.rows, self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, head: usize, query: usize) -> &[f64] {
        let start = (head * self.rows + query) * self.cols;
        &self.data[start..start + self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn check_same_shape(&self, other: &AttentionMap) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::ShapeMismatch {
                expected: self.dims().to_vec(),
                found: other.dims().to_vec(),
            });
        }
        Ok(())
    }

    pub fn check_row_stochastic(&self, tol: f64) -> Result<()> {
        for (i, row) in self.row_iter().enumerate() {
            if let Some(v) = row.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
                return Err(Error::InvariantViolation(format!(
                    "row {i} has invalid weight {v}"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > tol {
                return Err(Error::InvariantViolation(format!(
                    "row {i} sums to {sum}, not 1"
                )));
            }
        }
        Ok(())
    }
}

/// A set of attention maps keyed by (layer id, kind).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionMaps {
    maps: BTreeMap<LayerKey, AttentionMap>,
}

impl AttentionMaps {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: LayerKey, map: AttentionMap) {
        self.maps.insert(key, map);
    }

    pub fn get(&self, key: LayerKey) -> Option<&AttentionMap> {
        self.maps.get(&key)
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LayerKey, &AttentionMap)> {
        self.maps.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = LayerKey> + '_ {
        self.maps.keys().copied()
    }

    pub fn layers(&self, kind: AttentionKind) -> Vec<u32> {
        self.keys().filter(|k| k.kind == kind).map(|k| k.layer).collect()
    }

    /// Maps of `kind`, optionally restricted to an inclusive layer range.
    pub fn select(&self, kind: AttentionKind, layers: Option<RangeInclusive<u32>>) -> AttentionMaps {
        let maps = self
            .maps
            .iter()
            .filter(|(k, _)| k.kind == kind && layers.as_ref().is_none_or(|r| r.contains(&k.layer)))
            .map(|(k, m)| (*k, m.clone()))
            .collect();
        AttentionMaps { maps }
    }

    pub fn check_row_stochastic(&self, tol: f64) -> Result<()> {
        for (k, m) in &self.maps {
            m.check_row_stochastic(tol).map_err(|e| match e {
                Error::InvariantViolation(msg) => {
                    Error::InvariantViolation(format!("layer {} {}: {msg}", k.layer, k.kind))
                }
                other => other,
            })?;
        }
        Ok(())
    }

    /// Both sets cover the same keys with matching map shapes.
    pub fn check_same_layout(&self, other: &AttentionMaps) -> Result<()> {
        if self.maps.len() != other.maps.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.maps.len()],
                found: vec![other.maps.len()],
            });
        }
        for (k, m) in &self.maps {
            let o = other.maps.get(k).ok_or_else(|| {
                Error::InvariantViolation(format!("layer {} {} missing", k.layer, k.kind))
            })?;
            m.check_same_shape(o)?;
        }
        Ok(())
    }
}

impl FromIterator<(LayerKey, AttentionMap)> for AttentionMaps {
    fn from_iter<I: IntoIterator<Item = (LayerKey, AttentionMap)>>(iter: I) -> Self {
        Self {
            maps: iter.into_iter().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_stochastic_rows() {
        let m = AttentionMap::new(1, 2, 2, vec![0.5, 0.5, 0.7, 0.2]).unwrap();
        assert!(m.check_row_stochastic(ROW_SUM_TOL).is_err());
        let m = AttentionMap::new(1, 1, 2, vec![1.5, -0.5]).unwrap();
        assert!(m.check_row_stochastic(ROW_SUM_TOL).is_err());
        assert!(AttentionMap::uniform(2, 3, 4).check_row_stochastic(ROW_SUM_TOL).is_ok());
    }

    #[test]
    fn select_by_kind_and_range() {
        let maps: AttentionMaps = (1..=16)
            .flat_map(|l| {
                [AttentionKind::Cross, AttentionKind::SelfAttn]
                    .map(|k| (LayerKey::new(l, k), AttentionMap::uniform(1, 2, 2)))
            })
            .collect();
        let sel = maps.select(AttentionKind::SelfAttn, Some(4..=14));
        assert_eq!(sel.len(), 11);
        assert_eq!(sel.layers(AttentionKind::SelfAttn), (4..=14).collect::<Vec<_>>());
        assert_eq!(maps.select(AttentionKind::Cross, None).len(), 16);
    }
}
