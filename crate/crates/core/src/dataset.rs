//! Labelled feature matrices.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{GrodError, Result};
use crate::scalar::Scalar;

/// `n × s` features with one 0-based hard label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch<T> {
    pub features: Array2<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> FeatureBatch<T> {
    pub fn new(features: Array2<T>, labels: Vec<usize>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(GrodError::LengthMismatch {
                left: features.nrows(),
                right: labels.len(),
            });
        }
        Ok(FeatureBatch { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        FeatureBatch {
            features: self.features.select(Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }

    pub fn concat(parts: &[&FeatureBatch<T>]) -> Result<Self> {
        let views: Vec<_> = parts.iter().map(|p| p.features.view()).collect();
        let features = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| GrodError::ShapeMismatch(e.to_string()))?;
        let labels = parts.iter().flat_map(|p| p.labels.iter().copied()).collect();
        Ok(FeatureBatch { features, labels })
    }

    /// Seeded split into `(rest, held_out)` with `round(n·fraction)` rows held out.
    pub fn split(&self, fraction: f64, seed: u64) -> (Self, Self) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let held = ((self.len() as f64) * fraction).round() as usize;
        let (h, r) = idx.split_at(held.min(self.len()));
        let mut h = h.to_vec();
        let mut r = r.to_vec();
        h.sort_unstable();
        r.sort_unstable();
        (self.select(&r), self.select(&h))
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for &l in &self.labels {
            if l < classes {
                counts[l] += 1;
            }
        }
        counts
    }
}
