use serde::{Deserialize, Serialize};

use super::corpus::Corpus;
use crate::error::{Error, Result};

/// Per-objective affine standardization `(y - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(m: usize) -> Self {
        Normalizer {
            mean: vec![0.0; m],
            std: vec![1.0; m],
        }
    }

    /// Statistics of the annotated records. A constant objective keeps unit scale.
    pub fn fit(corpus: &Corpus) -> Result<Self> {
        let (mean, std) = corpus
            .property_stats()
            .ok_or_else(|| Error::EmptyCorpus("no annotated records to fit property statistics".into()))?;
        let std = std.into_iter().map(|s| if s > 1e-12 { s } else { 1.0 }).collect();
        Ok(Normalizer { mean, std })
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    fn check(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.len() {
            return Err(Error::ObjectiveMismatch {
                expected: self.len(),
                got: y.len(),
            });
        }
        Ok(())
    }

    pub fn normalize(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check(y)?;
        Ok(y.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect())
    }

    pub fn denormalize(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check(y)?;
        Ok(y.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| v * s + m)
            .collect())
    }
}
