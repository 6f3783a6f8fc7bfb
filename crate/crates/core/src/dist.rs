use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the total mass of a categorical distribution.
pub const MASS_TOLERANCE: f64 = 1e-9;

/// A categorical next-token distribution over the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct NextTokenDistribution(Vec<f64>);

impl NextTokenDistribution {
    /// Wraps a probability vector, checking that it is non-negative, finite and sums to one.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::validation("distribution", "empty probability vector"));
        }
        if let Some(i) = probs.iter().position(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::validation(
                "distribution",
                format!("entry {i} is {} (must be finite and non-negative)", probs[i]),
            ));
        }
        let mass: f64 = probs.iter().sum();
        if (mass - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::validation(
                "distribution",
                format!("entries sum to {mass}, expected 1"),
            ));
        }
        Ok(Self(probs))
    }

    /// Numerically stable softmax of a logit vector.
    pub fn softmax(logits: &[f64]) -> Self {
        Self(softmax(logits))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Draws a token by inverse-CDF sampling.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_index(&self.0, rng)
    }
}

impl TryFrom<Vec<f64>> for NextTokenDistribution {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<NextTokenDistribution> for Vec<f64> {
    fn from(d: NextTokenDistribution) -> Self {
        d.0
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

/// Inverse-CDF draw from unnormalized non-negative weights.
///
/// Zero-weight entries are never returned.
pub(crate) fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        last_positive = i;
        acc += w;
        if target < acc {
            return i;
        }
    }
    last_positive
}
