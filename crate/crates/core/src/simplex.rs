//! Probability vectors over `C` classes.

use crate::error::{Error, Result};

/// Tolerance on `|sum - 1|` accepted by [`SoftLabel::new`].
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A categorical distribution: entries `>= 0` summing to 1 within [`SIMPLEX_TOL`].
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabel(Vec<f64>);

impl SoftLabel {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Validation("soft label has no classes".into()));
        }
        if let Some(v) = probs.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Validation(format!(
                "soft label entry {v} is not a probability"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Validation(format!("soft label sums to {sum}")));
        }
        Ok(Self(probs))
    }

    /// Divides by the sum. Used after arithmetic that should land on the
    /// simplex up to rounding.
    pub(crate) fn normalized(mut probs: Vec<f64>) -> Self {
        let sum: f64 = probs.iter().sum();
        debug_assert!(sum > 0.0 && sum.is_finite());
        if sum != 1.0 {
            probs.iter_mut().for_each(|p| *p /= sum);
        }
        Self(probs)
    }

    pub fn one_hot(class: usize, classes: usize) -> Self {
        assert!(class < classes, "class {class} out of range for {classes}");
        let mut v = vec![0.0; classes];
        v[class] = 1.0;
        Self(v)
    }

    pub fn uniform(classes: usize) -> Self {
        assert!(classes > 0);
        Self(vec![1.0 / classes as f64; classes])
    }

    #[inline]
    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    #[inline]
    pub fn classes(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest entry; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn entropy(&self) -> f64 {
        -self
            .0
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
