//! Feature-space augmentation: small Gaussian jitter for loss modelling and
//! pseudo-labelling, larger jitter plus coordinate masking for learning.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugPolicy {
    pub weak_sigma: f64,
    pub strong_sigma: f64,
    pub strong_mask_prob: f64,
}

impl Default for AugPolicy {
    fn default() -> Self {
        Self {
            weak_sigma: 0.05,
            strong_sigma: 0.3,
            strong_mask_prob: 0.1,
        }
    }
}

impl AugPolicy {
    /// No augmentation at all.
    pub fn none() -> Self {
        Self {
            weak_sigma: 0.0,
            strong_sigma: 0.0,
            strong_mask_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("weak_sigma", self.weak_sigma), ("strong_sigma", self.strong_sigma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Validation(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.strong_mask_prob) {
            return Err(Error::Validation(format!(
                "strong_mask_prob must be in [0, 1], got {}",
                self.strong_mask_prob
            )));
        }
        Ok(())
    }
}

/// Which transform a training step applies to its inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugMode {
    Weak,
    Strong,
}

fn jitter<R: Rng + ?Sized>(x: &mut [f64], sigma: f64, rng: &mut R) {
    if sigma == 0.0 {
        return;
    }
    for v in x {
        let z: f64 = StandardNormal.sample(rng);
        *v += sigma * z;
    }
}

pub fn weak_aug<R: Rng + ?Sized>(x: &[f64], policy: &AugPolicy, rng: &mut R) -> Vec<f64> {
    let mut out = x.to_vec();
    jitter(&mut out, policy.weak_sigma, rng);
    out
}

pub fn strong_aug<R: Rng + ?Sized>(x: &[f64], policy: &AugPolicy, rng: &mut R) -> Vec<f64> {
    let mut out = x.to_vec();
    jitter(&mut out, policy.strong_sigma, rng);
    if policy.strong_mask_prob > 0.0 {
        for v in &mut out {
            if rng.random::<f64>() < policy.strong_mask_prob {
                *v = 0.0;
            }
        }
    }
    out
}

/// Applies `mode` to every row.
pub fn augment_rows<R: Rng + ?Sized>(x: &Matrix, policy: &AugPolicy, mode: AugMode, rng: &mut R) -> Matrix {
    let mut data = Vec::with_capacity(x.as_slice().len());
    for row in x.iter_rows() {
        let aug = match mode {
            AugMode::Weak => weak_aug(row, policy, rng),
            AugMode::Strong => strong_aug(row, policy, rng),
        };
        data.extend(aug);
    }
    Matrix::from_vec(x.rows(), x.cols(), data).expect("augmentation keeps shape and finiteness")
}
