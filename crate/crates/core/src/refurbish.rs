//! Refurbished training targets.
//!
//! A target is `w * observed + (1 - w) * pseudo`, where `pseudo` is the
//! temperature-sharpened average of two models' predictions and `w` is the
//! clean-label confidence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::LOG_EPS;
use crate::simplex::SoftLabel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(t: f64) -> Result<Self> {
        if t > 0.0 && t.is_finite() {
            Ok(Self(t))
        } else {
            Err(Error::Validation(format!("temperature must be positive, got {t}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Temperature {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

/// Coefficient of [`uniformity_reg`] in the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct RegWeight(f64);

impl RegWeight {
    pub fn new(lambda: f64) -> Result<Self> {
        if lambda >= 0.0 && lambda.is_finite() {
            Ok(Self(lambda))
        } else {
            Err(Error::Validation(format!(
                "regularization weight must be non-negative, got {lambda}"
            )))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for RegWeight {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<RegWeight> for f64 {
    fn from(r: RegWeight) -> f64 {
        r.0
    }
}

/// `p_i^(1/T) / sum_j p_j^(1/T)`, evaluated as a softmax of `ln(p) / T`.
pub fn sharpen(p: &SoftLabel, t: Temperature) -> SoftLabel {
    if t.0 == 1.0 {
        return p.clone();
    }
    let inv_t = 1.0 / t.0;
    let logs: Vec<f64> = p
        .probs()
        .iter()
        .map(|&v| if v > 0.0 { v.ln() * inv_t } else { f64::NEG_INFINITY })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    SoftLabel::normalized(exps)
}

/// Sharpened average of two predictions.
pub fn pseudo_label(p_self: &SoftLabel, p_peer: &SoftLabel, t: Temperature) -> Result<SoftLabel> {
    if p_self.classes() != p_peer.classes() {
        return Err(Error::Shape(format!(
            "predictions over {} and {} classes",
            p_self.classes(),
            p_peer.classes()
        )));
    }
    let avg: Vec<f64> = p_self
        .probs()
        .iter()
        .zip(p_peer.probs())
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    Ok(sharpen(&SoftLabel::normalized(avg), t))
}

/// `w * observed + (1 - w) * pseudo`. The boundaries `w = 0` and `w = 1`
/// return the corresponding input unchanged.
pub fn refurbish(observed: &SoftLabel, pseudo: &SoftLabel, w: f64) -> Result<SoftLabel> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Validation(format!("confidence {w} outside [0, 1]")));
    }
    if observed.classes() != pseudo.classes() {
        return Err(Error::Shape(format!(
            "observed label over {} classes, pseudo-label over {}",
            observed.classes(),
            pseudo.classes()
        )));
    }
    if w == 1.0 {
        return Ok(observed.clone());
    }
    if w == 0.0 {
        return Ok(pseudo.clone());
    }
    let mix = observed
        .probs()
        .iter()
        .zip(pseudo.probs())
        .map(|(o, p)| w * o + (1.0 - w) * p)
        .collect();
    Ok(SoftLabel::normalized(mix))
}

/// `KL(uniform || mean_pred) = sum_c (1/C) ln((1/C) / mean_pred_c)`, with
/// `mean_pred` clamped at `1e-12`. Zero iff the batch-mean prediction is uniform.
pub fn uniformity_reg(batch_mean_pred: &[f64]) -> f64 {
    let c = batch_mean_pred.len() as f64;
    let prior = 1.0 / c;
    let kl: f64 = batch_mean_pred
        .iter()
        .map(|m| prior * (prior / m.max(LOG_EPS)).ln())
        .sum();
    // rounding can leave a -1e-17 residue at the uniform point
    kl.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sl(v: &[f64]) -> SoftLabel {
        SoftLabel::new(v.to_vec()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    fn t(v: f64) -> Temperature {
        Temperature::new(v).unwrap()
    }

    #[test]
    fn sharpen_examples() {
        assert_eq!(sharpen(&sl(&[0.3, 0.7]), t(1.0)).probs(), &[0.3, 0.7]);
        // squares renormalized: 0.64 / 0.68, 0.04 / 0.68
        let s = sharpen(&sl(&[0.8, 0.2]), t(0.5));
        close(s.probs(), &[0.64 / 0.68, 0.04 / 0.68], 1e-12);
        close(s.probs(), &[0.9412, 0.0588], 1e-3);
        for c in 2..6 {
            for temp in [0.1, 0.5, 3.0] {
                let u = SoftLabel::uniform(c);
                close(sharpen(&u, t(temp)).probs(), u.probs(), 1e-12);
            }
        }
    }

    #[test]
    fn sharpen_handles_zero_entries() {
        let s = sharpen(&sl(&[0.0, 0.25, 0.75]), t(1.0 / 3.0));
        assert_eq!(s.probs()[0], 0.0);
        close(s.probs(), &[0.0, 1.0 / 28.0, 27.0 / 28.0], 1e-12);
    }

    #[test]
    fn pseudo_label_examples() {
        let e = SoftLabel::one_hot(1, 3);
        assert_eq!(pseudo_label(&e, &e, t(0.3)).unwrap().probs(), e.probs());
        let a = sl(&[0.6, 0.4]);
        let b = sl(&[0.2, 0.8]);
        close(pseudo_label(&a, &b, t(1.0)).unwrap().probs(), &[0.4, 0.6], 1e-12);
        // 0.16 / 0.52, 0.36 / 0.52
        let s = pseudo_label(&a, &b, t(0.5)).unwrap();
        close(s.probs(), &[0.16 / 0.52, 0.36 / 0.52], 1e-12);
        close(s.probs(), &[0.3077, 0.6923], 1e-3);
    }

    #[test]
    fn refurbish_examples() {
        let obs = SoftLabel::one_hot(0, 2);
        let pse = sl(&[0.2, 0.8]);
        assert_eq!(refurbish(&obs, &pse, 1.0).unwrap(), obs);
        assert_eq!(refurbish(&obs, &pse, 0.0).unwrap(), pse);
        close(refurbish(&obs, &pse, 0.7).unwrap().probs(), &[0.76, 0.24], 1e-12);
    }

    #[test]
    fn refurbish_rejects_bad_weight() {
        let obs = SoftLabel::one_hot(0, 2);
        assert!(refurbish(&obs, &obs, 1.5).is_err());
        assert!(refurbish(&obs, &obs, -0.1).is_err());
        assert!(refurbish(&obs, &obs, f64::NAN).is_err());
    }

    #[test]
    fn uniformity_reg_examples() {
        assert_eq!(uniformity_reg(&[0.25; 4]), 0.0);
        let want = 0.5 * ((0.5f64 / 0.9).ln() + (0.5f64 / 0.1).ln());
        assert!((uniformity_reg(&[0.9, 0.1]) - want).abs() < 1e-12);
        assert!((want - 0.5108).abs() < 1e-4);
    }

    #[test]
    fn uniformity_reg_grows_toward_vertex() {
        for c in [2usize, 3, 5] {
            for vertex in 0..c {
                let mut prev = -1.0;
                for step in 0..=50 {
                    let s = step as f64 / 51.0;
                    let m: Vec<f64> = (0..c)
                        .map(|k| {
                            let u = 1.0 / c as f64;
                            let v = if k == vertex { 1.0 } else { 0.0 };
                            (1.0 - s) * u + s * v
                        })
                        .collect();
                    let r = uniformity_reg(&m);
                    assert!(r > prev || (step == 0 && r == 0.0));
                    prev = r;
                }
            }
        }
    }

    #[test]
    fn newtypes_validate() {
        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(-1.0).is_err());
        assert!(RegWeight::new(-0.5).is_err());
        assert!(RegWeight::new(0.0).is_ok());
    }
}
