//! Per-example losses and the two-component Gaussian mixture over them.
//!
//! Losses are min-max normalized to `[0, 1]` before EM. The component with the
//! smaller mean is the clean one; an example's confidence `w` is its posterior
//! under that component.

use rand::Rng;

use crate::data::NoisyDataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{predict_probs, MlpParams, LOG_EPS};
use crate::trainer::augment::{augment_rows, AugMode, AugPolicy};

pub const VAR_FLOOR: f64 = 1e-6;

const LN_TAU: f64 = 1.837_877_066_409_345_5; // ln(2 pi)

#[derive(Debug, Clone, PartialEq)]
pub struct LossVector {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl LossVector {
    /// Min-max normalizes `raw`; if every loss is equal the normalized vector is all zero.
    pub fn from_raw(raw: Vec<f64>) -> Result<Self> {
        if let Some(v) = raw.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::NonFinite(format!("per-example loss {v}")));
        }
        let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let normalized = if max > min {
            let span = max - min;
            raw.iter().map(|v| (v - min) / span).collect()
        } else {
            vec![0.0; raw.len()]
        };
        Ok(Self { raw, normalized })
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

/// Cross-entropy between each one-hot label and the matching probability row.
pub fn losses_from_probs(probs: &Matrix, labels: &[usize]) -> Vec<f64> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs.get(i, y).max(LOG_EPS).ln())
        .collect()
}

/// Losses of `params` against the observed labels on weakly augmented inputs.
pub fn per_example_loss<R: Rng + ?Sized>(
    params: &MlpParams,
    ds: &NoisyDataset,
    aug: &AugPolicy,
    rng: &mut R,
) -> Result<LossVector> {
    if ds.is_empty() {
        return Err(Error::Validation("cannot model losses of an empty dataset".into()));
    }
    let x = augment_rows(ds.features(), aug, AugMode::Weak, rng);
    let probs = predict_probs(params, &x)?;
    LossVector::from_raw(losses_from_probs(&probs, ds.labels()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 100,
        }
    }
}

/// Two-component 1-D Gaussian mixture, sorted so `mean_clean <= mean_noisy`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gmm2 {
    pub mean_clean: f64,
    pub mean_noisy: f64,
    pub var_clean: f64,
    pub var_noisy: f64,
    pub weight_clean: f64,
    pub weight_noisy: f64,
    pub converged: bool,
    pub iterations: usize,
    pub final_log_likelihood: f64,
    /// The fit cannot separate the data (all values equal, or a component
    /// lost all of its mass). Posteriors fall back to 0.5.
    pub degenerate: bool,
}

#[derive(Clone, Copy)]
struct Component {
    mean: f64,
    var: f64,
    weight: f64,
}

impl Component {
    #[inline]
    fn log_joint(&self, x: f64) -> f64 {
        let d = x - self.mean;
        self.weight.ln() - 0.5 * (LN_TAU + self.var.ln()) - d * d / (2.0 * self.var)
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[inline]
fn log_add(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Responsibilities of component 0 and the total log-likelihood.
fn e_step(values: &[f64], comps: &[Component; 2], resp: &mut [f64]) -> f64 {
    let mut ll = 0.0;
    for (r, &x) in resp.iter_mut().zip(values) {
        let a = comps[0].log_joint(x);
        let b = comps[1].log_joint(x);
        let lse = log_add(a, b);
        ll += lse;
        *r = (a - lse).exp();
    }
    ll
}

fn m_step(values: &[f64], resp: &[f64], comps: &mut [Component; 2]) {
    let n = values.len() as f64;
    for (k, comp) in comps.iter_mut().enumerate() {
        let r = |i: usize| if k == 0 { resp[i] } else { 1.0 - resp[i] };
        let nk: f64 = (0..values.len()).map(r).sum();
        comp.weight = nk / n;
        if nk <= 0.0 {
            continue;
        }
        let mean = values.iter().enumerate().map(|(i, x)| r(i) * x).sum::<f64>() / nk;
        let var = values
            .iter()
            .enumerate()
            .map(|(i, x)| r(i) * (x - mean).powi(2))
            .sum::<f64>()
            / nk;
        comp.mean = mean;
        comp.var = var.max(VAR_FLOOR);
    }
}

fn finish(comps: [Component; 2], converged: bool, iterations: usize, ll: f64) -> Gmm2 {
    let [a, b] = comps;
    let (clean, noisy) = if a.mean <= b.mean { (a, b) } else { (b, a) };
    let degenerate = clean.mean == noisy.mean
        || clean.weight < 1e-12
        || noisy.weight < 1e-12
        || !ll.is_finite();
    Gmm2 {
        mean_clean: clean.mean,
        mean_noisy: noisy.mean,
        var_clean: clean.var,
        var_noisy: noisy.var,
        weight_clean: clean.weight,
        weight_noisy: 1.0 - clean.weight,
        converged: converged && !degenerate,
        iterations,
        final_log_likelihood: ll,
        degenerate,
    }
}

/// EM on arbitrary values, returning the fit and the log-likelihood after
/// initialization and after every M-step.
///
/// Initialization: means at the 10th and 90th percentiles, both variances at
/// the overall variance, equal weights. Stops when an iteration improves the
/// log-likelihood by less than `cfg.tol`.
pub fn fit_gmm_traced(values: &[f64], cfg: EmConfig) -> Result<(Gmm2, Vec<f64>)> {
    if values.len() < 4 {
        return Err(Error::Validation(format!(
            "mixture fit needs at least 4 values, got {}",
            values.len()
        )));
    }
    if !(cfg.tol > 0.0) {
        return Err(Error::Validation(format!("tolerance must be positive, got {}", cfg.tol)));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("mixture input {v}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = (values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).max(VAR_FLOOR);

    let mut comps = [
        Component {
            mean: percentile(&sorted, 0.1),
            var,
            weight: 0.5,
        },
        Component {
            mean: percentile(&sorted, 0.9),
            var,
            weight: 0.5,
        },
    ];
    let mut resp = vec![0.0; values.len()];
    let mut ll = e_step(values, &comps, &mut resp);
    let mut trace = vec![ll];

    if sorted[0] == sorted[sorted.len() - 1] {
        return Ok((finish(comps, false, 0, ll), trace));
    }

    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        m_step(values, &resp, &mut comps);
        iterations += 1;
        let next = e_step(values, &comps, &mut resp);
        trace.push(next);
        let gain = next - ll;
        ll = next;
        if gain < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok((finish(comps, converged, iterations, ll), trace))
}

/// EM on the normalized losses.
pub fn fit_gmm_em(losses: &LossVector, cfg: EmConfig) -> Result<Gmm2> {
    fit_gmm_traced(&losses.normalized, cfg).map(|(g, _)| g)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posterior {
    pub clean: f64,
    /// Set when the mixture was degenerate and `clean` is the 0.5 fallback.
    pub fallback: bool,
}

impl Posterior {
    pub fn noisy(&self) -> f64 {
        1.0 - self.clean
    }
}

/// Posterior probability that `value` came from the smaller-mean component.
pub fn posterior_clean(gmm: &Gmm2, value: f64) -> Posterior {
    if gmm.degenerate {
        return Posterior {
            clean: 0.5,
            fallback: true,
        };
    }
    let a = Component {
        mean: gmm.mean_clean,
        var: gmm.var_clean,
        weight: gmm.weight_clean,
    }
    .log_joint(value);
    let b = Component {
        mean: gmm.mean_noisy,
        var: gmm.var_noisy,
        weight: gmm.weight_noisy,
    }
    .log_joint(value);
    // logistic of the log-odds, written to avoid overflow on either side
    let d = b - a;
    let clean = if d > 0.0 {
        let e = (-d).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + d.exp())
    };
    Posterior {
        clean,
        fallback: false,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceVector {
    pub w: Vec<f64>,
    pub fallback: bool,
}

impl ConfidenceVector {
    pub fn constant(w: f64, n: usize) -> Self {
        Self {
            w: vec![w; n],
            fallback: false,
        }
    }
}

/// Posterior of every normalized loss.
pub fn confidence_all(gmm: &Gmm2, losses: &LossVector) -> ConfidenceVector {
    let w = losses
        .normalized
        .iter()
        .map(|&l| posterior_clean(gmm, l).clean)
        .collect();
    ConfidenceVector {
        w,
        fallback: gmm.degenerate,
    }
}

/// Raw losses to confidences in one call.
pub fn estimate_confidence(raw: Vec<f64>, cfg: EmConfig) -> Result<(ConfidenceVector, Gmm2, LossVector)> {
    let losses = LossVector::from_raw(raw)?;
    let gmm = fit_gmm_em(&losses, cfg)?;
    Ok((confidence_all(&gmm, &losses), gmm, losses))
}
