//! Browser bindings for three small demos: label corruption on blobs, the
//! loss mixture after warm-up, and sharpen-then-refurbish on a single example.
//!
//! Each demo is a plain function returning a JSON string so it can be tested
//! natively; the `#[wasm_bindgen]` wrappers only convert errors.

use serde::Serialize;
use wasm_bindgen::prelude::wasm_bindgen;
use wasm_bindgen::JsValue;

use robust_lr::data::gen_blobs;
use robust_lr::loss_model::{confidence_all, fit_gmm_em, losses_from_probs, posterior_clean, EmConfig, Gmm2, LossVector};
use robust_lr::nn::predict_probs;
use robust_lr::noise::{corrupt_symmetric, effective_noise_rate};
use robust_lr::refurbish::{pseudo_label, refurbish, Temperature};
use robust_lr::simplex::SoftLabel;
use robust_lr::trainer::{warmup, Peer, TrainConfig};
use robust_lr::{Error, Result};

const HIST_BINS: usize = 40;
const CURVE_POINTS: usize = 101;

#[derive(Serialize)]
struct NoiseView {
    /// `[x, y, true, observed]` per point.
    points: Vec<(f64, f64, usize, usize)>,
    classes: usize,
    effective_rate: f64,
}

pub fn noise_json(classes: usize, per_class: usize, spread: f64, rate: f64, seed: u64) -> Result<String> {
    let ds = corrupt_symmetric(&gen_blobs(classes, per_class, 2, spread, seed)?, rate, seed.wrapping_add(1))?;
    let points = ds
        .features()
        .iter_rows()
        .zip(ds.true_labels().iter().zip(ds.observed_labels()))
        .map(|(x, (&t, &o))| (x[0], x[1], t, o))
        .collect();
    let view = NoiseView {
        points,
        classes,
        effective_rate: effective_noise_rate(&ds),
    };
    Ok(serde_json::to_string(&view).expect("serializable"))
}

#[derive(Serialize)]
struct MixtureView {
    /// Normalized-loss histograms split by whether the label is actually wrong.
    hist_clean: Vec<usize>,
    hist_noisy: Vec<usize>,
    /// Component densities and clean posterior on an even grid over `[0, 1]`.
    grid: Vec<f64>,
    density_clean: Vec<f64>,
    density_noisy: Vec<f64>,
    posterior: Vec<f64>,
    gmm: GmmView,
    effective_rate: f64,
    est_noise_fraction: f64,
}

#[derive(Serialize)]
struct GmmView {
    mean_clean: f64,
    mean_noisy: f64,
    var_clean: f64,
    var_noisy: f64,
    weight_clean: f64,
    iterations: usize,
    degenerate: bool,
}

fn density(mean: f64, var: f64, weight: f64, x: f64) -> f64 {
    weight * (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

fn histogram(values: impl Iterator<Item = f64>) -> Vec<usize> {
    let mut h = vec![0; HIST_BINS];
    for v in values {
        let b = ((v * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
        h[b] += 1;
    }
    h
}

/// Warms up one model on noisy blobs, then fits the two-component mixture to
/// its per-example losses.
pub fn mixture_json(rate: f64, warm_iters: usize, seed: u64) -> Result<String> {
    let clean = gen_blobs(4, 250, 2, 0.6, seed)?;
    let ds = corrupt_symmetric(&clean, rate, seed.wrapping_add(1))?;
    let cfg = TrainConfig {
        seed,
        hidden: vec![32, 32],
        ..TrainConfig::default()
    };
    let mut peer = Peer::new(2, 4, &cfg, 0);
    warmup(ds.noisy(), &mut peer, warm_iters, &cfg.sgd, &cfg.aug)?;
    let probs = predict_probs(&peer.params, ds.features())?;
    let losses = LossVector::from_raw(losses_from_probs(&probs, ds.observed_labels()))?;
    let gmm: Gmm2 = fit_gmm_em(&losses, EmConfig::default())?;
    let w = confidence_all(&gmm, &losses).w;

    let wrong: Vec<bool> = ds
        .observed_labels()
        .iter()
        .zip(ds.true_labels())
        .map(|(o, t)| o != t)
        .collect();
    let pick = |noisy: bool| {
        losses
            .normalized
            .iter()
            .zip(&wrong)
            .filter(move |(_, &w)| w == noisy)
            .map(|(&v, _)| v)
    };
    let grid: Vec<f64> = (0..CURVE_POINTS).map(|i| i as f64 / (CURVE_POINTS - 1) as f64).collect();
    let view = MixtureView {
        hist_clean: histogram(pick(false)),
        hist_noisy: histogram(pick(true)),
        density_clean: grid.iter().map(|&x| density(gmm.mean_clean, gmm.var_clean, gmm.weight_clean, x)).collect(),
        density_noisy: grid.iter().map(|&x| density(gmm.mean_noisy, gmm.var_noisy, gmm.weight_noisy, x)).collect(),
        posterior: grid.iter().map(|&x| posterior_clean(&gmm, x).clean).collect(),
        grid,
        gmm: GmmView {
            mean_clean: gmm.mean_clean,
            mean_noisy: gmm.mean_noisy,
            var_clean: gmm.var_clean,
            var_noisy: gmm.var_noisy,
            weight_clean: gmm.weight_clean,
            iterations: gmm.iterations,
            degenerate: gmm.degenerate,
        },
        effective_rate: effective_noise_rate(&ds),
        est_noise_fraction: w.iter().filter(|&&v| v < 0.5).count() as f64 / w.len() as f64,
    };
    Ok(serde_json::to_string(&view).expect("serializable"))
}

#[derive(Serialize)]
struct RefurbishView {
    pseudo: Vec<f64>,
    target: Vec<f64>,
}

/// Pseudo-label from two predictions and the refurbished target for an
/// example observed as `observed`.
pub fn refurbish_json(observed: usize, p_self: &[f64], p_peer: &[f64], w: f64, temperature: f64) -> Result<String> {
    let c = p_self.len();
    if observed >= c {
        return Err(Error::Validation(format!("observed class {observed} with {c} classes")));
    }
    let pseudo = pseudo_label(
        &SoftLabel::new(p_self.to_vec())?,
        &SoftLabel::new(p_peer.to_vec())?,
        Temperature::new(temperature)?,
    )?;
    let target = refurbish(&SoftLabel::one_hot(observed, c), &pseudo, w)?;
    let view = RefurbishView {
        pseudo: pseudo.into_inner(),
        target: target.into_inner(),
    };
    Ok(serde_json::to_string(&view).expect("serializable"))
}

fn js(r: Result<String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen(js_name = noiseDemo)]
pub fn noise_demo(classes: usize, per_class: usize, spread: f64, rate: f64, seed: u32) -> Result<String, JsValue> {
    js(noise_json(classes, per_class, spread, rate, seed.into()))
}

#[wasm_bindgen(js_name = mixtureDemo)]
pub fn mixture_demo(rate: f64, warm_iters: usize, seed: u32) -> Result<String, JsValue> {
    js(mixture_json(rate, warm_iters, seed.into()))
}

#[wasm_bindgen(js_name = refurbishDemo)]
pub fn refurbish_demo(observed: usize, p_self: &[f64], p_peer: &[f64], w: f64, temperature: f64) -> Result<String, JsValue> {
    js(refurbish_json(observed, p_self, p_peer, w, temperature))
}
