//! Warm-up followed by rounds of confidence estimation, pseudo-labelling,
//! refurbishment and training, for two peer models.
//!
//! Within a round, model `m` gets its confidences from the losses of model
//! `1 - m`, its pseudo-labels from the sharpened average of both models, and
//! then trains for `round_iters` steps on strongly augmented inputs against the
//! refurbished targets. The ablation switches in [`AblationFlags`] replace
//! each of those pieces.
//!
//! Nothing in this module can see ground-truth labels: every entry point takes
//! a [`NoisyDataset`]. Evaluation happens through the [`RoundObserver`] hook.

pub mod augment;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{augment_rows, strong_aug, weak_aug, AugMode, AugPolicy};

use crate::data::NoisyDataset;
use crate::error::{Error, Result};
use crate::loss_model::{
    confidence_all, fit_gmm_em, losses_from_probs, ConfidenceVector, EmConfig, Gmm2, LossVector,
};
use crate::matrix::Matrix;
use crate::nn::{predict_probs, train_batch, Activation, MlpParams, OptState, SgdConfig};
use crate::refurbish::{pseudo_label, refurbish, sharpen, RegWeight, Temperature};
use crate::simplex::SoftLabel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfidenceSource {
    /// Losses under the other model.
    Peer,
    /// Losses under the model being trained.
    #[serde(rename = "self")]
    Own,
    /// Losses under the averaged prediction of both models.
    Ensemble,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PseudoSource {
    Ensemble,
    #[serde(rename = "self")]
    Own,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    /// Off: the target is the observed label when `w >= 0.5`, else the pseudo-label.
    pub use_refurbishment: bool,
    /// Off: training steps use the weak transform.
    pub use_strong_aug: bool,
    /// Off: every example gets `fixed_confidence`.
    pub use_gmm: bool,
    /// Off: a single model plays both roles.
    pub use_cotrain: bool,
    pub confidence_source: ConfidenceSource,
    pub pseudo_source: PseudoSource,
    /// Confidence used when `use_gmm` is off.
    pub fixed_confidence: f64,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_refurbishment: true,
            use_strong_aug: true,
            use_gmm: true,
            use_cotrain: true,
            confidence_source: ConfidenceSource::Peer,
            pseudo_source: PseudoSource::Ensemble,
            fixed_confidence: 0.5,
        }
    }
}

/// The two hyper-parameter sets: light noise uses `T = 1, lambda = 2`, heavy
/// noise `T = 1/3, lambda = 10`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Light,
    Heavy,
    Custom,
}

impl Preset {
    /// `(temperature, reg_weight)`, or `None` for custom.
    pub fn values(self) -> Option<(Temperature, RegWeight)> {
        match self {
            Preset::Light => Some((Temperature::new(1.0).unwrap(), RegWeight::new(2.0).unwrap())),
            Preset::Heavy => Some((Temperature::new(1.0 / 3.0).unwrap(), RegWeight::new(10.0).unwrap())),
            Preset::Custom => None,
        }
    }

    /// Light up to 80% symmetric noise, heavy above.
    pub fn for_noise_rate(rate: f64) -> Self {
        if rate <= 0.8 {
            Preset::Light
        } else {
            Preset::Heavy
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub warm_iters: usize,
    pub round_iters: usize,
    pub rounds: usize,
    pub temperature: Temperature,
    pub reg_weight: RegWeight,
    pub sgd: SgdConfig,
    pub aug: AugPolicy,
    pub ablation: AblationFlags,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let (temperature, reg_weight) = Preset::Light.values().unwrap();
        Self {
            warm_iters: 300,
            round_iters: 300,
            rounds: 20,
            temperature,
            reg_weight,
            sgd: SgdConfig::default(),
            aug: AugPolicy::default(),
            ablation: AblationFlags::default(),
            hidden: vec![64, 64],
            activation: Activation::Relu,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        self.aug.validate()?;
        let w = self.ablation.fixed_confidence;
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::Validation(format!("fixed_confidence {w} outside [0, 1]")));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Validation("hidden layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn with_preset(mut self, preset: Preset) -> Self {
        if let Some((t, r)) = preset.values() {
            self.temperature = t;
            self.reg_weight = r;
        }
        self
    }

    pub fn model_count(&self) -> usize {
        if self.ablation.use_cotrain {
            2
        } else {
            1
        }
    }

    /// SGD steps each model takes over a full run.
    pub fn total_steps(&self) -> usize {
        self.warm_iters + self.rounds * self.round_iters
    }
}

/// One model with its optimizer state and random streams.
#[derive(Debug, Clone)]
pub struct Peer {
    pub params: MlpParams,
    opt: OptState,
    /// Batch order and training-time augmentation.
    train_rng: ChaCha8Rng,
    /// Weak views for loss modelling and pseudo-labelling.
    view_rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    steps: usize,
}

impl Peer {
    pub fn new(input_dim: usize, class_count: usize, config: &TrainConfig, index: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(config.seed);
            r.set_stream(3 * index + k);
            r
        };
        let params = MlpParams::random(
            input_dim,
            &config.hidden,
            class_count,
            config.activation,
            &mut stream(0),
        );
        Self {
            opt: OptState::new(&params),
            params,
            train_rng: stream(1),
            view_rng: stream(2),
            order: Vec::new(),
            cursor: 0,
            steps: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn next_batch(&mut self, n: usize, batch: usize) -> Vec<usize> {
        let mut idx = Vec::with_capacity(batch.min(n));
        while idx.len() < batch.min(n) {
            if self.cursor >= self.order.len() {
                self.order = (0..n).collect();
                self.order.shuffle(&mut self.train_rng);
                self.cursor = 0;
            }
            idx.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        idx
    }

    /// `iters` SGD steps on mini-batches of `(aug(x_i), targets[i])`.
    pub fn train_steps(
        &mut self,
        features: &Matrix,
        targets: &[SoftLabel],
        iters: usize,
        mode: AugMode,
        aug: &AugPolicy,
        sgd: &SgdConfig,
        reg_weight: f64,
    ) -> Result<()> {
        let n = features.rows();
        if n == 0 || iters == 0 {
            self.steps += iters;
            return Ok(());
        }
        for _ in 0..iters {
            let idx = self.next_batch(n, sgd.batch_size);
            let x = augment_rows(&features.select_rows(&idx), aug, mode, &mut self.train_rng);
            let t: Vec<SoftLabel> = idx.iter().map(|&i| targets[i].clone()).collect();
            train_batch(&mut self.params, &x, &t, sgd, reg_weight, &mut self.opt).map_err(|e| {
                Error::NonFinite(format!("step {} of model training: {e}", self.steps))
            })?;
            self.steps += 1;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CotrainState {
    pub peers: Vec<Peer>,
    pub round: usize,
    pub degenerate_gmm_count: usize,
    probe_rng: ChaCha8Rng,
}

impl CotrainState {
    pub fn new(input_dim: usize, class_count: usize, config: &TrainConfig) -> Self {
        let peers = (0..config.model_count() as u64)
            .map(|m| Peer::new(input_dim, class_count, config, m))
            .collect();
        let mut probe_rng = ChaCha8Rng::seed_from_u64(config.seed);
        probe_rng.set_stream(1000);
        Self {
            peers,
            round: 0,
            degenerate_gmm_count: 0,
            probe_rng,
        }
    }

    /// Class probabilities of model `m` on clean inputs.
    pub fn model_probs(&self, m: usize, x: &Matrix) -> Result<Matrix> {
        predict_probs(&self.peers[m].params, x)
    }

    /// Average of all models' probabilities on clean inputs.
    pub fn ensemble_probs(&self, x: &Matrix) -> Result<Matrix> {
        let mut acc = self.model_probs(0, x)?;
        for m in 1..self.peers.len() {
            let p = self.model_probs(m, x)?;
            acc.as_mut_slice().iter_mut().zip(p.as_slice()).for_each(|(a, b)| *a += b);
        }
        let k = self.peers.len() as f64;
        acc.as_mut_slice().iter_mut().for_each(|a| *a /= k);
        Ok(acc)
    }
}

fn one_hot_targets(ds: &NoisyDataset) -> Vec<SoftLabel> {
    ds.labels()
        .iter()
        .map(|&y| SoftLabel::one_hot(y, ds.class_count()))
        .collect()
}

/// `iters` steps on the observed one-hot labels with weak augmentation.
pub fn warmup(ds: &NoisyDataset, peer: &mut Peer, iters: usize, sgd: &SgdConfig, aug: &AugPolicy) -> Result<()> {
    let targets = one_hot_targets(ds);
    peer.train_steps(ds.features(), &targets, iters, AugMode::Weak, aug, sgd, 0.0)
}

fn row_label(m: &Matrix, i: usize) -> SoftLabel {
    SoftLabel::normalized(m.row(i).to_vec())
}

fn mean_probs(a: &Matrix, b: &Matrix) -> Matrix {
    let data = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| 0.5 * (x + y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

/// Confidence estimate handed to one model for one round.
#[derive(Debug, Clone)]
pub struct ConfidenceEstimate {
    pub confidence: ConfidenceVector,
    pub losses: LossVector,
    /// `None` when the mixture was bypassed.
    pub gmm: Option<Gmm2>,
}

impl ConfidenceEstimate {
    pub fn degenerate(&self) -> bool {
        self.gmm.is_some_and(|g| g.degenerate)
    }
}

/// Confidences from per-example losses of the chosen source model(s).
pub fn estimate_confidence(
    probs_self: &Matrix,
    probs_peer: &Matrix,
    labels: &[usize],
    flags: &AblationFlags,
) -> Result<ConfidenceEstimate> {
    let source = match (flags.use_cotrain, flags.confidence_source) {
        (false, _) | (true, ConfidenceSource::Own) => losses_from_probs(probs_self, labels),
        (true, ConfidenceSource::Peer) => losses_from_probs(probs_peer, labels),
        (true, ConfidenceSource::Ensemble) => losses_from_probs(&mean_probs(probs_self, probs_peer), labels),
    };
    let losses = LossVector::from_raw(source)?;
    if !flags.use_gmm {
        return Ok(ConfidenceEstimate {
            confidence: ConfidenceVector::constant(flags.fixed_confidence, labels.len()),
            losses,
            gmm: None,
        });
    }
    let gmm = fit_gmm_em(&losses, EmConfig::default())?;
    Ok(ConfidenceEstimate {
        confidence: confidence_all(&gmm, &losses),
        losses,
        gmm: Some(gmm),
    })
}

/// Training targets for one model: pseudo-labels from the configured source,
/// mixed with the observed labels by `w`.
pub fn round_targets(
    labels: &[usize],
    class_count: usize,
    probs_self: &Matrix,
    probs_peer: &Matrix,
    w: &[f64],
    flags: &AblationFlags,
    temperature: Temperature,
) -> Result<Vec<SoftLabel>> {
    let ensemble = flags.use_cotrain && flags.pseudo_source == PseudoSource::Ensemble;
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let own = row_label(probs_self, i);
            let pseudo = if ensemble {
                pseudo_label(&own, &row_label(probs_peer, i), temperature)?
            } else {
                sharpen(&own, temperature)
            };
            let observed = SoftLabel::one_hot(y, class_count);
            if flags.use_refurbishment {
                refurbish(&observed, &pseudo, w[i])
            } else if w[i] >= 0.5 {
                Ok(observed)
            } else {
                Ok(pseudo)
            }
        })
        .collect()
}

/// What one round produced for each model, indexed like `state.peers`.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub estimates: Vec<ConfidenceEstimate>,
}

/// Probabilities of model `m` and its peer on one shared weak view.
fn weak_view_probs(state: &mut CotrainState, m: usize, ds: &NoisyDataset, aug: &AugPolicy, probe: bool) -> Result<(Matrix, Matrix)> {
    let peer = if state.peers.len() > 1 { 1 - m } else { m };
    let rng = if probe {
        &mut state.probe_rng
    } else {
        &mut state.peers[m].view_rng
    };
    let view = augment_rows(ds.features(), aug, AugMode::Weak, rng);
    let own = predict_probs(&state.peers[m].params, &view)?;
    let other = if peer == m {
        own.clone()
    } else {
        predict_probs(&state.peers[peer].params, &view)?
    };
    Ok((own, other))
}

/// Confidences model `m` would receive now, without training. Draws its weak
/// view from a dedicated stream so training randomness is unaffected.
pub fn probe_confidence(state: &mut CotrainState, m: usize, ds: &NoisyDataset, config: &TrainConfig) -> Result<ConfidenceEstimate> {
    let (own, other) = weak_view_probs(state, m, ds, &config.aug, true)?;
    estimate_confidence(&own, &other, ds.labels(), &config.ablation)
}

pub fn train_round(state: &mut CotrainState, ds: &NoisyDataset, config: &TrainConfig) -> Result<RoundOutcome> {
    let round = state.round + 1;
    let mut estimates = Vec::with_capacity(state.peers.len());
    let mode = if config.ablation.use_strong_aug {
        AugMode::Strong
    } else {
        AugMode::Weak
    };
    for m in 0..state.peers.len() {
        let (own, other) = weak_view_probs(state, m, ds, &config.aug, false)?;
        let est = estimate_confidence(&own, &other, ds.labels(), &config.ablation)
            .map_err(|e| Error::NonFinite(format!("round {round}, model {m}: {e}")))?;
        if est.degenerate() {
            state.degenerate_gmm_count += 1;
        }
        let targets = round_targets(
            ds.labels(),
            ds.class_count(),
            &own,
            &other,
            &est.confidence.w,
            &config.ablation,
            config.temperature,
        )?;
        state.peers[m]
            .train_steps(
                ds.features(),
                &targets,
                config.round_iters,
                mode,
                &config.aug,
                &config.sgd,
                config.reg_weight.get(),
            )
            .map_err(|e| Error::NonFinite(format!("round {round}, model {m}: {e}")))?;
        estimates.push(est);
    }
    state.round = round;
    Ok(RoundOutcome { estimates })
}

/// State handed to the observer after warm-up (`round == 0`) and after each round.
pub struct Snapshot<'a> {
    pub round: usize,
    pub state: &'a CotrainState,
    /// The confidence estimate for model 0: the one it trained on this round,
    /// or a probe after warm-up.
    pub estimate: &'a ConfidenceEstimate,
    /// A degenerate mixture occurred for some model this round.
    pub degenerate_gmm: bool,
}

pub trait RoundObserver {
    fn observe(&mut self, snapshot: &Snapshot<'_>) -> Result<()>;
}

impl<F: FnMut(&Snapshot<'_>) -> Result<()>> RoundObserver for F {
    fn observe(&mut self, snapshot: &Snapshot<'_>) -> Result<()> {
        self(snapshot)
    }
}

/// Warm-up, then `config.rounds` rounds, reporting to `observer` after each phase.
pub fn run(ds: &NoisyDataset, config: &TrainConfig, observer: &mut dyn RoundObserver) -> Result<CotrainState> {
    config.validate()?;
    if ds.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let mut state = CotrainState::new(ds.dim(), ds.class_count(), config);
    for peer in &mut state.peers {
        warmup(ds, peer, config.warm_iters, &config.sgd, &config.aug)?;
    }
    let probe = probe_confidence(&mut state, 0, ds, config)?;
    observer.observe(&Snapshot {
        round: 0,
        state: &state,
        estimate: &probe,
        degenerate_gmm: probe.degenerate(),
    })?;
    for _ in 0..config.rounds {
        let outcome = train_round(&mut state, ds, config)?;
        let degenerate = outcome.estimates.iter().any(ConfidenceEstimate::degenerate);
        observer.observe(&Snapshot {
            round: state.round,
            state: &state,
            estimate: &outcome.estimates[0],
            degenerate_gmm: degenerate,
        })?;
    }
    Ok(state)
}

/// Ordinary training of one model on the observed labels for the same number
/// of steps a full run takes, with weak augmentation and no regularizer.
pub fn train_supervised(ds: &NoisyDataset, config: &TrainConfig) -> Result<MlpParams> {
    config.validate()?;
    let mut peer = Peer::new(ds.dim(), ds.class_count(), config, 0);
    warmup(ds, &mut peer, config.total_steps(), &config.sgd, &config.aug)?;
    Ok(peer.params)
}
