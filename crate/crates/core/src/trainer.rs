//! Mini-batch training with Adam, a warmup-plus-cosine schedule and
//! global-norm gradient clipping.
//!
//! One run draws from three independent streams of its seed: stream 0
//! initializes the model, stream 1 shuffles the data each epoch and stream 2
//! supplies the reparameterization noise. Same seed, same bytes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::datagen::{PreferenceDataset, PreferencePair};
use crate::diffcore::{DiffError, Graph, NodeId, Tensor};
use crate::eval::{fmt_g9, EvalError, Response, Scorer};
use crate::model::{BnrmIds, BnrmModel, BtIds, BtModel, ModelDims, ModelError, Parameterized, RewardModel};
use crate::objectives::{
    elbo_nodes, pair_matrices, ElboNoise, ObjectiveError, Posterior, PreferenceLoss, DEFAULT_ETA, DEFAULT_MARGIN,
    DEFAULT_SMOOTH_EPS,
};

pub const LOG_HEADER: &str = "step,loss,bt_nll,kl_theta,kl_phi,val_acc";

const STREAM_SHUFFLE: u64 = 1;
const STREAM_NOISE: u64 = 2;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{0} dataset is empty")]
    EmptyDataset(&'static str),
    #[error("feature dimension mismatch: {what} has d_in {got}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite {what} at step {step} (loss {loss})")]
    NonFinite { step: usize, what: &'static str, loss: f64 },
    #[error(transparent)]
    Data(#[from] crate::datagen::DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TrainError {
    /// Whether the run failed by producing non-finite numbers.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainError::NonFinite { .. }
                | TrainError::Diff(DiffError::NonFinite(_))
                | TrainError::Objective(ObjectiveError::Diff(DiffError::NonFinite(_)))
                | TrainError::Model(ModelError::Diff(DiffError::NonFinite(_)))
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Bnrm,
    Bt,
    BtMargin,
    BtLabelsmooth,
    BtEnsemble,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Bnrm => "bnrm",
            Method::Bt => "bt",
            Method::BtMargin => "bt_margin",
            Method::BtLabelsmooth => "bt_labelsmooth",
            Method::BtEnsemble => "bt_ensemble",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub eta: f64,
    pub k: usize,
    pub d_model: usize,
    pub seed: u64,
    pub ensemble_size: usize,
    pub margin: f64,
    pub smooth_eps: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub clip_norm: f64,
    pub checkpoint_path: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Bnrm,
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            eta: DEFAULT_ETA,
            k: crate::model::DEFAULT_K,
            d_model: crate::model::DEFAULT_D_MODEL,
            seed: 0,
            ensemble_size: 3,
            margin: DEFAULT_MARGIN,
            smooth_eps: DEFAULT_SMOOTH_EPS,
            weight_decay: 0.0,
            warmup_ratio: 0.03,
            clip_norm: 5.0,
            checkpoint_path: None,
            log_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.epochs == 0 || self.batch_size == 0 || self.k == 0 || self.d_model == 0 {
            return bad("epochs, batch_size, k and d_model must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return bad(format!("eta {} must be non-negative", self.eta));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad(format!("warmup_ratio {} outside [0, 1)", self.warmup_ratio));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad(format!("clip_norm {} must be positive", self.clip_norm));
        }
        if self.method == Method::BtEnsemble && self.ensemble_size == 0 {
            return bad("ensemble_size must be positive".into());
        }
        self.preference_loss().validate()?;
        Ok(())
    }

    /// The pairwise loss used by the BT-family methods.
    pub fn preference_loss(&self) -> PreferenceLoss {
        match self.method {
            Method::BtMargin => PreferenceLoss::Margin(self.margin),
            Method::BtLabelsmooth => PreferenceLoss::LabelSmooth(self.smooth_eps),
            _ => PreferenceLoss::Bt,
        }
    }

    pub fn dims(&self, d_in: usize) -> ModelDims {
        ModelDims {
            d_in,
            d_model: self.d_model,
            k: self.k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub bt_nll: f64,
    pub kl_theta: f64,
    pub kl_phi: f64,
    /// Held-out accuracy, on the last step of each epoch only.
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn epoch_accuracies(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.val_acc).collect()
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.val_acc)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{LOG_HEADER}\n");
        for r in &self.records {
            let acc = r.val_acc.map_or(String::new(), fmt_g9);
            let _ = writeln!(
                out,
                "{},{},{},{},{},{acc}",
                r.step,
                fmt_g9(r.loss),
                fmt_g9(r.bt_nll),
                fmt_g9(r.kl_theta),
                fmt_g9(r.kl_phi)
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), std::io::Error> {
        std::fs::write(path, self.to_csv())
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[&Tensor], weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

/// One bias-corrected Adam update with optional decoupled weight decay.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::InvalidConfig(format!(
            "adam: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(DiffError::ShapeMismatch(format!(
                "gradient {:?} for parameter {:?}",
                g.shape(),
                p.shape()
            ))
            .into());
        }
    }
    state.t += 1;
    let c1 = 1.0 - state.beta1.powi(state.t as i32);
    let c2 = 1.0 - state.beta2.powi(state.t as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
            let step = (m[j] / c1) / ((v[j] / c2).sqrt() + state.eps);
            *w -= lr * (step + state.weight_decay * *w);
        }
    }
    Ok(())
}

/// Linear warmup over the first `warmup_ratio` of steps, cosine decay after.
pub fn learning_rate_at(step: usize, total: usize, base: f64, warmup_ratio: f64) -> f64 {
    let warmup = ((total as f64) * warmup_ratio).ceil() as usize;
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

/// Fraction of pairs whose chosen response scores higher; ties count half.
pub fn evaluate_accuracy<S: Scorer + ?Sized>(scorer: &S, dataset: &PreferenceDataset) -> Result<f64, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset("evaluation"));
    }
    fn response(features: &[f64], length: u32) -> Response<'_> {
        Response {
            features,
            length,
            gold: None,
        }
    }
    let chosen: Vec<Response<'_>> = dataset
        .pairs
        .iter()
        .map(|p| response(&p.features_chosen, p.length_chosen))
        .collect();
    let rejected: Vec<Response<'_>> = dataset
        .pairs
        .iter()
        .map(|p| response(&p.features_rejected, p.length_rejected))
        .collect();
    let rc = scorer.score(&chosen)?;
    let rr = scorer.score(&rejected)?;
    let mut correct = 0.0;
    for (a, b) in rc.iter().zip(&rr) {
        if a > b {
            correct += 1.0;
        } else if a == b {
            correct += 0.5;
        }
    }
    Ok(correct / dataset.len() as f64)
}

/// Loss values of one step, before the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub bt_nll: f64,
    pub kl_theta: f64,
    pub kl_phi: f64,
}

/// A model that can build its training loss over a batch.
pub trait Trainable: Parameterized + Clone {
    /// Builds the loss from parameter nodes bound in [`Parameterized::params`] order.
    fn loss_nodes(
        &self,
        g: &mut Graph,
        params: &[NodeId],
        batch: &[PreferencePair],
        rng: &mut ChaCha8Rng,
    ) -> Result<(NodeId, [NodeId; 3]), TrainError>;

    fn to_reward_model(&self) -> RewardModel;
}

/// BNRM trained on the variational objective.
#[derive(Debug, Clone)]
pub struct BnrmTrainee {
    pub model: BnrmModel,
    pub eta: f64,
}

impl Parameterized for BnrmTrainee {
    fn param_names(&self) -> Vec<String> {
        self.model.param_names()
    }
    fn params(&self) -> Vec<&Tensor> {
        self.model.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.model.params_mut()
    }
}

impl Trainable for BnrmTrainee {
    fn loss_nodes(
        &self,
        g: &mut Graph,
        params: &[NodeId],
        batch: &[PreferencePair],
        rng: &mut ChaCha8Rng,
    ) -> Result<(NodeId, [NodeId; 3]), TrainError> {
        let ids = BnrmIds::from_nodes(params)?;
        let (xc, xr) = pair_matrices(g, batch, self.model.dims().d_in)?;
        let noise = ElboNoise::sample(rng, batch.len(), self.model.head.k());
        let n = elbo_nodes(g, &ids, xc, xr, Posterior::Sampled(&noise), self.eta)?;
        Ok((n.total, [n.bt_nll, n.kl_theta, n.kl_phi]))
    }

    fn to_reward_model(&self) -> RewardModel {
        RewardModel::Bnrm(self.model.clone())
    }
}

/// Scalar-head model trained on a pairwise loss.
#[derive(Debug, Clone)]
pub struct BtTrainee {
    pub model: BtModel,
    pub loss: PreferenceLoss,
}

impl Parameterized for BtTrainee {
    fn param_names(&self) -> Vec<String> {
        self.model.param_names()
    }
    fn params(&self) -> Vec<&Tensor> {
        self.model.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.model.params_mut()
    }
}

impl Trainable for BtTrainee {
    fn loss_nodes(
        &self,
        g: &mut Graph,
        params: &[NodeId],
        batch: &[PreferencePair],
        _rng: &mut ChaCha8Rng,
    ) -> Result<(NodeId, [NodeId; 3]), TrainError> {
        let ids = BtIds::from_nodes(params)?;
        let (xc, xr) = pair_matrices(g, batch, self.model.d_in())?;
        let rc = ids.reward(g, xc)?;
        let rr = ids.reward(g, xr)?;
        let loss = self.loss.node(g, rc, rr)?;
        // plain BT likelihood reported alongside whatever loss is optimized
        let nll = PreferenceLoss::Bt.node(g, rc, rr)?;
        let zero = g.scalar(0.0);
        Ok((loss, [nll, zero, zero]))
    }

    fn to_reward_model(&self) -> RewardModel {
        RewardModel::Bt(self.model.clone())
    }
}

/// Evaluates the loss on `batch` and returns it with the parameter gradients.
pub fn loss_and_gradients<M: Trainable>(
    model: &M,
    batch: &[PreferencePair],
    rng: &mut ChaCha8Rng,
) -> Result<(StepLoss, Vec<Tensor>), TrainError> {
    let mut g = Graph::new();
    let nodes: Vec<NodeId> = model.params().into_iter().map(|t| g.param(t.clone())).collect();
    let (total, [bt, kt, kp]) = model.loss_nodes(&mut g, &nodes, batch, rng)?;
    let loss = StepLoss {
        total: g.value(total).item()?,
        bt_nll: g.value(bt).item()?,
        kl_theta: g.value(kt).item()?,
        kl_phi: g.value(kp).item()?,
    };
    if !loss.total.is_finite() {
        return Ok((loss, Vec::new()));
    }
    let grads = g.backward(total)?;
    Ok((loss, nodes.iter().map(|&id| grads.get(id)).collect()))
}

/// Progress hooks for long runs.
pub trait TrainObserver {
    fn on_epoch(&mut self, _member: usize, _epoch: usize, _val_acc: f64) {}
}

impl TrainObserver for () {}

/// Trains one model in place, appending to `log` with step numbers
/// continuing from its current length.
pub fn fit<M: Trainable>(
    model: &mut M,
    cfg: &TrainConfig,
    seed: u64,
    train_set: &PreferenceDataset,
    val_set: &PreferenceDataset,
    log: &mut TrainLog,
    on_epoch: &mut dyn FnMut(usize, f64),
) -> Result<(), TrainError> {
    let n = train_set.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle_rng.set_stream(STREAM_SHUFFLE);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(STREAM_NOISE);
    let mut adam = AdamState::new(&model.params(), cfg.weight_decay);
    let step0 = log.records.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let local_step = epoch * steps_per_epoch + b;
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train_set.pairs[i].clone()));
            let (loss, mut grads) = loss_and_gradients(model, &batch, &mut noise_rng)?;
            if !loss.total.is_finite() {
                return Err(TrainError::NonFinite {
                    step: step0 + local_step,
                    what: "loss",
                    loss: loss.total,
                });
            }
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFinite {
                    step: step0 + local_step,
                    what: "gradient",
                    loss: loss.total,
                });
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            let lr = learning_rate_at(local_step, total_steps, cfg.learning_rate, cfg.warmup_ratio);
            adam_step(&mut model.params_mut(), &grads, &mut adam, lr)?;
            log.records.push(StepRecord {
                step: step0 + local_step,
                loss: loss.total,
                bt_nll: loss.bt_nll,
                kl_theta: loss.kl_theta,
                kl_phi: loss.kl_phi,
                val_acc: None,
            });
        }
        let acc = evaluate_accuracy(&model.to_reward_model(), val_set)?;
        if let Some(last) = log.records.last_mut() {
            last.val_acc = Some(acc);
        }
        on_epoch(epoch, acc);
    }
    Ok(())
}

fn check_datasets(train_set: &PreferenceDataset, val_set: &PreferenceDataset) -> Result<usize, TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset("training"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptyDataset("validation"));
    }
    let d_in = train_set.d_in()?;
    let got = val_set.d_in()?;
    if got != d_in {
        return Err(TrainError::DimensionMismatch {
            what: "validation set",
            expected: d_in,
            got,
        });
    }
    Ok(d_in)
}

/// Trains the configured method. Ensemble member `i` uses seed `seed + i`
/// and its log steps continue after the previous member's.
///
/// Writes the checkpoint and log CSV when the config names paths.
pub fn train(
    cfg: &TrainConfig,
    train_set: &PreferenceDataset,
    val_set: &PreferenceDataset,
) -> Result<(Checkpoint, TrainLog), TrainError> {
    train_with_observer(cfg, train_set, val_set, &mut ())
}

pub fn train_with_observer(
    cfg: &TrainConfig,
    train_set: &PreferenceDataset,
    val_set: &PreferenceDataset,
    observer: &mut dyn TrainObserver,
) -> Result<(Checkpoint, TrainLog), TrainError> {
    cfg.validate()?;
    let d_in = check_datasets(train_set, val_set)?;
    let dims = cfg.dims(d_in);
    let mut log = TrainLog::default();
    let members = match cfg.method {
        Method::Bnrm => {
            let mut t = BnrmTrainee {
                model: BnrmModel::init(dims, cfg.seed)?,
                eta: cfg.eta,
            };
            fit(&mut t, cfg, cfg.seed, train_set, val_set, &mut log, &mut |e, a| {
                observer.on_epoch(0, e, a)
            })?;
            vec![t.to_reward_model()]
        }
        Method::Bt | Method::BtMargin | Method::BtLabelsmooth | Method::BtEnsemble => {
            let count = if cfg.method == Method::BtEnsemble { cfg.ensemble_size } else { 1 };
            let mut members = Vec::with_capacity(count);
            for i in 0..count {
                let seed = cfg.seed.wrapping_add(i as u64);
                let mut t = BtTrainee {
                    model: BtModel::init(dims, seed)?,
                    loss: cfg.preference_loss(),
                };
                fit(&mut t, cfg, seed, train_set, val_set, &mut log, &mut |e, a| {
                    observer.on_epoch(i, e, a)
                })?;
                members.push(t.to_reward_model());
            }
            members
        }
    };
    let checkpoint = Checkpoint::new(cfg, dims, members)?;
    if let Some(path) = &cfg.checkpoint_path {
        checkpoint.save(path)?;
    }
    if let Some(path) = &cfg.log_path {
        log.write_csv(path)?;
    }
    Ok((checkpoint, log))
}
