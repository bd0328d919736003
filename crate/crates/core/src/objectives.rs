//! Preference losses and the variational objective.
//!
//! Every loss exists twice: as a plain `f64` function for scoring and
//! testing, and as a graph builder for training. The graph builders reduce
//! over a batch with a mean.

use rand::Rng;

use crate::datagen::PreferencePair;
use crate::diffcore::{check_gradients, softplus, DiffError, GradReport, Graph, NodeId, Tensor};
use crate::distributions::{clamp_noise, GammaPrior};
use crate::model::{features_matrix, BnrmIds, BnrmModel, ModelError, Parameterized};

pub const DEFAULT_ETA: f64 = 1e-5;
pub const DEFAULT_MARGIN: f64 = 1.0;
pub const DEFAULT_SMOOTH_EPS: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ObjectiveError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("invalid loss parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// `−ln σ(r1 − r2)`.
pub fn bt_loss(r1: f64, r2: f64) -> f64 {
    softplus(-(r1 - r2))
}

/// `−ln σ(r1 − r2 − m)`.
pub fn bt_margin_loss(r1: f64, r2: f64, margin: f64) -> Result<f64, ObjectiveError> {
    PreferenceLoss::Margin(margin).validate()?;
    Ok(softplus(-(r1 - r2 - margin)))
}

/// `−(1−ε) ln σ(r1 − r2) − ε ln σ(r2 − r1)`.
pub fn bt_label_smooth_loss(r1: f64, r2: f64, eps: f64) -> Result<f64, ObjectiveError> {
    PreferenceLoss::LabelSmooth(eps).validate()?;
    let d = r1 - r2;
    Ok((1.0 - eps) * softplus(-d) + eps * softplus(d))
}

/// A pairwise loss on reward differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PreferenceLoss {
    Bt,
    Margin(f64),
    LabelSmooth(f64),
}

impl PreferenceLoss {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        match *self {
            PreferenceLoss::Bt => Ok(()),
            PreferenceLoss::Margin(m) if m.is_finite() && m >= 0.0 => Ok(()),
            PreferenceLoss::Margin(m) => Err(ObjectiveError::InvalidParameter(format!(
                "margin {m} must be finite and non-negative"
            ))),
            PreferenceLoss::LabelSmooth(e) if (0.0..0.5).contains(&e) => Ok(()),
            PreferenceLoss::LabelSmooth(e) => Err(ObjectiveError::InvalidParameter(format!(
                "smoothing {e} outside [0, 0.5)"
            ))),
        }
    }

    pub fn value(&self, r1: f64, r2: f64) -> Result<f64, ObjectiveError> {
        match *self {
            PreferenceLoss::Bt => Ok(bt_loss(r1, r2)),
            PreferenceLoss::Margin(m) => bt_margin_loss(r1, r2, m),
            PreferenceLoss::LabelSmooth(e) => bt_label_smooth_loss(r1, r2, e),
        }
    }

    /// Batch mean of the loss over matching reward nodes.
    pub fn node(&self, g: &mut Graph, r1: NodeId, r2: NodeId) -> Result<NodeId, DiffError> {
        let d = g.sub(r1, r2)?;
        let per_pair = match *self {
            PreferenceLoss::Bt => {
                let nd = g.neg(d)?;
                g.softplus(nd)?
            }
            PreferenceLoss::Margin(m) => {
                let shifted = g.add_scalar(d, -m)?;
                let nd = g.neg(shifted)?;
                g.softplus(nd)?
            }
            PreferenceLoss::LabelSmooth(e) => {
                let nd = g.neg(d)?;
                let fwd = g.softplus(nd)?;
                let fwd = g.mul_scalar(fwd, 1.0 - e)?;
                let back = g.softplus(d)?;
                let back = g.mul_scalar(back, e)?;
                g.add(fwd, back)?
            }
        };
        g.mean(per_pair)
    }
}

/// Components of one evaluation of the variational objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboBreakdown {
    pub bt_nll: f64,
    /// Batch mean of the summed `θ` KL over both responses of each pair.
    pub kl_theta: f64,
    /// KL of the global dictionary posterior, counted once.
    pub kl_phi: f64,
    pub eta: f64,
    pub total: f64,
}

/// Uniform noise for one reparameterized pass over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboNoise {
    /// `[B, K]`
    pub chosen: Tensor,
    /// `[B, K]`
    pub rejected: Tensor,
    /// `[K, 1]`
    pub phi: Tensor,
}

impl ElboNoise {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, batch: usize, k: usize) -> Self {
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| clamp_noise(rng.random::<f64>())).collect() };
        let chosen = draw(batch * k);
        let rejected = draw(batch * k);
        let phi = draw(k);
        Self {
            chosen: Tensor::matrix(batch, k, chosen).expect("sized"),
            rejected: Tensor::matrix(batch, k, rejected).expect("sized"),
            phi: Tensor::matrix(k, 1, phi).expect("sized"),
        }
    }
}

/// How `θ` and `Φ` enter the reward.
#[derive(Debug, Clone, Copy)]
pub enum Posterior<'a> {
    Sampled(&'a ElboNoise),
    /// Posterior means; no sampling.
    Mean,
}

#[derive(Debug, Clone, Copy)]
pub struct ElboNodes {
    pub total: NodeId,
    pub bt_nll: NodeId,
    pub kl_theta: NodeId,
    pub kl_phi: NodeId,
}

impl ElboNodes {
    pub fn breakdown(&self, g: &Graph, eta: f64) -> Result<ElboBreakdown, DiffError> {
        Ok(ElboBreakdown {
            bt_nll: g.value(self.bt_nll).item()?,
            kl_theta: g.value(self.kl_theta).item()?,
            kl_phi: g.value(self.kl_phi).item()?,
            eta,
            total: g.value(self.total).item()?,
        })
    }
}

/// Builds `bt_nll + η (KL_θ + KL_Φ)` for `[B, d_in]` chosen/rejected inputs.
pub fn elbo_nodes(
    g: &mut Graph,
    ids: &BnrmIds,
    x_chosen: NodeId,
    x_rejected: NodeId,
    posterior: Posterior<'_>,
    eta: f64,
) -> Result<ElboNodes, DiffError> {
    let batch = g.value(x_chosen).shape()[0];
    let prior = GammaPrior::default();
    let global = ids.head.infer_global(g)?;
    let phi = match posterior {
        Posterior::Sampled(noise) => global.sample(g, &noise.phi)?,
        Posterior::Mean => global.mean(g)?,
    };
    let mut rewards = [x_chosen; 2];
    let mut kls = [x_chosen; 2];
    for (i, x) in [x_chosen, x_rejected].into_iter().enumerate() {
        let z = ids.encode(g, x)?;
        let local = ids.head.infer_local(g, z)?;
        let theta = match posterior {
            Posterior::Sampled(noise) => local.sample(g, if i == 0 { &noise.chosen } else { &noise.rejected })?,
            Posterior::Mean => local.mean(g)?,
        };
        rewards[i] = ids.head.reward(g, theta, phi)?;
        kls[i] = local.kl(g, &prior)?;
    }
    let bt_nll = PreferenceLoss::Bt.node(g, rewards[0], rewards[1])?;
    let kl_sum = g.add(kls[0], kls[1])?;
    let b = g.scalar(batch as f64);
    let kl_theta = g.div(kl_sum, b)?;
    let kl_phi = global.kl(g, &prior)?;
    let kl = g.add(kl_theta, kl_phi)?;
    let weighted = g.mul_scalar(kl, eta)?;
    let total = g.add(bt_nll, weighted)?;
    Ok(ElboNodes {
        total,
        bt_nll,
        kl_theta,
        kl_phi,
    })
}

/// Chosen and rejected feature matrices for a batch.
pub fn pair_matrices(g: &mut Graph, batch: &[PreferencePair], d_in: usize) -> Result<(NodeId, NodeId), ModelError> {
    let chosen: Vec<&[f64]> = batch.iter().map(|p| p.features_chosen.as_slice()).collect();
    let rejected: Vec<&[f64]> = batch.iter().map(|p| p.features_rejected.as_slice()).collect();
    Ok((features_matrix(g, &chosen, d_in)?, features_matrix(g, &rejected, d_in)?))
}

fn check_inputs(batch: &[PreferencePair], eta: f64) -> Result<(), ObjectiveError> {
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    if !(eta.is_finite() && eta >= 0.0) {
        return Err(ObjectiveError::InvalidParameter(format!("eta {eta} must be finite and non-negative")));
    }
    Ok(())
}

/// One Monte-Carlo evaluation of the objective on `batch`.
pub fn elbo_loss<R: Rng + ?Sized>(
    batch: &[PreferencePair],
    model: &BnrmModel,
    eta: f64,
    rng: &mut R,
) -> Result<ElboBreakdown, ObjectiveError> {
    check_inputs(batch, eta)?;
    let noise = ElboNoise::sample(rng, batch.len(), model.head.k());
    elbo_loss_with(batch, model, eta, Posterior::Sampled(&noise))
}

/// [`elbo_loss`] with the noise (or mean substitution) chosen by the caller.
pub fn elbo_loss_with(
    batch: &[PreferencePair],
    model: &BnrmModel,
    eta: f64,
    posterior: Posterior<'_>,
) -> Result<ElboBreakdown, ObjectiveError> {
    check_inputs(batch, eta)?;
    let mut g = Graph::new();
    let ids = model.bind(&mut g, false);
    let (xc, xr) = pair_matrices(&mut g, batch, model.dims().d_in)?;
    let nodes = elbo_nodes(&mut g, &ids, xc, xr, posterior, eta)?;
    Ok(nodes.breakdown(&g, eta)?)
}

/// Finite-difference check of the objective's gradient with respect to every
/// model parameter, under fixed noise.
pub fn elbo_gradient_check(
    batch: &[PreferencePair],
    model: &BnrmModel,
    eta: f64,
    noise: &ElboNoise,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradReport, ObjectiveError> {
    check_inputs(batch, eta)?;
    let d_in = model.dims().d_in;
    let params: Vec<Tensor> = model.params().into_iter().cloned().collect();
    let loss = |g: &mut Graph, nodes: &[NodeId]| -> Result<NodeId, DiffError> {
        let ids = BnrmIds::from_nodes(nodes).map_err(|e| DiffError::ShapeMismatch(e.to_string()))?;
        let (xc, xr) = pair_matrices(g, batch, d_in).map_err(|e| DiffError::ShapeMismatch(e.to_string()))?;
        Ok(elbo_nodes(g, &ids, xc, xr, Posterior::Sampled(noise), eta)?.total)
    };
    Ok(check_gradients(loss, &params, epsilon, tolerance)?)
}

/// Distance from the nearest relu kink over one evaluation of the ELBO.
///
/// Only relu inputs that move when the parameters move are counted: inputs
/// pinned by a dead unit upstream never cross their kink. Inputs exactly on
/// a kink are left to the skip logic of the gradient check.
pub fn kink_distance(
    batch: &[PreferencePair],
    model: &BnrmModel,
    noise: &ElboNoise,
    eta: f64,
) -> Result<f64, ObjectiveError> {
    check_inputs(batch, eta)?;
    let relu_inputs = |m: &BnrmModel| -> Result<Vec<f64>, ObjectiveError> {
        let mut g = Graph::new();
        let ids = m.bind(&mut g, true);
        let (xc, xr) = pair_matrices(&mut g, batch, m.dims().d_in)?;
        elbo_nodes(&mut g, &ids, xc, xr, Posterior::Sampled(noise), eta)?;
        Ok(g.relu_inputs())
    };
    let base = relu_inputs(model)?;
    let mut nudged = model.clone();
    for (j, t) in nudged.params_mut().into_iter().enumerate() {
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            *v += sign * 1e-7 * (1 + (i * 7 + j) % 5) as f64;
        }
    }
    let moved = relu_inputs(&nudged)?;
    Ok(base
        .iter()
        .zip(&moved)
        .filter(|(b, m)| b != m && **b != 0.0)
        .fold(f64::INFINITY, |acc, (b, _)| acc.min(b.abs())))
}

/// First window of `width` consecutive pairs whose ELBO stays at least `gap`
/// away from every relu kink, so finite differences there are well posed.
pub fn conditioned_window<'a>(
    pairs: &'a [PreferencePair],
    width: usize,
    model: &BnrmModel,
    noise: &ElboNoise,
    eta: f64,
    gap: f64,
) -> Result<Option<&'a [PreferencePair]>, ObjectiveError> {
    for window in pairs.chunks_exact(width.max(1)) {
        if kink_distance(window, model, noise, eta)? >= gap {
            return Ok(Some(window));
        }
    }
    Ok(None)
}
