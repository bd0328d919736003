//! Weibull posteriors, Gamma priors, and the Weibull‖Gamma KL.
//!
//! Every quantity that enters the training loss has two implementations
//! here: a plain `f64` one and a graph one (`*_node`). They perform the same
//! floating-point operations in the same order, so recomputing a KL outside
//! the graph reproduces the training value bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::special::{gamma, lgamma, EULER_GAMMA};
use crate::diffcore::{DiffError, Graph, NodeId, Tensor};

/// Floor applied to Weibull scales sourced from a ReLU (exact zeros are expected).
pub const SCALE_FLOOR: f64 = 1e-6;
/// Uniform noise is clamped to `[NOISE_CLAMP, 1 - NOISE_CLAMP]`.
pub const NOISE_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DistError {
    #[error("invalid distribution parameters: {0}")]
    InvalidParams(String),
    #[error("uniform noise {0} is outside (0, 1)")]
    NoiseOutOfRange(f64),
    #[error("length mismatch: {0} parameters, {1} noise values")]
    LengthMismatch(usize, usize),
    #[error("Monte-Carlo KL needs at least 10000 samples, got {0}")]
    TooFewSamples(usize),
}

/// Shape/scale parameters of a factorized Weibull distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeibullParams {
    kappa: Vec<f64>,
    lambda: Vec<f64>,
}

impl WeibullParams {
    pub fn new(kappa: Vec<f64>, lambda: Vec<f64>) -> Result<Self, DistError> {
        if kappa.len() != lambda.len() {
            return Err(DistError::InvalidParams(format!(
                "{} shapes vs {} scales",
                kappa.len(),
                lambda.len()
            )));
        }
        if let Some(v) = kappa.iter().chain(&lambda).find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(DistError::InvalidParams(format!(
                "entry {v} is not positive and finite"
            )));
        }
        Ok(Self { kappa, lambda })
    }

    /// Single-element convenience constructor.
    pub fn scalar(kappa: f64, lambda: f64) -> Result<Self, DistError> {
        Self::new(vec![kappa], vec![lambda])
    }

    pub fn kappa(&self) -> &[f64] {
        &self.kappa
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn len(&self) -> usize {
        self.kappa.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kappa.is_empty()
    }
}

/// Gamma prior with shape `alpha` and rate `beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for GammaPrior {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0 }
    }
}

impl GammaPrior {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, DistError> {
        if !(alpha.is_finite() && alpha > 0.0 && beta.is_finite() && beta > 0.0) {
            return Err(DistError::InvalidParams(format!(
                "Gamma({alpha}, {beta}) needs positive finite shape and rate"
            )));
        }
        Ok(Self { alpha, beta })
    }

    /// `-γ - 1 - α ln β + ln Γ(α)`, the parameter-free part of the KL.
    fn kl_constant(&self) -> f64 {
        -EULER_GAMMA - 1.0 - self.alpha * self.beta.ln() + lgamma(self.alpha)
    }

    pub fn log_density(&self, x: f64) -> f64 {
        self.alpha * self.beta.ln() - lgamma(self.alpha) + (self.alpha - 1.0) * x.ln() - self.beta * x
    }
}

pub fn clamp_noise(u: f64) -> f64 {
    u.clamp(NOISE_CLAMP, 1.0 - NOISE_CLAMP)
}

/// `ln(-ln(1 - u))`, the parameter-free part of the reparameterized draw.
fn log_exponential_quantile(u: f64) -> Result<f64, DistError> {
    if !(NOISE_CLAMP..=1.0 - NOISE_CLAMP).contains(&u) {
        return Err(DistError::NoiseOutOfRange(u));
    }
    Ok((-(-u).ln_1p()).ln())
}

/// Reparameterized Weibull draw `λ (−ln(1−u))^{1/κ}`.
pub fn weibull_sample(params: &WeibullParams, u: &[f64]) -> Result<Vec<f64>, DistError> {
    if u.len() != params.len() {
        return Err(DistError::LengthMismatch(params.len(), u.len()));
    }
    params
        .kappa
        .iter()
        .zip(&params.lambda)
        .zip(u)
        .map(|((&k, &l), &u)| Ok(l * (log_exponential_quantile(u)? / k).exp()))
        .collect()
}

/// Weibull mean `λ Γ(1 + 1/κ)`.
pub fn weibull_mean(params: &WeibullParams) -> Vec<f64> {
    params
        .kappa
        .iter()
        .zip(&params.lambda)
        .map(|(&k, &l)| l * gamma(1.0 / k + 1.0))
        .collect()
}

pub fn weibull_log_density(kappa: f64, lambda: f64, x: f64) -> f64 {
    let z = x / lambda;
    kappa.ln() - lambda.ln() + (kappa - 1.0) * z.ln() - z.powf(kappa)
}

/// Per-element KL(Weibull(κ, λ) ‖ Gamma(α, β)):
/// `γα/κ − α ln λ + ln κ + βλΓ(1+1/κ) − γ − 1 − α ln β + ln Γ(α)`.
pub fn kl_weibull_gamma_elementwise(q: &WeibullParams, p: &GammaPrior) -> Vec<f64> {
    let c1 = EULER_GAMMA * p.alpha;
    let c0 = p.kl_constant();
    q.kappa
        .iter()
        .zip(&q.lambda)
        .map(|(&k, &l)| {
            let a = c1 / k;
            let b = l.ln() * -p.alpha;
            let lk = k.ln();
            let d = l * gamma(1.0 / k + 1.0) * p.beta;
            a + b + lk + d + c0
        })
        .collect()
}

/// Summed closed-form KL over all elements.
pub fn kl_weibull_gamma(q: &WeibullParams, p: &GammaPrior) -> f64 {
    kl_weibull_gamma_elementwise(q, p).iter().fold(0.0, |s, &v| s + v)
}

/// Monte-Carlo estimate of the summed KL with its standard error.
pub fn kl_monte_carlo(
    q: &WeibullParams,
    p: &GammaPrior,
    n: usize,
    seed: u64,
) -> Result<(f64, f64), DistError> {
    if n < 10_000 {
        return Err(DistError::TooFewSamples(n));
    }
    if q.is_empty() {
        return Err(DistError::InvalidParams("no elements".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for i in 0..n {
        let mut log_ratio = 0.0;
        for (&k, &l) in q.kappa.iter().zip(&q.lambda) {
            let u = clamp_noise(rng.random::<f64>());
            let x = l * (log_exponential_quantile(u)? / k).exp();
            log_ratio += weibull_log_density(k, l, x) - p.log_density(x);
        }
        // Welford
        let delta = log_ratio - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (log_ratio - mean);
    }
    let var = m2 / (n - 1) as f64;
    Ok((mean, (var / n as f64).sqrt()))
}

/// Graph form of [`weibull_sample`]; `kappa` and `lambda` share `u`'s shape.
pub fn weibull_sample_node(
    g: &mut Graph,
    kappa: NodeId,
    lambda: NodeId,
    u: &Tensor,
) -> Result<NodeId, DiffError> {
    let w: Vec<f64> = u
        .data()
        .iter()
        .map(|&v| log_exponential_quantile(v))
        .collect::<Result<_, _>>()
        .map_err(|e| DiffError::Domain {
            op: "weibull_sample",
            detail: e.to_string(),
        })?;
    let w = g.constant(Tensor::new(u.shape().to_vec(), w)?);
    let scaled = g.div(w, kappa)?;
    let e = g.exp(scaled)?;
    g.mul(lambda, e)
}

/// Graph form of `Γ(1 + 1/κ)`, computed through `lgamma`.
pub fn gamma_one_plus_inv_node(g: &mut Graph, kappa: NodeId) -> Result<NodeId, DiffError> {
    let one = g.scalar(1.0);
    let inv = g.div(one, kappa)?;
    let arg = g.add_scalar(inv, 1.0)?;
    let lg = g.lgamma(arg)?;
    g.exp(lg)
}

/// Graph form of [`kl_weibull_gamma`] (summed to a scalar).
pub fn kl_weibull_gamma_node(
    g: &mut Graph,
    kappa: NodeId,
    lambda: NodeId,
    p: &GammaPrior,
) -> Result<NodeId, DiffError> {
    let c1 = g.scalar(EULER_GAMMA * p.alpha);
    let a = g.div(c1, kappa)?;
    let ll = g.log(lambda)?;
    let b = g.mul_scalar(ll, -p.alpha)?;
    let lk = g.log(kappa)?;
    let gm = gamma_one_plus_inv_node(g, kappa)?;
    let d = g.mul(lambda, gm)?;
    let d = g.mul_scalar(d, p.beta)?;
    let s = g.add(a, b)?;
    let s = g.add(s, lk)?;
    let s = g.add(s, d)?;
    let s = g.add_scalar(s, p.kl_constant())?;
    g.sum(s)
}

#[cfg(test)]
#[allow(clippy::excessive_precision)]
mod tests {
    use super::*;
    use crate::diffcore::check_gradients;

    const INV_E_COMPLEMENT: f64 = 1.0 - 0.367_879_441_171_442_33;

    #[test]
    fn sample_examples() {
        let p = WeibullParams::scalar(1.0, 2.0).unwrap();
        assert!((weibull_sample(&p, &[INV_E_COMPLEMENT]).unwrap()[0] - 2.0).abs() < 1e-12);
        let p = WeibullParams::scalar(2.0, 1.0).unwrap();
        assert!((weibull_sample(&p, &[INV_E_COMPLEMENT]).unwrap()[0] - 1.0).abs() < 1e-12);
        let p = WeibullParams::scalar(0.5, 3.0).unwrap();
        // 3 (ln 2)^2, mpmath
        let v = weibull_sample(&p, &[0.5]).unwrap()[0];
        assert!((v - 1.441_359_041_754_604_3).abs() < 1e-12, "{v}");
    }

    #[test]
    fn sample_rejects_noise_outside_clamp() {
        let p = WeibullParams::scalar(1.0, 1.0).unwrap();
        assert_eq!(weibull_sample(&p, &[0.0]), Err(DistError::NoiseOutOfRange(0.0)));
        assert!(weibull_sample(&p, &[1.0]).is_err());
        assert!(weibull_sample(&p, &[clamp_noise(1.0)]).is_ok());
        assert!(matches!(weibull_sample(&p, &[0.5, 0.5]), Err(DistError::LengthMismatch(1, 2))));
    }

    #[test]
    fn mean_examples() {
        let m = weibull_mean(&WeibullParams::scalar(1.0, 5.0).unwrap())[0];
        assert!((m - 5.0).abs() < 1e-13);
        let m = weibull_mean(&WeibullParams::scalar(2.0, 1.0).unwrap())[0];
        assert!((m - 0.886_226_925_452_758_0).abs() < 1e-13);
        let floored = 0f64.max(SCALE_FLOOR);
        let m = weibull_mean(&WeibullParams::scalar(1.0, floored).unwrap())[0];
        assert!((m - 1e-6).abs() < 1e-19);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(WeibullParams::new(vec![1.0], vec![0.0]).is_err());
        assert!(WeibullParams::new(vec![-1.0], vec![1.0]).is_err());
        assert!(WeibullParams::new(vec![1.0, 2.0], vec![1.0]).is_err());
        assert!(GammaPrior::new(0.0, 1.0).is_err());
        assert!(GammaPrior::new(1.0, f64::INFINITY).is_err());
    }

    #[test]
    fn kl_closed_form_examples() {
        let p = GammaPrior::default();
        let kl = kl_weibull_gamma(&WeibullParams::scalar(1.0, 1.0).unwrap(), &p);
        assert!(kl.abs() < 1e-15, "{kl}");
        let kl = kl_weibull_gamma(&WeibullParams::scalar(1.0, 2.0).unwrap(), &p);
        assert!((kl - (1.0 - 2f64.ln())).abs() < 1e-14);
    }

    #[test]
    fn kl_matches_monte_carlo_single_setting() {
        let q = WeibullParams::scalar(1.7, 0.8).unwrap();
        let p = GammaPrior::default();
        let closed = kl_weibull_gamma(&q, &p);
        let (est, se) = kl_monte_carlo(&q, &p, 1_000_000, 11).unwrap();
        assert!((est - closed).abs() < 3.0 * se, "{est} ± {se} vs {closed}");
    }

    #[test]
    fn kl_monte_carlo_is_deterministic() {
        let q = WeibullParams::scalar(1.0, 2.0).unwrap();
        let p = GammaPrior::default();
        let a = kl_monte_carlo(&q, &p, 20_000, 5).unwrap();
        let b = kl_monte_carlo(&q, &p, 20_000, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(kl_monte_carlo(&q, &p, 100, 5), Err(DistError::TooFewSamples(100)));
    }

    #[test]
    fn graph_and_plain_kl_agree_exactly() {
        let kappa = vec![1.2, 2.5, 1.0, 4.0];
        let lambda = vec![0.3, 1e-6, 2.0, 7.5];
        let q = WeibullParams::new(kappa.clone(), lambda.clone()).unwrap();
        let p = GammaPrior::new(1.5, 0.7).unwrap();
        let mut g = Graph::new();
        let k = g.param(Tensor::vector(kappa));
        let l = g.param(Tensor::vector(lambda));
        let kl = kl_weibull_gamma_node(&mut g, k, l, &p).unwrap();
        assert_eq!(g.value(kl).item().unwrap(), kl_weibull_gamma(&q, &p));
    }

    #[test]
    fn graph_and_plain_sample_agree_exactly() {
        let q = WeibullParams::new(vec![1.3, 3.0], vec![0.5, 2.0]).unwrap();
        let u = vec![0.2, 0.9];
        let mut g = Graph::new();
        let k = g.param(Tensor::vector(q.kappa().to_vec()));
        let l = g.param(Tensor::vector(q.lambda().to_vec()));
        let s = weibull_sample_node(&mut g, k, l, &Tensor::vector(u.clone())).unwrap();
        assert_eq!(g.value(s).data(), weibull_sample(&q, &u).unwrap().as_slice());
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let p = GammaPrior::default();
        let kappa = Tensor::vector(vec![1.0, 1.7, 3.2, 4.9]);
        let lambda = Tensor::vector(vec![0.1, 0.8, 2.5, 9.0]);
        let report = check_gradients(
            |g, ids| kl_weibull_gamma_node(g, ids[0], ids[1], &p),
            &[kappa, lambda],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }
}
