//! Encoder and reward heads.
//!
//! The BNRM head turns a representation `z` into a Weibull posterior over
//! non-negative factor activations `θ`, keeps a global Weibull posterior over
//! the dictionary `Φ`, and scores `r = θᵀΦ + relu(b)`. The baseline head is
//! the scalar Bradley–Terry head `r = zᵀw`.
//!
//! All forward computation goes through [`Graph`] so the training path and
//! the evaluation path share one implementation. Parameters are bound into a
//! graph in the order returned by [`Parameterized::params`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffError, Graph, NodeId, Tensor};
use crate::distributions::{
    gamma_one_plus_inv_node, kl_weibull_gamma_node, weibull_sample_node, DistError, GammaPrior,
    WeibullParams, SCALE_FLOOR,
};

pub const DEFAULT_K: usize = 64;
pub const DEFAULT_D_MODEL: usize = 64;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("ensemble needs at least one member")]
    EmptyEnsemble,
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Dist(#[from] DistError),
}

/// Sizes shared by every component of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_in: usize,
    pub d_model: usize,
    pub k: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_in == 0 || self.d_model == 0 || self.k == 0 {
            return Err(ModelError::InvalidConfig(format!(
                "all dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Anything with trainable tensors.
pub trait Parameterized {
    /// Parameter names, in binding order.
    fn param_names(&self) -> Vec<String>;
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }
}

fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn init(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Self {
        Self {
            weight: uniform_init(rng, &[d_in, d_out], d_in),
            bias: uniform_init(rng, &[d_out], d_in),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[d_in, d_out]),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Debug, Clone, Copy)]
struct LinearIds {
    weight: NodeId,
    bias: NodeId,
}

impl LinearIds {
    fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, DiffError> {
        let xw = g.matmul(x, self.weight)?;
        g.add(xw, self.bias)
    }
}

/// Stand-in for the backbone: `z = relu(x W + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub layer: Linear,
}

impl Encoder {
    pub fn init(rng: &mut ChaCha8Rng, d_in: usize, d_model: usize) -> Self {
        Self {
            layer: Linear::init(rng, d_in, d_model),
        }
    }

    pub fn d_in(&self) -> usize {
        self.layer.d_in()
    }

    pub fn d_model(&self) -> usize {
        self.layer.d_out()
    }

    /// Encodes one feature vector.
    pub fn encode(&self, features: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new();
        let x = features_matrix(&mut g, &[features], self.d_in())?;
        let ids = bind_linear(&mut g, &self.layer, false);
        let z = encode_node(&mut g, ids, x)?;
        Ok(g.value(z).data().to_vec())
    }
}

fn encode_node(g: &mut Graph, ids: LinearIds, x: NodeId) -> Result<NodeId, DiffError> {
    let h = ids.forward(g, x)?;
    g.relu(h)
}

fn bind_linear(g: &mut Graph, layer: &Linear, trainable: bool) -> LinearIds {
    let bind = |g: &mut Graph, t: &Tensor| {
        if trainable {
            g.param(t.clone())
        } else {
            g.constant(t.clone())
        }
    };
    LinearIds {
        weight: bind(g, &layer.weight),
        bias: bind(g, &layer.bias),
    }
}

/// Builds a `[n, dim]` constant from rows, checking every row's length.
pub fn features_matrix(g: &mut Graph, rows: &[&[f64]], dim: usize) -> Result<NodeId, ModelError> {
    let mut data = Vec::with_capacity(rows.len() * dim);
    for row in rows {
        if row.len() != dim {
            return Err(ModelError::DimensionMismatch {
                what: "feature vector",
                expected: dim,
                got: row.len(),
            });
        }
        data.extend_from_slice(row);
    }
    Ok(g.constant(Tensor::matrix(rows.len(), dim, data)?))
}

/// `max(x, ε)` written as `relu(x − ε) + ε`.
fn floor_node(g: &mut Graph, x: NodeId, eps: f64) -> Result<NodeId, DiffError> {
    let shifted = g.add_scalar(x, -eps)?;
    let r = g.relu(shifted)?;
    g.add_scalar(r, eps)
}

/// Weibull parameters as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct WeibullNodes {
    pub kappa: NodeId,
    pub lambda: NodeId,
}

impl WeibullNodes {
    /// `κ = 1 + softplus(shape_pre)`, `λ = max(z_out, ε) / Γ(1 + 1/κ)`.
    fn from_preactivations(g: &mut Graph, z_out: NodeId, shape_pre: NodeId) -> Result<Self, DiffError> {
        let sp = g.softplus(shape_pre)?;
        let kappa = g.add_scalar(sp, 1.0)?;
        let floored = floor_node(g, z_out, SCALE_FLOOR)?;
        let gm = gamma_one_plus_inv_node(g, kappa)?;
        let lambda = g.div(floored, gm)?;
        Ok(Self { kappa, lambda })
    }

    pub fn mean(&self, g: &mut Graph) -> Result<NodeId, DiffError> {
        let gm = gamma_one_plus_inv_node(g, self.kappa)?;
        g.mul(self.lambda, gm)
    }

    pub fn sample(&self, g: &mut Graph, u: &Tensor) -> Result<NodeId, DiffError> {
        weibull_sample_node(g, self.kappa, self.lambda, u)
    }

    pub fn kl(&self, g: &mut Graph, prior: &GammaPrior) -> Result<NodeId, DiffError> {
        kl_weibull_gamma_node(g, self.kappa, self.lambda, prior)
    }

    pub fn to_params(&self, g: &Graph) -> Result<WeibullParams, DistError> {
        WeibullParams::new(
            g.value(self.kappa).data().to_vec(),
            g.value(self.lambda).data().to_vec(),
        )
    }
}

/// The non-negative Bayesian reward head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnrmHead {
    /// `W_ell`: `z -> z_out` before the ReLU.
    pub scale: Linear,
    /// `W_k`: `z ->` shape pre-activation.
    pub shape: Linear,
    /// `W_kw`: elementwise `1 -> 1` map producing the dictionary shape pre-activation.
    pub dict_shape: Linear,
    /// `W`, `[K, 1]`; `relu(W)` seeds the dictionary posterior.
    pub dict: Tensor,
    /// Reward bias `b`, one element.
    pub bias: Tensor,
}

impl BnrmHead {
    pub fn init(rng: &mut ChaCha8Rng, d_model: usize, k: usize) -> Self {
        Self {
            scale: Linear::init(rng, d_model, k),
            shape: Linear::init(rng, d_model, k),
            dict_shape: Linear::init(rng, 1, 1),
            dict: uniform_init(rng, &[k, 1], k),
            bias: Tensor::zeros(&[1]),
        }
    }

    pub fn k(&self) -> usize {
        self.dict.shape()[0]
    }

    pub fn d_model(&self) -> usize {
        self.scale.d_in()
    }

    /// Local posterior `q(θ | z)` for one representation.
    pub fn infer_local(&self, z: &[f64]) -> Result<WeibullParams, ModelError> {
        let mut g = Graph::new();
        let ids = self.bind(&mut g, false);
        let z = features_matrix(&mut g, &[z], self.d_model())?;
        let local = ids.infer_local(&mut g, z)?;
        Ok(local.to_params(&g)?)
    }

    /// Global posterior `q(Φ)`.
    pub fn infer_global(&self) -> Result<WeibullParams, ModelError> {
        let mut g = Graph::new();
        let ids = self.bind(&mut g, false);
        let global = ids.infer_global(&mut g)?;
        Ok(global.to_params(&g)?)
    }

    /// One reparameterized draw of `(θ, Φ)` and the resulting reward.
    pub fn sample_reward(&self, z: &[f64], u_theta: &[f64], u_phi: &[f64]) -> Result<RewardSample, ModelError> {
        let k = self.k();
        for (what, u) in [("theta noise", u_theta), ("phi noise", u_phi)] {
            if u.len() != k {
                return Err(ModelError::DimensionMismatch {
                    what,
                    expected: k,
                    got: u.len(),
                });
            }
        }
        let mut g = Graph::new();
        let ids = self.bind(&mut g, false);
        let zn = features_matrix(&mut g, &[z], self.d_model())?;
        let local = ids.infer_local(&mut g, zn)?;
        let theta = local.sample(&mut g, &Tensor::matrix(1, k, u_theta.to_vec())?)?;
        let global = ids.infer_global(&mut g)?;
        let phi = global.sample(&mut g, &Tensor::matrix(k, 1, u_phi.to_vec())?)?;
        let reward = ids.reward(&mut g, theta, phi)?;
        let prior = GammaPrior::default();
        let kl_theta = local.kl(&mut g, &prior)?;
        let kl_phi = global.kl(&mut g, &prior)?;
        Ok(RewardSample {
            theta: g.value(theta).data().to_vec(),
            phi: g.value(phi).data().to_vec(),
            reward: g.value(reward).item()?,
            kl_theta: g.value(kl_theta).item()?,
            kl_phi: g.value(kl_phi).item()?,
        })
    }

    /// Reward with `θ` and `Φ` replaced by their posterior means.
    pub fn mean_reward(&self, z: &[f64]) -> Result<f64, ModelError> {
        let mut g = Graph::new();
        let ids = self.bind(&mut g, false);
        let zn = features_matrix(&mut g, &[z], self.d_model())?;
        let r = ids.mean_reward(&mut g, zn)?;
        Ok(g.value(r).item()?)
    }

    pub(crate) fn bind(&self, g: &mut Graph, trainable: bool) -> BnrmHeadIds {
        let scale = bind_linear(g, &self.scale, trainable);
        let shape = bind_linear(g, &self.shape, trainable);
        let dict_shape = bind_linear(g, &self.dict_shape, trainable);
        let (dict, bias) = if trainable {
            (g.param(self.dict.clone()), g.param(self.bias.clone()))
        } else {
            (g.constant(self.dict.clone()), g.constant(self.bias.clone()))
        };
        BnrmHeadIds {
            scale,
            shape,
            dict_shape,
            dict,
            bias,
        }
    }
}

impl Parameterized for BnrmHead {
    fn param_names(&self) -> Vec<String> {
        [
            "head.scale.weight",
            "head.scale.bias",
            "head.shape.weight",
            "head.shape.bias",
            "head.dict_shape.weight",
            "head.dict_shape.bias",
            "head.dict",
            "head.bias",
        ]
        .map(String::from)
        .to_vec()
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.scale.weight,
            &self.scale.bias,
            &self.shape.weight,
            &self.shape.bias,
            &self.dict_shape.weight,
            &self.dict_shape.bias,
            &self.dict,
            &self.bias,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.scale.weight,
            &mut self.scale.bias,
            &mut self.shape.weight,
            &mut self.shape.bias,
            &mut self.dict_shape.weight,
            &mut self.dict_shape.bias,
            &mut self.dict,
            &mut self.bias,
        ]
    }
}

/// [`BnrmHead`] parameters bound into a graph.
#[derive(Debug, Clone, Copy)]
pub struct BnrmHeadIds {
    scale: LinearIds,
    shape: LinearIds,
    dict_shape: LinearIds,
    dict: NodeId,
    bias: NodeId,
}

impl BnrmHeadIds {
    /// `z_out = relu(z W_ell)`, `κ = 1 + softplus(z W_k)`, `λ = max(z_out, ε)/Γ(1+1/κ)`.
    pub fn infer_local(&self, g: &mut Graph, z: NodeId) -> Result<WeibullNodes, DiffError> {
        let pre = self.scale.forward(g, z)?;
        let z_out = g.relu(pre)?;
        let shape_pre = self.shape.forward(g, z)?;
        WeibullNodes::from_preactivations(g, z_out, shape_pre)
    }

    /// Dictionary posterior from `relu(W)`; returns `[K, 1]` nodes.
    pub fn infer_global(&self, g: &mut Graph) -> Result<WeibullNodes, DiffError> {
        let z_out = g.relu(self.dict)?;
        // elementwise 1 -> 1 map: z_out * w_kw + b_kw, both single-element
        let scaled = g.mul(z_out, self.dict_shape.weight)?;
        let shape_pre = g.add(scaled, self.dict_shape.bias)?;
        WeibullNodes::from_preactivations(g, z_out, shape_pre)
    }

    /// `θ Φ + relu(b)`; `theta` is `[n, K]`, `phi` is `[K, 1]`.
    pub fn reward(&self, g: &mut Graph, theta: NodeId, phi: NodeId) -> Result<NodeId, DiffError> {
        let dot = g.matmul(theta, phi)?;
        let b = g.relu(self.bias)?;
        g.add(dot, b)
    }

    pub fn mean_reward(&self, g: &mut Graph, z: NodeId) -> Result<NodeId, DiffError> {
        let local = self.infer_local(g, z)?;
        let theta = local.mean(g)?;
        let global = self.infer_global(g)?;
        let phi = global.mean(g)?;
        self.reward(g, theta, phi)
    }
}

/// One draw from the BNRM head.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardSample {
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    pub reward: f64,
    pub kl_theta: f64,
    pub kl_phi: f64,
}

/// Scalar Bradley–Terry head `r = z · w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineHead {
    /// `[d_model, 1]`
    pub weight: Tensor,
}

impl BaselineHead {
    pub fn init(rng: &mut ChaCha8Rng, d_model: usize) -> Self {
        Self {
            weight: uniform_init(rng, &[d_model, 1], d_model),
        }
    }

    pub fn from_weights(w: Vec<f64>) -> Self {
        let n = w.len();
        Self {
            weight: Tensor::matrix(n, 1, w).expect("column vector"),
        }
    }

    pub fn d_model(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn reward(&self, z: &[f64]) -> Result<f64, ModelError> {
        if z.len() != self.d_model() {
            return Err(ModelError::DimensionMismatch {
                what: "representation",
                expected: self.d_model(),
                got: z.len(),
            });
        }
        let mut g = Graph::new();
        let zn = features_matrix(&mut g, &[z], self.d_model())?;
        let w = g.constant(self.weight.clone());
        let r = g.matmul(zn, w)?;
        Ok(g.value(r).item()?)
    }
}

/// A head evaluated deterministically (posterior means for BNRM).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(clippy::large_enum_variant)]
pub enum Head {
    Baseline(BaselineHead),
    Bnrm(BnrmHead),
}

impl Head {
    pub fn reward(&self, z: &[f64]) -> Result<f64, ModelError> {
        match self {
            Head::Baseline(h) => h.reward(z),
            Head::Bnrm(h) => h.mean_reward(z),
        }
    }
}

/// Mean of the members' rewards on a shared representation.
pub fn ensemble_reward(heads: &[Head], z: &[f64]) -> Result<f64, ModelError> {
    let values = heads.iter().map(|h| h.reward(z)).collect::<Result<Vec<_>, _>>()?;
    ensemble_mean(&values)
}

pub fn ensemble_mean(values: &[f64]) -> Result<f64, ModelError> {
    if values.is_empty() {
        return Err(ModelError::EmptyEnsemble);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Encoder plus BNRM head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnrmModel {
    pub encoder: Encoder,
    pub head: BnrmHead,
}

impl BnrmModel {
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self, ModelError> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            encoder: Encoder::init(&mut rng, dims.d_in, dims.d_model),
            head: BnrmHead::init(&mut rng, dims.d_model, dims.k),
        })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            d_in: self.encoder.d_in(),
            d_model: self.encoder.d_model(),
            k: self.head.k(),
        }
    }

    /// Binds all parameters; with `trainable`, they become gradient leaves.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BnrmIds {
        let encoder = bind_linear(g, &self.encoder.layer, trainable);
        let head = self.head.bind(g, trainable);
        BnrmIds { encoder, head }
    }

    /// Posterior-mean rewards for a batch of feature vectors.
    pub fn mean_rewards(&self, rows: &[&[f64]]) -> Result<Vec<f64>, ModelError> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let ids = self.bind(&mut g, false);
        let x = features_matrix(&mut g, rows, self.encoder.d_in())?;
        let z = ids.encode(&mut g, x)?;
        let r = ids.head.mean_reward(&mut g, z)?;
        Ok(g.value(r).data().to_vec())
    }

    /// Posterior means of `θ` for each row and of `Φ`.
    pub fn factor_means(&self, rows: &[&[f64]]) -> Result<(Vec<Vec<f64>>, Vec<f64>), ModelError> {
        let mut g = Graph::new();
        let ids = self.bind(&mut g, false);
        let global = ids.head.infer_global(&mut g)?;
        let phi = global.mean(&mut g)?;
        let phi = g.value(phi).data().to_vec();
        if rows.is_empty() {
            return Ok((Vec::new(), phi));
        }
        let x = features_matrix(&mut g, rows, self.encoder.d_in())?;
        let z = ids.encode(&mut g, x)?;
        let local = ids.head.infer_local(&mut g, z)?;
        let theta = local.mean(&mut g)?;
        let k = self.head.k();
        let thetas = g.value(theta).data().chunks(k).map(<[f64]>::to_vec).collect();
        Ok((thetas, phi))
    }
}

impl Parameterized for BnrmModel {
    fn param_names(&self) -> Vec<String> {
        let mut names = vec!["encoder.weight".to_string(), "encoder.bias".to_string()];
        names.extend(self.head.param_names());
        names
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut p = vec![&self.encoder.layer.weight, &self.encoder.layer.bias];
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = vec![&mut self.encoder.layer.weight, &mut self.encoder.layer.bias];
        p.extend(self.head.params_mut());
        p
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BnrmIds {
    encoder: LinearIds,
    pub head: BnrmHeadIds,
}

impl BnrmIds {
    /// Rebuilds ids from nodes already in the graph, in [`Parameterized::params`] order.
    pub fn from_nodes(nodes: &[NodeId]) -> Result<Self, ModelError> {
        let n: &[NodeId; 10] = nodes.try_into().map_err(|_| ModelError::DimensionMismatch {
            what: "BNRM parameter nodes",
            expected: 10,
            got: nodes.len(),
        })?;
        let lin = |w: NodeId, b: NodeId| LinearIds { weight: w, bias: b };
        Ok(Self {
            encoder: lin(n[0], n[1]),
            head: BnrmHeadIds {
                scale: lin(n[2], n[3]),
                shape: lin(n[4], n[5]),
                dict_shape: lin(n[6], n[7]),
                dict: n[8],
                bias: n[9],
            },
        })
    }

    pub fn encode(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, DiffError> {
        encode_node(g, self.encoder, x)
    }
}

/// Encoder plus scalar head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BtModel {
    pub encoder: Encoder,
    pub head: BaselineHead,
}

impl BtModel {
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self, ModelError> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            encoder: Encoder::init(&mut rng, dims.d_in, dims.d_model),
            head: BaselineHead::init(&mut rng, dims.d_model),
        })
    }

    pub fn d_in(&self) -> usize {
        self.encoder.d_in()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BtIds {
        let encoder = bind_linear(g, &self.encoder.layer, trainable);
        let head = if trainable {
            g.param(self.head.weight.clone())
        } else {
            g.constant(self.head.weight.clone())
        };
        BtIds { encoder, head }
    }

    pub fn rewards(&self, rows: &[&[f64]]) -> Result<Vec<f64>, ModelError> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let ids = self.bind(&mut g, false);
        let x = features_matrix(&mut g, rows, self.encoder.d_in())?;
        let r = ids.reward(&mut g, x)?;
        Ok(g.value(r).data().to_vec())
    }
}

impl Parameterized for BtModel {
    fn param_names(&self) -> Vec<String> {
        ["encoder.weight", "encoder.bias", "head.weight"].map(String::from).to_vec()
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![&self.encoder.layer.weight, &self.encoder.layer.bias, &self.head.weight]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.encoder.layer.weight,
            &mut self.encoder.layer.bias,
            &mut self.head.weight,
        ]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BtIds {
    encoder: LinearIds,
    head: NodeId,
}

impl BtIds {
    /// Rebuilds ids from nodes already in the graph, in [`Parameterized::params`] order.
    pub fn from_nodes(nodes: &[NodeId]) -> Result<Self, ModelError> {
        match *nodes {
            [weight, bias, head] => Ok(Self {
                encoder: LinearIds { weight, bias },
                head,
            }),
            _ => Err(ModelError::DimensionMismatch {
                what: "BT parameter nodes",
                expected: 3,
                got: nodes.len(),
            }),
        }
    }

    /// `[n, d_in]` features to `[n, 1]` rewards.
    pub fn reward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, DiffError> {
        let z = encode_node(g, self.encoder, x)?;
        g.matmul(z, self.head)
    }
}

/// A trained scorer of any supported kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(clippy::large_enum_variant)]
pub enum RewardModel {
    Bnrm(BnrmModel),
    Bt(BtModel),
    Ensemble(Vec<RewardModel>),
}

impl RewardModel {
    pub fn d_in(&self) -> Result<usize, ModelError> {
        match self {
            RewardModel::Bnrm(m) => Ok(m.encoder.d_in()),
            RewardModel::Bt(m) => Ok(m.d_in()),
            RewardModel::Ensemble(ms) => ms.first().ok_or(ModelError::EmptyEnsemble)?.d_in(),
        }
    }

    /// Deterministic rewards (posterior means for BNRM, member mean for ensembles).
    pub fn rewards(&self, rows: &[&[f64]]) -> Result<Vec<f64>, ModelError> {
        match self {
            RewardModel::Bnrm(m) => m.mean_rewards(rows),
            RewardModel::Bt(m) => m.rewards(rows),
            RewardModel::Ensemble(members) => {
                if members.is_empty() {
                    return Err(ModelError::EmptyEnsemble);
                }
                let per_member = members
                    .iter()
                    .map(|m| m.rewards(rows))
                    .collect::<Result<Vec<_>, _>>()?;
                (0..rows.len())
                    .map(|i| ensemble_mean(&per_member.iter().map(|r| r[i]).collect::<Vec<_>>()))
                    .collect()
            }
        }
    }

    pub fn as_bnrm(&self) -> Option<&BnrmModel> {
        match self {
            RewardModel::Bnrm(m) => Some(m),
            _ => None,
        }
    }
}
