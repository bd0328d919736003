//! The JSON run configuration shared by every subcommand.

use std::path::Path;

use bnrm::datagen::{PoolKind, SyntheticWorld, DEFAULT_D_IN, DEFAULT_FEATURE_NOISE, DEFAULT_K_TRUE};
use bnrm::eval::{DEFAULT_BUCKETS, DEFAULT_N_LIST};
use bnrm::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::ScorerArg;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root of all randomness; required.
    pub seed: u64,
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

/// World parameters plus split sizes. `phi_true` is drawn from the seed when absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub k_true: usize,
    pub phi_true: Option<Vec<f64>>,
    pub d_in: usize,
    /// Defaults to the last feature.
    pub length_feature_index: Option<usize>,
    pub bias_strength: f64,
    pub noise_rate: f64,
    pub feature_noise: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_hard: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            k_true: DEFAULT_K_TRUE,
            phi_true: None,
            d_in: DEFAULT_D_IN,
            length_feature_index: None,
            bias_strength: 0.5,
            noise_rate: 0.0,
            feature_noise: DEFAULT_FEATURE_NOISE,
            n_train: 2000,
            n_val: 1000,
            n_hard: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_buckets: usize,
    pub n_list: Vec<usize>,
    pub n_prompts: usize,
    pub samples_per_prompt: usize,
    pub pool: PoolKind,
    /// Best-of-N proxy scorer.
    pub proxy: ScorerArg,
    pub top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_buckets: DEFAULT_BUCKETS,
            n_list: DEFAULT_N_LIST.to_vec(),
            n_prompts: 100,
            samples_per_prompt: 405,
            pool: PoolKind::Natural,
            proxy: ScorerArg::Model,
            top_k: 16,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    /// Applies a `--seed` override everywhere the seed is used.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
            self.train.seed = s;
        }
        self
    }

    pub fn world(&self) -> Result<SyntheticWorld, CliError> {
        let w = &self.world;
        let mut world = SyntheticWorld::with_dims(self.seed, w.k_true, w.d_in);
        if let Some(phi) = &w.phi_true {
            world.phi_true = phi.clone();
        }
        if let Some(i) = w.length_feature_index {
            world.length_feature_index = i;
        }
        world.bias_strength = w.bias_strength;
        world.noise_rate = w.noise_rate;
        world.feature_noise = w.feature_noise;
        world.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(world)
    }

    /// Validates every section; run before any work starts.
    pub fn validate(&self) -> Result<(), CliError> {
        self.world()?;
        let w = &self.world;
        if w.n_train == 0 || w.n_val == 0 || w.n_hard == 0 {
            return Err(CliError::Config("n_train, n_val and n_hard must be positive".into()));
        }
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let e = &self.eval;
        if e.n_list.is_empty() || e.n_list[0] == 0 || e.n_list.windows(2).any(|p| p[0] >= p[1]) {
            return Err(CliError::Config("eval.n_list must be positive and strictly increasing".into()));
        }
        if e.samples_per_prompt < *e.n_list.last().expect("non-empty") {
            return Err(CliError::Config("eval.samples_per_prompt must cover the largest N".into()));
        }
        if e.n_prompts == 0 || e.n_buckets == 0 || e.top_k == 0 {
            return Err(CliError::Config("eval.n_prompts, n_buckets and top_k must be positive".into()));
        }
        Ok(())
    }

    /// Pretty JSON of the fully resolved config, defaults included.
    pub fn effective_json(&self) -> Result<String, CliError> {
        let mut resolved = self.clone();
        let world = self.world()?;
        resolved.world.phi_true = Some(world.phi_true);
        resolved.world.length_feature_index = Some(world.length_feature_index);
        serde_json::to_string_pretty(&resolved).map_err(|e| CliError::Config(e.to_string()))
    }
}
