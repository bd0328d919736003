//! Versioned JSON checkpoints.
//!
//! A checkpoint holds one or more trained members (three for a BT ensemble)
//! plus the config that produced them and its SHA-256. Floats round-trip
//! exactly, so a reloaded model scores bit-identically.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{BnrmModel, BtModel, ModelDims, Parameterized, RewardModel};
use crate::trainer::{Method, TrainConfig};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint format version {0} (expected {FORMAT_VERSION})")]
    Version(u32),
    #[error("checkpoint is inconsistent: {0}")]
    Inconsistent(String),
    #[error("checkpoint expects d_in {expected}, data has d_in {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub method: Method,
    pub d_in: usize,
    pub d_model: usize,
    pub k: usize,
    pub seed: u64,
    /// Hex SHA-256 of the config's JSON encoding.
    pub config_hash: String,
    pub config: TrainConfig,
    pub members: Vec<RewardModel>,
}

pub fn config_hash(cfg: &TrainConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

impl Checkpoint {
    pub fn new(cfg: &TrainConfig, dims: ModelDims, members: Vec<RewardModel>) -> Result<Self, CheckpointError> {
        let ckpt = Self {
            format_version: FORMAT_VERSION,
            method: cfg.method,
            d_in: dims.d_in,
            d_model: dims.d_model,
            k: dims.k,
            seed: cfg.seed,
            config_hash: config_hash(cfg),
            config: cfg.clone(),
            members,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            d_in: self.d_in,
            d_model: self.d_model,
            k: self.k,
        }
    }

    /// The scorer this checkpoint represents; ensembles average their members.
    pub fn reward_model(&self) -> RewardModel {
        if self.method == Method::BtEnsemble {
            RewardModel::Ensemble(self.members.clone())
        } else {
            self.members[0].clone()
        }
    }

    pub fn ensure_d_in(&self, got: usize) -> Result<(), CheckpointError> {
        if got != self.d_in {
            return Err(CheckpointError::DimensionMismatch {
                expected: self.d_in,
                got,
            });
        }
        Ok(())
    }

    /// Checks every member against the declared method and dimensions.
    pub fn validate(&self) -> Result<(), CheckpointError> {
        let bad = |m: String| Err(CheckpointError::Inconsistent(m));
        if self.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version(self.format_version));
        }
        let expected_members = match self.method {
            Method::BtEnsemble => self.config.ensemble_size,
            _ => 1,
        };
        if self.members.len() != expected_members {
            return bad(format!(
                "{} members for method {}, expected {expected_members}",
                self.members.len(),
                self.method.name()
            ));
        }
        if config_hash(&self.config) != self.config_hash {
            return bad("config hash does not match stored config".into());
        }
        let dims = self.dims();
        dims.validate().map_err(|e| CheckpointError::Inconsistent(e.to_string()))?;
        for (i, member) in self.members.iter().enumerate() {
            let (actual, reference): (Vec<Vec<usize>>, Vec<Vec<usize>>) = match (self.method, member) {
                (Method::Bnrm, RewardModel::Bnrm(m)) => (
                    shapes(m),
                    shapes(&BnrmModel::init(dims, 0).expect("validated dims")),
                ),
                (Method::Bnrm, _) => return bad(format!("member {i} is not a BNRM model")),
                (_, RewardModel::Bt(m)) => (shapes(m), shapes(&BtModel::init(dims, 0).expect("validated dims"))),
                _ => return bad(format!("member {i} is not a BT model")),
            };
            if actual != reference {
                return bad(format!(
                    "member {i} parameter shapes {actual:?} do not match dims {dims:?}"
                ));
            }
            let sizes_ok = match member {
                RewardModel::Bnrm(m) => tensors_consistent(m),
                RewardModel::Bt(m) => tensors_consistent(m),
                RewardModel::Ensemble(_) => false,
            };
            if !sizes_ok {
                return bad(format!("member {i} has tensors whose data length disagrees with shape"));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Self = serde_json::from_str(&text)?;
        ckpt.validate()?;
        Ok(ckpt)
    }
}

fn shapes<M: Parameterized>(m: &M) -> Vec<Vec<usize>> {
    m.params().iter().map(|t| t.shape().to_vec()).collect()
}

fn tensors_consistent<M: Parameterized>(m: &M) -> bool {
    m.params()
        .iter()
        .all(|t| t.data().len() == t.shape().iter().product::<usize>() && t.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, Split, SyntheticWorld};
    use crate::trainer::{evaluate_accuracy, train};

    fn cfg(method: Method) -> TrainConfig {
        TrainConfig {
            method,
            epochs: 1,
            batch_size: 8,
            k: 4,
            d_model: 6,
            seed: 1,
            ..TrainConfig::default()
        }
    }

    fn data() -> (crate::datagen::PreferenceDataset, crate::datagen::PreferenceDataset) {
        let w = SyntheticWorld::with_dims(9, 3, 7);
        (
            generate_dataset(&w, 24, Split::Train).unwrap(),
            generate_dataset(&w, 30, Split::Val).unwrap(),
        )
    }

    #[test]
    fn round_trip_preserves_accuracy_bits() {
        let (tr, va) = data();
        let dir = tempfile::tempdir().unwrap();
        for method in [Method::Bnrm, Method::BtEnsemble] {
            let (ckpt, _) = train(&cfg(method), &tr, &va).unwrap();
            let path = dir.path().join("m.json");
            ckpt.save(&path).unwrap();
            let loaded = Checkpoint::load(&path).unwrap();
            assert_eq!(loaded, ckpt);
            let a = evaluate_accuracy(&ckpt.reward_model(), &va).unwrap();
            let b = evaluate_accuracy(&loaded.reward_model(), &va).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
            let rows: Vec<&[f64]> = va.pairs.iter().map(|p| p.features_chosen.as_slice()).collect();
            assert_eq!(
                ckpt.reward_model().rewards(&rows).unwrap(),
                loaded.reward_model().rewards(&rows).unwrap()
            );
        }
    }

    #[test]
    fn tampered_checkpoints_are_rejected() {
        let (tr, va) = data();
        let (ckpt, _) = train(&cfg(Method::Bt), &tr, &va).unwrap();
        let mut wrong_dims = ckpt.clone();
        wrong_dims.d_in += 1;
        assert!(wrong_dims.validate().is_err());
        let mut wrong_version = ckpt.clone();
        wrong_version.format_version = 99;
        assert!(matches!(wrong_version.validate(), Err(CheckpointError::Version(99))));
        let mut wrong_hash = ckpt.clone();
        wrong_hash.config.epochs = 5;
        assert!(wrong_hash.validate().is_err());
        assert!(matches!(
            ckpt.ensure_d_in(3),
            Err(CheckpointError::DimensionMismatch { expected: 7, got: 3 })
        ));
    }
}
