//! Synthetic preference worlds with known latent factors and a length dial.
//!
//! Each response has true factor activations `θ* ~ Gamma(1,1)^K` and gold
//! quality `θ*ᵀφ`. Its features are a fixed random projection of `θ*` plus
//! Gaussian noise, with one extra coordinate carrying standardized log
//! length. Length is drawn independently of quality; the only link between
//! them is the bias dial `ρ`, the probability that the longer response of a
//! pair is the chosen one. That is what lets a reward model learn a length
//! shortcut, and the hard split (longer response always rejected) is where
//! the shortcut hurts.
//!
//! Randomness is keyed by `(seed, split, pair index)` so pairs are
//! independent of generation order.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, LogNormal, Normal};
use serde::{Deserialize, Serialize};

pub const DEFAULT_D_IN: usize = 32;
pub const DEFAULT_K_TRUE: usize = 8;
pub const DEFAULT_FEATURE_NOISE: f64 = 0.1;

/// Log-normal token-length distribution: `ln L ~ N(LOG_LEN_MEAN, LOG_LEN_STD²)`.
const LOG_LEN_MEAN: f64 = 5.0;
const LOG_LEN_STD: f64 = 0.6;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid world: {0}")]
    InvalidWorld(String),
    #[error("label noise rate {0} outside [0, 0.5)")]
    NoiseRate(f64),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: feature dimension {got} differs from {expected}")]
    Dimension {
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("duplicate pair id `{0}`")]
    DuplicateId(String),
    #[error("dataset is empty, feature dimension unknown")]
    UnknownDimension,
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

/// Which split a dataset is generated for; salts the RNG and selects the
/// length arrangement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    /// Longer response is always the rejected one.
    Hard,
}

impl Split {
    fn salt(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e00_0001,
            Split::Val => 0x7661_6c00_0000_0002,
            Split::Test => 0x7465_7374_0000_0003,
            Split::Hard => 0x6861_7264_0000_0004,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Hard => "hard",
        }
    }
}

// RNG stream ids within a world seed.
const STREAM_WORLD: u64 = 1;
const STREAM_LABEL_NOISE: u64 = 2;
const STREAM_POOL: u64 = 3;

fn keyed_rng(seed: u64, salt: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticWorld {
    pub k_true: usize,
    /// Gold weight of each true factor, all `>= 0`.
    pub phi_true: Vec<f64>,
    pub d_in: usize,
    pub length_feature_index: usize,
    /// Probability that the longer response is the chosen one.
    pub bias_strength: f64,
    /// Label flip probability applied to the training split.
    pub noise_rate: f64,
    /// Standard deviation of the Gaussian observation noise on features.
    pub feature_noise: f64,
    pub seed: u64,
}

impl SyntheticWorld {
    /// Default-sized world with gold weights drawn from the seed.
    pub fn new(seed: u64) -> Self {
        Self::with_dims(seed, DEFAULT_K_TRUE, DEFAULT_D_IN)
    }

    pub fn with_dims(seed: u64, k_true: usize, d_in: usize) -> Self {
        let mut rng = keyed_rng(seed, 0, STREAM_WORLD);
        let gamma = Gamma::new(2.0, 0.5).expect("valid gamma");
        let phi_true = (0..k_true).map(|_| gamma.sample(&mut rng)).collect();
        Self {
            k_true,
            phi_true,
            d_in,
            length_feature_index: d_in.saturating_sub(1),
            bias_strength: 0.5,
            noise_rate: 0.0,
            feature_noise: DEFAULT_FEATURE_NOISE,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidWorld(m));
        if self.k_true == 0 {
            return bad("k_true must be positive".into());
        }
        if self.phi_true.len() != self.k_true {
            return bad(format!(
                "phi_true has {} entries, k_true is {}",
                self.phi_true.len(),
                self.k_true
            ));
        }
        if self.phi_true.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("phi_true entries must be finite and non-negative".into());
        }
        if self.d_in < 2 {
            return bad("d_in must be at least 2".into());
        }
        if self.length_feature_index >= self.d_in {
            return bad(format!(
                "length_feature_index {} out of range for d_in {}",
                self.length_feature_index, self.d_in
            ));
        }
        if !(0.0..=1.0).contains(&self.bias_strength) {
            return bad(format!("bias_strength {} outside [0, 1]", self.bias_strength));
        }
        if !(0.0..0.5).contains(&self.noise_rate) {
            return bad(format!("noise_rate {} outside [0, 0.5)", self.noise_rate));
        }
        if !(self.feature_noise.is_finite() && self.feature_noise >= 0.0) {
            return bad("feature_noise must be finite and non-negative".into());
        }
        Ok(())
    }

    /// Fixed `[d_in - 1, k_true]` projection from factors to non-length features.
    fn projection(&self) -> Vec<f64> {
        let mut rng = keyed_rng(self.seed, 0, STREAM_WORLD);
        // skip the draws used for phi_true so the two stay independent
        rng.set_word_pos(1 << 20);
        let normal = Normal::new(0.0, 1.0 / (self.k_true as f64).sqrt()).expect("valid normal");
        (0..(self.d_in - 1) * self.k_true).map(|_| normal.sample(&mut rng)).collect()
    }

    pub fn gold_quality(&self, theta: &[f64]) -> f64 {
        theta.iter().zip(&self.phi_true).map(|(t, p)| t * p).sum()
    }

    /// Standardized log length, the value of the length feature.
    pub fn length_feature(length: u32) -> f64 {
        ((length as f64).ln() - LOG_LEN_MEAN) / LOG_LEN_STD
    }
}

/// Draws responses for one world; holds the projection so it is built once.
struct ResponseSampler<'a> {
    world: &'a SyntheticWorld,
    projection: Vec<f64>,
    gamma: Gamma<f64>,
    noise: Normal<f64>,
    length: LogNormal<f64>,
}

struct Response {
    features: Vec<f64>,
    gold: f64,
}

impl<'a> ResponseSampler<'a> {
    fn new(world: &'a SyntheticWorld) -> Self {
        Self {
            world,
            projection: world.projection(),
            gamma: Gamma::new(1.0, 1.0).expect("valid gamma"),
            noise: Normal::new(0.0, world.feature_noise.max(0.0)).expect("valid normal"),
            length: LogNormal::new(LOG_LEN_MEAN, LOG_LEN_STD).expect("valid lognormal"),
        }
    }

    fn response(&self, rng: &mut ChaCha8Rng) -> Response {
        let w = self.world;
        let theta: Vec<f64> = (0..w.k_true).map(|_| self.gamma.sample(rng)).collect();
        let mut features = Vec::with_capacity(w.d_in);
        for row in self.projection.chunks(w.k_true) {
            let clean: f64 = row.iter().zip(&theta).map(|(p, t)| p * t).sum();
            features.push(clean + self.noise.sample(rng));
        }
        // placeholder, overwritten once the length is assigned
        features.insert(w.length_feature_index, 0.0);
        Response {
            gold: w.gold_quality(&theta),
            features,
        }
    }

    fn draw_length(&self, rng: &mut ChaCha8Rng) -> u32 {
        (self.length.sample(rng).round() as u32).max(1)
    }

    /// Two distinct lengths, `(longer, shorter)`.
    fn length_pair(&self, rng: &mut ChaCha8Rng) -> (u32, u32) {
        loop {
            let (a, b) = (self.draw_length(rng), self.draw_length(rng));
            if a != b {
                return (a.max(b), a.min(b));
            }
        }
    }

    fn set_length(&self, features: &mut [f64], length: u32) {
        features[self.world.length_feature_index] = SyntheticWorld::length_feature(length);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferencePair {
    pub id: String,
    pub features_chosen: Vec<f64>,
    pub features_rejected: Vec<f64>,
    pub length_chosen: u32,
    pub length_rejected: u32,
    /// Gold quality of chosen minus rejected (generator metadata).
    pub gold_margin: f64,
}

impl PreferencePair {
    fn swap(&mut self) {
        std::mem::swap(&mut self.features_chosen, &mut self.features_rejected);
        std::mem::swap(&mut self.length_chosen, &mut self.length_rejected);
        self.gold_margin = -self.gold_margin;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePass {
    pub rate: f64,
    pub seed: u64,
}

/// Where a dataset came from; written as a sidecar JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub world: SyntheticWorld,
    pub split: Split,
    pub n: usize,
    #[serde(default)]
    pub label_noise: Vec<NoisePass>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PreferenceDataset {
    pub pairs: Vec<PreferencePair>,
    d_in: Option<usize>,
    pub provenance: Option<Provenance>,
}

impl PreferenceDataset {
    pub fn from_pairs(pairs: Vec<PreferencePair>) -> Result<Self, DataError> {
        let d_in = check_pairs(&pairs)?;
        Ok(Self {
            pairs,
            d_in,
            provenance: None,
        })
    }

    pub fn d_in(&self) -> Result<usize, DataError> {
        self.d_in.ok_or(DataError::UnknownDimension)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Fraction of pairs whose chosen response is the longer one.
    pub fn chosen_longer_fraction(&self) -> f64 {
        if self.pairs.is_empty() {
            return f64::NAN;
        }
        let n = self.pairs.iter().filter(|p| p.length_chosen > p.length_rejected).count();
        n as f64 / self.pairs.len() as f64
    }

    /// Pearson correlation between "first response is longer" and "first
    /// response is preferred", with pairs presented in alternating order.
    pub fn length_label_correlation(&self) -> Option<f64> {
        let (xs, ys): (Vec<f64>, Vec<f64>) = self
            .pairs
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let longer = (p.length_chosen as f64 - p.length_rejected as f64).signum();
                if i % 2 == 0 {
                    (longer, 1.0)
                } else {
                    (-longer, -1.0)
                }
            })
            .unzip();
        crate::eval::pearson(&xs, &ys).ok()
    }
}

fn check_pairs(pairs: &[PreferencePair]) -> Result<Option<usize>, DataError> {
    let mut ids = HashSet::new();
    let mut d_in = None;
    for (i, p) in pairs.iter().enumerate() {
        let line = i + 1;
        check_pair(p, line, &mut d_in)?;
        if !ids.insert(p.id.as_str()) {
            return Err(DataError::DuplicateId(p.id.clone()));
        }
    }
    Ok(d_in)
}

fn check_pair(p: &PreferencePair, line: usize, d_in: &mut Option<usize>) -> Result<(), DataError> {
    let expected = *d_in.get_or_insert(p.features_chosen.len());
    for got in [p.features_chosen.len(), p.features_rejected.len()] {
        if got != expected {
            return Err(DataError::Dimension { line, expected, got });
        }
    }
    if p.length_chosen == 0 || p.length_rejected == 0 {
        return Err(DataError::Malformed {
            line,
            message: "lengths must be at least 1".into(),
        });
    }
    if !p
        .features_chosen
        .iter()
        .chain(&p.features_rejected)
        .chain(std::iter::once(&p.gold_margin))
        .all(|v| v.is_finite())
    {
        return Err(DataError::Malformed {
            line,
            message: "non-finite value".into(),
        });
    }
    Ok(())
}

/// Generates `n` pairs for `split`. Label noise (`world.noise_rate`) is
/// applied to the training split only; evaluation splits stay clean.
pub fn generate_dataset(world: &SyntheticWorld, n: usize, split: Split) -> Result<PreferenceDataset, DataError> {
    world.validate()?;
    if n == 0 {
        return Err(DataError::InvalidWorld("n must be at least 1".into()));
    }
    let sampler = ResponseSampler::new(world);
    let mut pairs = Vec::with_capacity(n);
    for index in 0..n {
        let mut rng = keyed_rng(world.seed, split.salt(), index as u64 + 16);
        let a = sampler.response(&mut rng);
        let b = sampler.response(&mut rng);
        let (mut chosen, mut rejected) = if a.gold >= b.gold { (a, b) } else { (b, a) };
        let (longer, shorter) = sampler.length_pair(&mut rng);
        let chosen_is_longer = match split {
            Split::Hard => false,
            _ => rng.random_bool(world.bias_strength),
        };
        let (length_chosen, length_rejected) = if chosen_is_longer {
            (longer, shorter)
        } else {
            (shorter, longer)
        };
        sampler.set_length(&mut chosen.features, length_chosen);
        sampler.set_length(&mut rejected.features, length_rejected);
        pairs.push(PreferencePair {
            id: format!("{}-{:06}", split.name(), index),
            gold_margin: chosen.gold - rejected.gold,
            features_chosen: chosen.features,
            features_rejected: rejected.features,
            length_chosen,
            length_rejected,
        });
    }
    let mut dataset = PreferenceDataset {
        pairs,
        d_in: Some(world.d_in),
        provenance: Some(Provenance {
            world: world.clone(),
            split,
            n,
            label_noise: Vec::new(),
        }),
    };
    if split == Split::Train && world.noise_rate > 0.0 {
        dataset = inject_label_noise(&dataset, world.noise_rate, world.seed)?;
    }
    Ok(dataset)
}

/// Swaps chosen/rejected independently per pair with probability `rate`.
///
/// Each application draws from a fresh stream (keyed by how many noise passes
/// the dataset has already seen), so applying twice with the same seed flips
/// independently rather than undoing the first pass.
pub fn inject_label_noise(dataset: &PreferenceDataset, rate: f64, seed: u64) -> Result<PreferenceDataset, DataError> {
    if !(0.0..0.5).contains(&rate) {
        return Err(DataError::NoiseRate(rate));
    }
    let mut out = dataset.clone();
    let pass = out.provenance.as_ref().map_or(0, |p| p.label_noise.len()) as u64;
    if rate > 0.0 {
        for (index, pair) in out.pairs.iter_mut().enumerate() {
            let mut rng = keyed_rng(seed, pass.wrapping_mul(0x9E37_79B9_7F4A_7C15), STREAM_LABEL_NOISE);
            rng.set_word_pos(index as u128 * 2);
            if rng.random_bool(rate) {
                pair.swap();
            }
        }
    }
    if let Some(p) = out.provenance.as_mut() {
        p.label_noise.push(NoisePass { rate, seed });
    }
    Ok(out)
}

pub fn save_jsonl(dataset: &PreferenceDataset, path: &Path) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    for pair in &dataset.pairs {
        serde_json::to_writer(&mut w, pair)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_jsonl(path: &Path) -> Result<PreferenceDataset, DataError> {
    let reader = BufReader::new(File::open(path)?);
    let mut pairs = Vec::new();
    let mut d_in = None;
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: PreferencePair = serde_json::from_str(&line).map_err(|e| DataError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        check_pair(&pair, line_no, &mut d_in)?;
        if !ids.insert(pair.id.clone()) {
            return Err(DataError::DuplicateId(pair.id));
        }
        pairs.push(pair);
    }
    Ok(PreferenceDataset {
        pairs,
        d_in,
        provenance: None,
    })
}

pub fn save_provenance(provenance: &Provenance, path: &Path) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, provenance)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// A candidate response in a Best-of-N pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub features: Vec<f64>,
    pub length: u32,
    pub gold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPool {
    pub id: String,
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    /// Lengths independent of quality.
    Natural,
    /// Lengths assigned in reverse gold order: the longest candidate is the worst.
    Adversarial,
}

/// Candidate pools for Best-of-N sampling, one per prompt.
pub fn generate_prompt_pools(
    world: &SyntheticWorld,
    n_prompts: usize,
    samples_per_prompt: usize,
    kind: PoolKind,
) -> Result<Vec<PromptPool>, DataError> {
    world.validate()?;
    let sampler = ResponseSampler::new(world);
    let salt = match kind {
        PoolKind::Natural => 0x706f_6f6c_6e00_0005,
        PoolKind::Adversarial => 0x706f_6f6c_6100_0006,
    };
    let mut pools = Vec::with_capacity(n_prompts);
    for p in 0..n_prompts {
        let mut rng = keyed_rng(world.seed, salt, STREAM_POOL + 16 + p as u64);
        let mut candidates: Vec<Candidate> = (0..samples_per_prompt)
            .map(|_| {
                let r = sampler.response(&mut rng);
                Candidate {
                    features: r.features,
                    length: sampler.draw_length(&mut rng),
                    gold: r.gold,
                }
            })
            .collect();
        if kind == PoolKind::Adversarial {
            let mut order: Vec<usize> = (0..candidates.len()).collect();
            order.sort_by(|&a, &b| candidates[a].gold.total_cmp(&candidates[b].gold));
            let mut lengths: Vec<u32> = candidates.iter().map(|c| c.length).collect();
            lengths.sort_unstable_by(|a, b| b.cmp(a));
            // strictly decreasing so the length ranking is unambiguous
            for i in 1..lengths.len() {
                if lengths[i] >= lengths[i - 1] {
                    lengths[i] = lengths[i - 1].saturating_sub(1).max(1);
                }
            }
            if lengths.windows(2).any(|w| w[0] <= w[1]) {
                // short pools of tiny lengths: fall back to rank-based lengths
                let n = lengths.len() as u32;
                lengths = (0..n).map(|i| n - i).collect();
            }
            for (rank, &idx) in order.iter().enumerate() {
                candidates[idx].length = lengths[rank];
            }
        }
        for c in &mut candidates {
            sampler.set_length(&mut c.features, c.length);
        }
        pools.push(PromptPool {
            id: format!("prompt-{p:05}"),
            candidates,
        });
    }
    Ok(pools)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> SyntheticWorld {
        SyntheticWorld::new(42)
    }

    #[test]
    fn same_world_same_dataset() {
        let a = generate_dataset(&world(), 50, Split::Train).unwrap();
        let b = generate_dataset(&world(), 50, Split::Train).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&world(), 50, Split::Val).unwrap();
        assert_ne!(a.pairs[0].features_chosen, c.pairs[0].features_chosen);
    }

    #[test]
    fn prefix_stable_in_n() {
        let a = generate_dataset(&world(), 10, Split::Train).unwrap();
        let b = generate_dataset(&world(), 20, Split::Train).unwrap();
        assert_eq!(a.pairs[..], b.pairs[..10]);
    }

    #[test]
    fn full_bias_puts_longer_on_chosen() {
        let mut w = world();
        w.bias_strength = 1.0;
        let ds = generate_dataset(&w, 1000, Split::Train).unwrap();
        assert_eq!(ds.chosen_longer_fraction(), 1.0);
        assert_eq!(ds.length_label_correlation(), Some(1.0));
    }

    #[test]
    fn bias_dial_concentrates() {
        let mut w = world();
        w.bias_strength = 0.8;
        let ds = generate_dataset(&w, 10_000, Split::Train).unwrap();
        let f = ds.chosen_longer_fraction();
        assert!((f - 0.8).abs() <= 0.02, "{f}");
    }

    #[test]
    fn hard_split_rejected_is_longer() {
        let mut w = world();
        w.bias_strength = 1.0;
        let ds = generate_dataset(&w, 500, Split::Hard).unwrap();
        assert!(ds.pairs.iter().all(|p| p.length_rejected > p.length_chosen));
    }

    #[test]
    fn clean_labels_follow_gold() {
        let ds = generate_dataset(&world(), 500, Split::Train).unwrap();
        assert!(ds.pairs.iter().all(|p| p.gold_margin >= 0.0));
    }

    #[test]
    fn length_feature_matches_metadata() {
        let w = world();
        let ds = generate_dataset(&w, 20, Split::Val).unwrap();
        for p in &ds.pairs {
            assert_eq!(
                p.features_chosen[w.length_feature_index],
                SyntheticWorld::length_feature(p.length_chosen)
            );
            assert_eq!(
                p.features_rejected[w.length_feature_index],
                SyntheticWorld::length_feature(p.length_rejected)
            );
        }
    }

    #[test]
    fn world_validation() {
        let mut w = world();
        w.phi_true[0] = -1.0;
        assert!(generate_dataset(&w, 10, Split::Train).is_err());
        let mut w = world();
        w.length_feature_index = w.d_in;
        assert!(w.validate().is_err());
        let mut w = world();
        w.noise_rate = 0.5;
        assert!(w.validate().is_err());
        assert!(generate_dataset(&world(), 0, Split::Train).is_err());
    }

    #[test]
    fn zero_rate_noise_is_identity() {
        let ds = generate_dataset(&world(), 100, Split::Train).unwrap();
        let noisy = inject_label_noise(&ds, 0.0, 3).unwrap();
        assert_eq!(ds.pairs, noisy.pairs);
        assert!(inject_label_noise(&ds, 0.5, 3).is_err());
        assert!(inject_label_noise(&ds, -0.1, 3).is_err());
    }

    #[test]
    fn noise_rate_concentrates() {
        let ds = generate_dataset(&world(), 10_000, Split::Val).unwrap();
        let noisy = inject_label_noise(&ds, 0.25, 9).unwrap();
        let flipped = noisy.pairs.iter().filter(|p| p.gold_margin < 0.0).count() as f64 / 10_000.0;
        assert!((flipped - 0.25).abs() <= 0.015, "{flipped}");
        assert_eq!(noisy.provenance.as_ref().unwrap().label_noise.len(), 1);
    }

    #[test]
    fn noise_passes_are_independent() {
        // Two passes at rate r flip a pair relative to the original with
        // probability 2r(1 - r) = 0.375; an undoing second pass would give 0.
        let ds = generate_dataset(&world(), 10_000, Split::Val).unwrap();
        let once = inject_label_noise(&ds, 0.25, 9).unwrap();
        let twice = inject_label_noise(&once, 0.25, 9).unwrap();
        assert_ne!(twice.pairs, ds.pairs);
        let flipped = twice.pairs.iter().filter(|p| p.gold_margin < 0.0).count() as f64 / 10_000.0;
        assert!((flipped - 0.375).abs() <= 0.015, "{flipped}");
    }

    #[test]
    fn train_split_gets_world_noise() {
        let mut w = world();
        w.noise_rate = 0.25;
        let train = generate_dataset(&w, 4000, Split::Train).unwrap();
        let flipped = train.pairs.iter().filter(|p| p.gold_margin < 0.0).count() as f64 / 4000.0;
        assert!((flipped - 0.25).abs() < 0.03);
        let val = generate_dataset(&w, 500, Split::Val).unwrap();
        assert!(val.pairs.iter().all(|p| p.gold_margin >= 0.0));
    }

    #[test]
    fn jsonl_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let ds = generate_dataset(&world(), 3, Split::Val).unwrap();
        save_jsonl(&ds, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let cut = text.len() - 20;
        std::fs::write(&path, &text[..cut]).unwrap();
        match load_jsonl(&path) {
            Err(DataError::Malformed { line: 3, .. }) => {}
            other => panic!("expected malformed line 3, got {other:?}"),
        }

        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut p: PreferencePair = serde_json::from_str(&lines[1]).unwrap();
        p.features_chosen.pop();
        lines[1] = serde_json::to_string(&p).unwrap();
        std::fs::write(&path, lines.join("\n")).unwrap();
        assert!(matches!(load_jsonl(&path), Err(DataError::Dimension { line: 2, .. })));
    }

    #[test]
    fn empty_file_has_unknown_dimension() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        let ds = load_jsonl(&path).unwrap();
        assert!(ds.is_empty());
        assert!(matches!(ds.d_in(), Err(DataError::UnknownDimension)));
    }

    #[test]
    fn adversarial_pool_orders_length_against_gold() {
        let pools = generate_prompt_pools(&world(), 3, 50, PoolKind::Adversarial).unwrap();
        for pool in &pools {
            let mut c = pool.candidates.clone();
            c.sort_by(|a, b| a.gold.total_cmp(&b.gold));
            assert!(c.windows(2).all(|w| w[0].length > w[1].length));
        }
    }
}
