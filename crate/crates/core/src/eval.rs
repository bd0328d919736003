//! Analyses over trained scorers: length bias, Best-of-N over-optimization,
//! and factor dumps with role classification.
//!
//! CSV outputs use fixed headers and print floats with 9 significant digits.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datagen::{PreferenceDataset, PromptPool};
use crate::model::{ModelError, RewardModel};

pub const DEFAULT_N_LIST: [usize; 10] = [1, 2, 4, 8, 16, 32, 64, 128, 256, 405];
pub const DEFAULT_BUCKETS: usize = 10;
/// Relative activity threshold: factors with `Φ < 1% · max Φ` count as switched off.
pub const DEFAULT_TAU_FRACTION: f64 = 0.01;

pub const BIAS_HEADER: &str = "bucket,length_lo,length_hi,count,mean_reward,pearson_r";
pub const BON_HEADER: &str = "n,kl_budget,proxy_score,gold_score";
pub const FACTOR_HEADER: &str = "pair_id,rank,factor,phi,theta_chosen,theta_rejected,role,pair_label";

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("correlation undefined: {0} series is constant")]
    UndefinedCorrelation(&'static str),
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("N must be at least 1")]
    InvalidN,
    #[error("N list must be non-empty and strictly increasing")]
    InvalidNList,
    #[error("prompt `{prompt}` has {got} candidates, need {need}")]
    InsufficientCandidates {
        prompt: String,
        need: usize,
        got: usize,
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("no prompts in pool")]
    EmptyPool,
    #[error("active threshold must be positive, got {0}")]
    InvalidThreshold(f64),
    #[error("{0} is not supported for this model")]
    UnsupportedModel(&'static str),
    #[error("scorer needs gold quality, which this response lacks")]
    MissingGold,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Product-moment correlation. Errors instead of returning NaN when either
/// series is constant.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, EvalError> {
    if xs.len() != ys.len() {
        return Err(EvalError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(EvalError::TooFewPoints(xs.len()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(EvalError::UndefinedCorrelation("first"));
    }
    if syy == 0.0 {
        return Err(EvalError::UndefinedCorrelation("second"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// One response as seen by a scorer.
#[derive(Debug, Clone, Copy)]
pub struct Response<'a> {
    pub features: &'a [f64],
    pub length: u32,
    pub gold: Option<f64>,
}

pub trait Scorer {
    fn score(&self, responses: &[Response<'_>]) -> Result<Vec<f64>, EvalError>;

    /// Whether scores come from a non-negative factor model.
    fn is_factored(&self) -> bool {
        false
    }
}

impl Scorer for RewardModel {
    fn score(&self, responses: &[Response<'_>]) -> Result<Vec<f64>, EvalError> {
        let rows: Vec<&[f64]> = responses.iter().map(|r| r.features).collect();
        Ok(self.rewards(&rows)?)
    }

    fn is_factored(&self) -> bool {
        self.as_bnrm().is_some()
    }
}

/// `r = length`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LengthScorer;

impl Scorer for LengthScorer {
    fn score(&self, responses: &[Response<'_>]) -> Result<Vec<f64>, EvalError> {
        Ok(responses.iter().map(|r| r.length as f64).collect())
    }
}

/// The generator's true quality.
#[derive(Debug, Clone, Copy, Default)]
pub struct GoldScorer;

impl Scorer for GoldScorer {
    fn score(&self, responses: &[Response<'_>]) -> Result<Vec<f64>, EvalError> {
        responses.iter().map(|r| r.gold.ok_or(EvalError::MissingGold)).collect()
    }
}

/// Fixed score for every response.
#[derive(Debug, Clone, Copy)]
pub struct ConstantScorer(pub f64);

impl Scorer for ConstantScorer {
    fn score(&self, responses: &[Response<'_>]) -> Result<Vec<f64>, EvalError> {
        Ok(vec![self.0; responses.len()])
    }
}

/// Formats like C's `%.9g`.
pub fn fmt_g9(x: f64) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..9).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn write_atomic(path: &Path, contents: &str) -> Result<(), EvalError> {
    std::fs::write(path, contents)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LengthBucket {
    pub length_lo: f64,
    pub length_hi: f64,
    pub count: usize,
    pub mean_reward: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasReport {
    /// `None` when rewards or lengths are constant.
    pub pearson_r: Option<f64>,
    pub buckets: Vec<LengthBucket>,
    pub n: usize,
    pub min_reward: f64,
}

impl BiasReport {
    pub fn to_csv(&self) -> String {
        let r = self.pearson_r.map_or("undefined".to_string(), fmt_g9);
        let mut out = format!("{BIAS_HEADER}\n");
        for (i, b) in self.buckets.iter().enumerate() {
            let mean = b.mean_reward.map_or(String::new(), fmt_g9);
            let _ = writeln!(
                out,
                "{i},{},{},{},{mean},{r}",
                fmt_g9(b.length_lo),
                fmt_g9(b.length_hi),
                b.count
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        write_atomic(path, &self.to_csv())
    }
}

/// Correlation between response length and reward over every response in
/// the dataset (chosen and rejected pooled), with log-spaced length buckets.
pub fn length_bias_report<S: Scorer + ?Sized>(
    scorer: &S,
    dataset: &PreferenceDataset,
    n_buckets: usize,
) -> Result<BiasReport, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let n_buckets = n_buckets.max(1);
    let mut responses = Vec::with_capacity(2 * dataset.len());
    for p in &dataset.pairs {
        responses.push(Response {
            features: &p.features_chosen,
            length: p.length_chosen,
            gold: None,
        });
        responses.push(Response {
            features: &p.features_rejected,
            length: p.length_rejected,
            gold: None,
        });
    }
    let rewards = scorer.score(&responses)?;
    let lengths: Vec<f64> = responses.iter().map(|r| r.length as f64).collect();
    let pearson_r = match pearson(&lengths, &rewards) {
        Ok(r) => Some(r),
        Err(EvalError::UndefinedCorrelation(_)) => None,
        Err(e) => return Err(e),
    };
    let lo = lengths.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = lengths.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (llo, lhi) = (lo.ln(), hi.ln());
    let span = lhi - llo;
    let edges: Vec<f64> = (0..=n_buckets)
        .map(|i| match i {
            0 => lo,
            i if i == n_buckets => hi,
            i => (llo + span * i as f64 / n_buckets as f64).exp(),
        })
        .collect();
    let mut sums = vec![0.0; n_buckets];
    let mut counts = vec![0usize; n_buckets];
    for (&len, &r) in lengths.iter().zip(&rewards) {
        let idx = if span > 0.0 {
            (((len.ln() - llo) / span * n_buckets as f64) as usize).min(n_buckets - 1)
        } else {
            0
        };
        sums[idx] += r;
        counts[idx] += 1;
    }
    let buckets = (0..n_buckets)
        .map(|i| LengthBucket {
            length_lo: edges[i],
            length_hi: edges[i + 1],
            count: counts[i],
            mean_reward: (counts[i] > 0).then(|| sums[i] / counts[i] as f64),
        })
        .collect();
    Ok(BiasReport {
        pearson_r,
        buckets,
        n: responses.len(),
        min_reward: rewards.iter().cloned().fold(f64::INFINITY, f64::min),
    })
}

/// Best-of-N KL budget `ln N − (N−1)/N`.
pub fn kl_budget(n: usize) -> Result<f64, EvalError> {
    if n == 0 {
        return Err(EvalError::InvalidN);
    }
    let n = n as f64;
    Ok(n.ln() - (n - 1.0) / n)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BonEntry {
    pub n: usize,
    pub kl_budget: f64,
    pub proxy_score: f64,
    pub gold_score: f64,
}

/// Mean proxy and gold scores of Best-of-N selections, shifted so `N = 1` is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct BonCurve {
    pub entries: Vec<BonEntry>,
}

impl BonCurve {
    pub fn gold_series(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.gold_score).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{BON_HEADER}\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                e.n,
                fmt_g9(e.kl_budget),
                fmt_g9(e.proxy_score),
                fmt_g9(e.gold_score)
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        write_atomic(path, &self.to_csv())
    }
}

/// Best-of-N selection over candidate pools.
///
/// Each prompt's candidates are put in a seeded random order, the first
/// `samples_per_prompt` are scored once, and for every `N` the proxy argmax
/// among the first `N` is selected (ties go to the earlier candidate).
pub fn bon_curve<P: Scorer + ?Sized, G: Scorer + ?Sized>(
    proxy: &P,
    gold: &G,
    pools: &[PromptPool],
    n_list: &[usize],
    samples_per_prompt: usize,
    seed: u64,
) -> Result<BonCurve, EvalError> {
    if n_list.is_empty() || n_list[0] == 0 || n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::InvalidNList);
    }
    if pools.is_empty() {
        return Err(EvalError::EmptyPool);
    }
    let max_n = *n_list.last().expect("non-empty");
    if samples_per_prompt < max_n {
        return Err(EvalError::InsufficientCandidates {
            prompt: "(samples_per_prompt)".into(),
            need: max_n,
            got: samples_per_prompt,
        });
    }
    let mut proxy_sum = vec![0.0; n_list.len()];
    let mut gold_sum = vec![0.0; n_list.len()];
    let (mut proxy_base, mut gold_base) = (0.0, 0.0);
    for (p, pool) in pools.iter().enumerate() {
        if pool.candidates.len() < samples_per_prompt {
            return Err(EvalError::InsufficientCandidates {
                prompt: pool.id.clone(),
                need: samples_per_prompt,
                got: pool.candidates.len(),
            });
        }
        let mut order: Vec<usize> = (0..pool.candidates.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(p as u64);
        order.shuffle(&mut rng);
        order.truncate(samples_per_prompt);
        let responses: Vec<Response<'_>> = order
            .iter()
            .map(|&i| {
                let c = &pool.candidates[i];
                Response {
                    features: &c.features,
                    length: c.length,
                    gold: Some(c.gold),
                }
            })
            .collect();
        let ps = proxy.score(&responses)?;
        let gs = gold.score(&responses)?;
        proxy_base += ps[0];
        gold_base += gs[0];
        let mut best = 0;
        let mut upto = 0;
        for (j, &n) in n_list.iter().enumerate() {
            for i in upto..n {
                if ps[i] > ps[best] {
                    best = i;
                }
            }
            upto = n;
            proxy_sum[j] += ps[best];
            gold_sum[j] += gs[best];
        }
    }
    let m = pools.len() as f64;
    let (proxy_base, gold_base) = (proxy_base / m, gold_base / m);
    let entries = n_list
        .iter()
        .enumerate()
        .map(|(j, &n)| {
            Ok(BonEntry {
                n,
                kl_budget: kl_budget(n)?,
                proxy_score: proxy_sum[j] / m - proxy_base,
                gold_score: gold_sum[j] / m - gold_base,
            })
        })
        .collect::<Result<_, EvalError>>()?;
    Ok(BonCurve { entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FactorRole {
    /// Chosen activates more, and the factor carries weight.
    Amplification,
    /// Chosen activates less, and the dictionary has switched the factor off.
    Rectification,
    /// Switched off and silent on both responses.
    Inactive,
    Other,
}

impl FactorRole {
    pub fn name(self) -> &'static str {
        match self {
            FactorRole::Amplification => "amplification",
            FactorRole::Rectification => "rectification",
            FactorRole::Inactive => "inactive",
            FactorRole::Other => "other",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairLabel {
    /// Weighted amplification factors account for the whole reward margin.
    Amplification,
    /// Raw activations favour the rejected response, but the weighted
    /// reward still ranks the chosen one higher.
    Rectification,
    Neither,
}

impl PairLabel {
    pub fn name(self) -> &'static str {
        match self {
            PairLabel::Amplification => "amplification",
            PairLabel::Rectification => "rectification",
            PairLabel::Neither => "neither",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorRoles {
    pub roles: Vec<FactorRole>,
    pub pair: PairLabel,
}

/// `1%` of the largest dictionary weight.
pub fn default_threshold(phi: &[f64]) -> f64 {
    DEFAULT_TAU_FRACTION * phi.iter().cloned().fold(0.0, f64::max)
}

pub fn classify_factor_roles(
    theta_c: &[f64],
    theta_r: &[f64],
    phi: &[f64],
    tau: f64,
) -> Result<FactorRoles, EvalError> {
    if theta_c.len() != phi.len() {
        return Err(EvalError::LengthMismatch(theta_c.len(), phi.len()));
    }
    if theta_r.len() != phi.len() {
        return Err(EvalError::LengthMismatch(theta_r.len(), phi.len()));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(EvalError::InvalidThreshold(tau));
    }
    const ZERO: f64 = 1e-9;
    let roles: Vec<FactorRole> = theta_c
        .iter()
        .zip(theta_r)
        .zip(phi)
        .map(|((&c, &r), &w)| {
            if c > r && w >= tau {
                FactorRole::Amplification
            } else if c < r && w < tau {
                FactorRole::Rectification
            } else if w < tau && c.abs() <= ZERO && r.abs() <= ZERO {
                FactorRole::Inactive
            } else {
                FactorRole::Other
            }
        })
        .collect();
    let mut margin = 0.0;
    let mut amp = 0.0;
    for (k, role) in roles.iter().enumerate() {
        let contrib = (theta_c[k] - theta_r[k]) * phi[k];
        margin += contrib;
        if *role == FactorRole::Amplification {
            amp += contrib;
        }
    }
    let raw_c: f64 = theta_c.iter().sum();
    let raw_r: f64 = theta_r.iter().sum();
    let pair = if margin > 0.0 && raw_c < raw_r {
        PairLabel::Rectification
    } else if margin > 0.0 && raw_c > raw_r && margin - amp <= 0.0 {
        PairLabel::Amplification
    } else {
        PairLabel::Neither
    };
    Ok(FactorRoles { roles, pair })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorDumpRow {
    pub pair_id: String,
    pub theta_chosen: Vec<f64>,
    pub theta_rejected: Vec<f64>,
    pub roles: Vec<FactorRole>,
    pub label: PairLabel,
}

/// Posterior-mean factors per pair, restricted to the `top_k` factors by Φ.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorDump {
    /// Original factor indices, by Φ descending.
    pub factors: Vec<usize>,
    /// Φ for each retained factor, non-increasing.
    pub phi: Vec<f64>,
    pub tau: f64,
    pub rows: Vec<FactorDumpRow>,
}

impl FactorDump {
    pub fn label_counts(&self) -> (usize, usize, usize) {
        let mut counts = (0, 0, 0);
        for row in &self.rows {
            match row.label {
                PairLabel::Amplification => counts.0 += 1,
                PairLabel::Rectification => counts.1 += 1,
                PairLabel::Neither => counts.2 += 1,
            }
        }
        counts
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{FACTOR_HEADER}\n");
        for row in &self.rows {
            for (rank, (&k, &phi)) in self.factors.iter().zip(&self.phi).enumerate() {
                let _ = writeln!(
                    out,
                    "{},{rank},{k},{},{},{},{},{}",
                    row.pair_id,
                    fmt_g9(phi),
                    fmt_g9(row.theta_chosen[rank]),
                    fmt_g9(row.theta_rejected[rank]),
                    row.roles[rank].name(),
                    row.label.name()
                );
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        write_atomic(path, &self.to_csv())
    }
}

/// Pair labels are computed over all factors; `top_k` only trims the output.
pub fn factor_dump(model: &RewardModel, dataset: &PreferenceDataset, top_k: usize) -> Result<FactorDump, EvalError> {
    let bnrm = model.as_bnrm().ok_or(EvalError::UnsupportedModel("factor dump"))?;
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let chosen: Vec<&[f64]> = dataset.pairs.iter().map(|p| p.features_chosen.as_slice()).collect();
    let rejected: Vec<&[f64]> = dataset.pairs.iter().map(|p| p.features_rejected.as_slice()).collect();
    let (theta_c, phi) = bnrm.factor_means(&chosen)?;
    let (theta_r, _) = bnrm.factor_means(&rejected)?;
    let mut order: Vec<usize> = (0..phi.len()).collect();
    order.sort_by(|&a, &b| phi[b].total_cmp(&phi[a]).then(a.cmp(&b)));
    order.truncate(top_k.min(phi.len()));
    let tau = default_threshold(&phi).max(f64::MIN_POSITIVE);
    let pick = |v: &[f64]| order.iter().map(|&k| v[k]).collect::<Vec<f64>>();
    let rows = dataset
        .pairs
        .iter()
        .zip(theta_c.iter().zip(&theta_r))
        .map(|(p, (tc, tr))| {
            let roles = classify_factor_roles(tc, tr, &phi, tau)?;
            Ok(FactorDumpRow {
                pair_id: p.id.clone(),
                theta_chosen: pick(tc),
                theta_rejected: pick(tr),
                roles: order.iter().map(|&k| roles.roles[k]).collect(),
                label: roles.pair,
            })
        })
        .collect::<Result<_, EvalError>>()?;
    Ok(FactorDump {
        phi: pick(&phi),
        factors: order,
        tau,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, generate_prompt_pools, PoolKind, Split, SyntheticWorld};
    use crate::model::{BnrmModel, BtModel, ModelDims};
    use proptest::prelude::*;

    #[test]
    fn pearson_examples() {
        let xs = [1.0, 2.0, 3.0, 4.5];
        let lin: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        assert!((pearson(&xs, &lin).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson(&xs, &neg).unwrap() + 1.0).abs() < 1e-15);
        let r = pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 2.0]).unwrap();
        assert!((r - 3f64.sqrt() / 2.0).abs() < 1e-15);
        assert!(matches!(
            pearson(&[1.0, 1.0], &[1.0, 2.0]),
            Err(EvalError::UndefinedCorrelation(_))
        ));
        assert!(pearson(&[1.0], &[1.0]).is_err());
        assert!(pearson(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn kl_budget_values() {
        assert_eq!(kl_budget(1).unwrap(), 0.0);
        assert!((kl_budget(2).unwrap() - (std::f64::consts::LN_2 - 0.5)).abs() < 1e-12);
        let b = kl_budget(405).unwrap();
        assert!((5.0063..=5.0064).contains(&b), "{b}");
        assert!(kl_budget(0).is_err());
    }

    #[test]
    fn g9_formatting() {
        assert_eq!(fmt_g9(0.0), "0");
        assert_eq!(fmt_g9(1.0), "1");
        assert_eq!(fmt_g9(0.5), "0.5");
        assert_eq!(fmt_g9(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_g9(-2.0 / 3.0), "-0.666666667");
        assert_eq!(fmt_g9(123456789.0), "123456789");
        assert_eq!(fmt_g9(1234567890.0), "1.23456789e+09");
        assert_eq!(fmt_g9(0.0001), "0.0001");
        assert_eq!(fmt_g9(0.00001234), "1.234e-05");
        assert_eq!(fmt_g9(5.0063558), "5.0063558");
    }

    fn dataset() -> PreferenceDataset {
        generate_dataset(&SyntheticWorld::new(1), 200, Split::Val).unwrap()
    }

    #[test]
    fn length_scorer_has_unit_correlation() {
        let report = length_bias_report(&LengthScorer, &dataset(), 8).unwrap();
        assert!((report.pearson_r.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(report.buckets.iter().map(|b| b.count).sum::<usize>(), 400);
        assert_eq!(report.buckets.len(), 8);
        assert!(report.to_csv().starts_with(BIAS_HEADER));
    }

    #[test]
    fn constant_scorer_is_undefined() {
        let report = length_bias_report(&ConstantScorer(2.0), &dataset(), 5).unwrap();
        assert_eq!(report.pearson_r, None);
        assert!(report.to_csv().lines().nth(1).unwrap().ends_with("undefined"));
    }

    #[test]
    fn bnrm_report_is_non_negative() {
        let ds = dataset();
        let dims = ModelDims { d_in: ds.d_in().unwrap(), d_model: 8, k: 6 };
        let model = RewardModel::Bnrm(BnrmModel::init(dims, 0).unwrap());
        let report = length_bias_report(&model, &ds, 6).unwrap();
        assert!(report.min_reward >= 0.0);
    }

    fn pools(kind: PoolKind) -> Vec<PromptPool> {
        generate_prompt_pools(&SyntheticWorld::new(2), 20, 405, kind).unwrap()
    }

    #[test]
    fn gold_proxy_is_monotone() {
        let p = pools(PoolKind::Natural);
        let curve = bon_curve(&GoldScorer, &GoldScorer, &p, &DEFAULT_N_LIST, 405, 0).unwrap();
        let gold = curve.gold_series();
        assert_eq!(gold[0], 0.0);
        assert!(gold.windows(2).all(|w| w[1] >= w[0]));
        assert!(curve.to_csv().starts_with(BON_HEADER));
    }

    #[test]
    fn length_proxy_on_adversarial_pool_loses_gold() {
        let p = pools(PoolKind::Adversarial);
        let curve = bon_curve(&LengthScorer, &GoldScorer, &p, &DEFAULT_N_LIST, 405, 0).unwrap();
        for e in &curve.entries {
            if e.n >= 16 {
                assert!(e.gold_score < 0.0, "{e:?}");
            }
        }
        assert!(curve.entries.last().unwrap().gold_score <= -0.1);
    }

    #[test]
    fn bon_input_errors() {
        let p = pools(PoolKind::Natural);
        assert!(bon_curve(&GoldScorer, &GoldScorer, &p, &[1, 500], 500, 0).is_err());
        assert!(bon_curve(&GoldScorer, &GoldScorer, &p, &[1, 8], 4, 0).is_err());
        assert!(bon_curve(&GoldScorer, &GoldScorer, &p, &[2, 2], 405, 0).is_err());
        assert!(bon_curve(&GoldScorer, &GoldScorer, &[], &[1], 1, 0).is_err());
    }

    #[test]
    fn role_examples() {
        let amp = classify_factor_roles(&[2.0], &[1.0], &[0.5], 0.01).unwrap();
        assert_eq!(amp.roles, vec![FactorRole::Amplification]);
        assert_eq!(amp.pair, PairLabel::Amplification);
        let rect = classify_factor_roles(&[0.0], &[3.0], &[1e-6], 0.01).unwrap();
        assert_eq!(rect.roles, vec![FactorRole::Rectification]);
        let inactive = classify_factor_roles(&[0.0], &[0.0], &[1e-6], 0.01).unwrap();
        assert_eq!(inactive.roles, vec![FactorRole::Inactive]);
        assert!(classify_factor_roles(&[1.0], &[1.0, 2.0], &[1.0], 0.01).is_err());
        assert!(classify_factor_roles(&[1.0], &[1.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn rectified_pair() {
        // raw activations favour rejected through factor 1, which Φ switches off
        let r = classify_factor_roles(&[1.0, 0.0], &[0.5, 5.0], &[1.0, 1e-6], 0.01).unwrap();
        assert_eq!(r.roles, vec![FactorRole::Amplification, FactorRole::Rectification]);
        assert_eq!(r.pair, PairLabel::Rectification);
    }

    #[test]
    fn factor_dump_contract() {
        let ds = dataset();
        let dims = ModelDims { d_in: ds.d_in().unwrap(), d_model: 8, k: 6 };
        let model = RewardModel::Bnrm(BnrmModel::init(dims, 3).unwrap());
        let full = factor_dump(&model, &ds, 6).unwrap();
        assert_eq!(full.factors.len(), 6);
        assert!(full.phi.windows(2).all(|w| w[0] >= w[1]));
        let top = factor_dump(&model, &ds, 2).unwrap();
        assert_eq!(top.factors[..], full.factors[..2]);
        assert_eq!(full.to_csv(), factor_dump(&model, &ds, 6).unwrap().to_csv());
        let (a, r, n) = full.label_counts();
        assert_eq!(a + r + n, ds.len());
        let bt = RewardModel::Bt(BtModel::init(dims, 3).unwrap());
        assert!(matches!(factor_dump(&bt, &ds, 6), Err(EvalError::UnsupportedModel(_))));
    }

    proptest! {
        #[test]
        fn pearson_affine_invariant(
            xs in prop::collection::vec(-100.0f64..100.0, 3..40),
            a in 0.1f64..10.0,
            b in -50.0f64..50.0,
        ) {
            let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x * x + i as f64).collect();
            if let Ok(r) = pearson(&xs, &ys) {
                let xt: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
                let yt: Vec<f64> = ys.iter().map(|y| a * y + b).collect();
                prop_assert!((pearson(&xt, &ys).unwrap() - r).abs() < 1e-12);
                prop_assert!((pearson(&xs, &yt).unwrap() - r).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&r));
            }
        }

        #[test]
        fn roles_partition_factors(
            v in prop::collection::vec((0.0f64..3.0, 0.0f64..3.0, 0.0f64..1.0), 1..20),
            tau in 0.001f64..0.5,
        ) {
            let tc: Vec<f64> = v.iter().map(|t| t.0).collect();
            let tr: Vec<f64> = v.iter().map(|t| t.1).collect();
            let phi: Vec<f64> = v.iter().map(|t| t.2).collect();
            let roles = classify_factor_roles(&tc, &tr, &phi, tau).unwrap();
            prop_assert_eq!(roles.roles.len(), v.len());
        }

        #[test]
        fn kl_budget_strictly_increasing(n in 1usize..100_000) {
            prop_assert!(kl_budget(n + 1).unwrap() > kl_budget(n).unwrap());
        }
    }
}
