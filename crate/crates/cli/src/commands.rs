//! Subcommand implementations.

use std::io::Write;
use std::path::{Path, PathBuf};

use bnrm::checkpoint::Checkpoint;
use bnrm::datagen::{
    generate_dataset, generate_prompt_pools, load_jsonl, save_jsonl, PoolKind, PreferenceDataset, Provenance, Split,
};
use bnrm::eval::{
    bon_curve, factor_dump, fmt_g9, length_bias_report, GoldScorer, LengthScorer, Scorer, DEFAULT_BUCKETS,
};
use bnrm::trainer::{evaluate_accuracy, train};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::{Cli, Command, PoolArg, ScorerArg};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VAL_FILE: &str = "val.jsonl";
pub const HARD_FILE: &str = "hard.jsonl";
pub const PROVENANCE_FILE: &str = "provenance.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOG_FILE: &str = "train_log.csv";
pub const EVAL_HEADER: &str = "dataset,n,accuracy";

fn say(out: &mut dyn Write, line: std::fmt::Arguments<'_>) -> Result<(), CliError> {
    writeln!(out, "{line}").map_err(|e| CliError::Data(format!("stdout: {e}")))
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let config = match &cli.config {
        Some(path) => {
            let cfg = RunConfig::load(path)?.with_seed(cli.seed);
            cfg.validate()?;
            Some(cfg)
        }
        None => None,
    };
    if cli.print_effective_config {
        let cfg = config.ok_or_else(|| CliError::Config("--print-effective-config needs --config".into()))?;
        return say(out, format_args!("{}", cfg.effective_json()?));
    }
    let out_path = cli
        .out
        .as_deref()
        .ok_or_else(|| CliError::Config("--out is required".into()))?;
    let need_config = || {
        config
            .as_ref()
            .ok_or_else(|| CliError::Config("this command needs --config".into()))
    };
    match &cli.command {
        Command::GenData => cmd_gen_data(need_config()?, out_path, out),
        Command::Train { data } => cmd_train(need_config()?, data, out_path, out),
        Command::Eval { checkpoint, data } => cmd_eval(checkpoint, data, out_path, out),
        Command::BiasReport {
            checkpoint,
            data,
            scorer,
            buckets,
        } => {
            let buckets = buckets
                .or(config.as_ref().map(|c| c.eval.n_buckets))
                .unwrap_or(DEFAULT_BUCKETS);
            cmd_bias_report(checkpoint.as_deref(), data, *scorer, buckets, out_path, out)
        }
        Command::Bon {
            checkpoint,
            proxy,
            pool,
        } => cmd_bon(need_config()?, checkpoint.as_deref(), *proxy, *pool, out_path, out),
        Command::DumpFactors {
            checkpoint,
            data,
            top_k,
        } => {
            let top_k = top_k.or(config.as_ref().map(|c| c.eval.top_k)).unwrap_or(usize::MAX);
            cmd_dump_factors(checkpoint, data, top_k, out_path, out)
        }
    }
}

#[derive(Serialize)]
struct ProvenanceFile<'a> {
    train: &'a Provenance,
    val: &'a Provenance,
    hard: &'a Provenance,
}

/// Writes `train.jsonl`, `val.jsonl`, `hard.jsonl` and `provenance.json` into `dir`.
pub fn cmd_gen_data(cfg: &RunConfig, dir: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let world = cfg.world()?;
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let splits = [
        (Split::Train, cfg.world.n_train, TRAIN_FILE),
        (Split::Val, cfg.world.n_val, VAL_FILE),
        (Split::Hard, cfg.world.n_hard, HARD_FILE),
    ];
    let mut datasets = Vec::new();
    for (split, n, file) in splits {
        let ds = generate_dataset(&world, n, split)?;
        save_jsonl(&ds, &dir.join(file))?;
        say(out, format_args!("pairs_{} = {}", split.name(), ds.len()))?;
        datasets.push(ds);
    }
    let prov: Vec<&Provenance> = datasets
        .iter()
        .map(|d| d.provenance.as_ref().expect("generated datasets carry provenance"))
        .collect();
    let file = ProvenanceFile {
        train: prov[0],
        val: prov[1],
        hard: prov[2],
    };
    let json = serde_json::to_string_pretty(&file).map_err(|e| CliError::Data(e.to_string()))?;
    let path = dir.join(PROVENANCE_FILE);
    std::fs::write(&path, json + "\n").map_err(|e| CliError::io(&path, e))?;
    say(
        out,
        format_args!("train_chosen_longer = {:.4}", datasets[0].chosen_longer_fraction()),
    )
}

fn load(path: &Path) -> Result<PreferenceDataset, CliError> {
    load_jsonl(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// `path` itself if it is a file, else `path/default`.
fn resolve(path: &Path, default: &str) -> PathBuf {
    if path.is_dir() {
        path.join(default)
    } else {
        path.to_path_buf()
    }
}

/// Trains on `<data>/train.jsonl` and writes `checkpoint.json` and `train_log.csv` into `dir`.
pub fn cmd_train(cfg: &RunConfig, data: &Path, dir: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    if !data.is_dir() {
        return Err(CliError::Data(format!(
            "{} must be a directory holding {TRAIN_FILE} and {VAL_FILE}",
            data.display()
        )));
    }
    let train_set = load(&data.join(TRAIN_FILE))?;
    let val_set = load(&data.join(VAL_FILE))?;
    let mut tc = cfg.train.clone();
    tc.checkpoint_path = None;
    tc.log_path = None;
    let (ckpt, log) = train(&tc, &train_set, &val_set)?;
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    ckpt.save(&dir.join(CHECKPOINT_FILE))?;
    let log_path = dir.join(LOG_FILE);
    log.write_csv(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    let last = log.records.last().expect("at least one step");
    say(out, format_args!("method = {}", tc.method.name()))?;
    say(out, format_args!("steps = {}", log.records.len()))?;
    say(out, format_args!("final_loss = {:.6}", last.loss))?;
    // for ensembles the log holds per-member accuracies; report the averaged model
    let val_acc = evaluate_accuracy(&ckpt.reward_model(), &val_set)?;
    say(out, format_args!("val_acc = {val_acc:.4}"))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn check_dims(ckpt: &Checkpoint, ds: &PreferenceDataset, name: &Path) -> Result<(), CliError> {
    let got = ds.d_in()?;
    ckpt.ensure_d_in(got)
        .map_err(|e| CliError::Data(format!("{}: {e}", name.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

/// Accuracy on one JSONL file, or on each standard split present in a directory.
pub fn cmd_eval(checkpoint: &Path, data: &Path, csv: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let ckpt = load_checkpoint(checkpoint)?;
    let model = ckpt.reward_model();
    let files: Vec<PathBuf> = if data.is_dir() {
        [TRAIN_FILE, VAL_FILE, HARD_FILE]
            .iter()
            .map(|f| data.join(f))
            .filter(|p| p.exists())
            .collect()
    } else {
        vec![data.to_path_buf()]
    };
    if files.is_empty() {
        return Err(CliError::Data(format!("no datasets found in {}", data.display())));
    }
    let mut text = format!("{EVAL_HEADER}\n");
    for path in files {
        let ds = load(&path)?;
        check_dims(&ckpt, &ds, &path)?;
        let acc = evaluate_accuracy(&model, &ds)?;
        let name = path.file_stem().map_or("data".into(), |s| s.to_string_lossy().into_owned());
        text.push_str(&format!("{name},{},{}\n", ds.len(), fmt_g9(acc)));
        say(out, format_args!("accuracy_{name} = {acc:.4}"))?;
    }
    write_file(csv, &text)
}

fn scorer_for(kind: ScorerArg, checkpoint: Option<&Path>) -> Result<(Box<dyn Scorer>, Option<Checkpoint>), CliError> {
    Ok(match kind {
        ScorerArg::Model => {
            let path = checkpoint.ok_or_else(|| CliError::Config("scorer `model` needs --checkpoint".into()))?;
            let ckpt = load_checkpoint(path)?;
            (Box::new(ckpt.reward_model()), Some(ckpt))
        }
        ScorerArg::Gold => (Box::new(GoldScorer), None),
        ScorerArg::Length => (Box::new(LengthScorer), None),
    })
}

pub fn cmd_bias_report(
    checkpoint: Option<&Path>,
    data: &Path,
    scorer: ScorerArg,
    buckets: usize,
    csv: &Path,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    if scorer == ScorerArg::Gold {
        return Err(CliError::Config(
            "bias-report scores individual responses; gold quality is only known per pair".into(),
        ));
    }
    let path = resolve(data, HARD_FILE);
    let ds = load(&path)?;
    let (scorer, ckpt) = scorer_for(scorer, checkpoint)?;
    if let Some(ckpt) = &ckpt {
        check_dims(ckpt, &ds, &path)?;
    }
    let report = length_bias_report(scorer.as_ref(), &ds, buckets)?;
    write_file(csv, &report.to_csv())?;
    match report.pearson_r {
        Some(r) => say(out, format_args!("pearson_r = {r:.3}"))?,
        None => say(out, format_args!("pearson_r = undefined"))?,
    }
    say(out, format_args!("min_reward = {}", fmt_g9(report.min_reward)))
}

pub fn cmd_bon(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    proxy: Option<ScorerArg>,
    pool: Option<PoolArg>,
    csv: &Path,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let e = &cfg.eval;
    let pool = match pool {
        Some(PoolArg::Natural) => PoolKind::Natural,
        Some(PoolArg::Adversarial) => PoolKind::Adversarial,
        None => e.pool,
    };
    let world = cfg.world()?;
    let (proxy, ckpt) = scorer_for(proxy.unwrap_or(e.proxy), checkpoint)?;
    if let Some(ckpt) = &ckpt {
        ckpt.ensure_d_in(world.d_in)?;
    }
    let pools = generate_prompt_pools(&world, e.n_prompts, e.samples_per_prompt, pool)?;
    let curve = bon_curve(proxy.as_ref(), &GoldScorer, &pools, &e.n_list, e.samples_per_prompt, cfg.seed)?;
    write_file(csv, &curve.to_csv())?;
    let last = curve.entries.last().expect("non-empty n_list");
    say(out, format_args!("kl_budget_max = {:.4}", last.kl_budget))?;
    say(out, format_args!("proxy_score_max_n = {:.4}", last.proxy_score))?;
    say(out, format_args!("gold_score_max_n = {:.4}", last.gold_score))
}

pub fn cmd_dump_factors(
    checkpoint: &Path,
    data: &Path,
    top_k: usize,
    csv: &Path,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let ckpt = load_checkpoint(checkpoint)?;
    let path = resolve(data, VAL_FILE);
    let ds = load(&path)?;
    check_dims(&ckpt, &ds, &path)?;
    let dump = factor_dump(&ckpt.reward_model(), &ds, top_k)?;
    write_file(csv, &dump.to_csv())?;
    let (amp, rect, neither) = dump.label_counts();
    say(out, format_args!("amplification_pairs = {amp}"))?;
    say(out, format_args!("rectification_pairs = {rect}"))?;
    say(out, format_args!("other_pairs = {neither}"))?;
    let active = dump.phi.iter().filter(|&&p| p >= dump.tau).count();
    say(out, format_args!("active_factors_shown = {active}"))
}
