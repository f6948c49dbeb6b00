//! Command implementations behind the `hat` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use hat_core::data::{
    generate_synthetic, split_dataset, write_dataset, DataError, Dataset, DatasetFiles,
    SplitFractions, SynthConfig,
};
use hat_core::eval::{evaluate, EvalError, EvalOptions, EvalReport, Task, DEFAULT_RESAMPLES};
use hat_core::model::{CheckpointMeta, HatModel, ModelError};
use hat_core::numerics::{Checkpoint, NumericsError};
use hat_core::sampling::SamplingError;
use hat_core::training::{
    run_ablation_suite, train, write_ablation_csv, write_logs, TrainConfig, TrainError,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const REPORT_FILE: &str = "report.jsonl";
pub const ABLATION_FILE: &str = "ablation.csv";

#[derive(Debug, Parser)]
#[command(
    name = "hat",
    version,
    about = "History-aware outfit compatibility model"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Generate(GenerateArgs),
    /// Train a model and write its best checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one task.
    Eval(EvalArgs),
    /// Run every ablation variant and write a CSV table.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed in the config file.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// One of cp_random, cp_hard, fitb_random, fitb_hard.
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to the model's configured history bound.
    #[arg(long)]
    pub max_history: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
    pub resamples: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
    pub resamples: usize,
}

/// Error raised for bad invocations, reported with the `usage` class.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// Written to the output directory before any work starts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub dataset_fingerprint: Option<String>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(MANIFEST_FILE);
        let mut line = serde_json::to_string(self)?;
        line.push('\n');
        fs::write(&path, line).with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(text.trim())?)
    }
}

/// Short error class printed ahead of the message on failure.
pub fn error_class(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return "usage";
        }
        if cause.is::<ConfigError>() {
            return "config";
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return match e {
                TrainError::Config(_) => "config",
                TrainError::Diverged { .. } => "diverged",
                TrainError::Io(..) => "io",
                _ => "train",
            };
        }
        if let Some(e) = cause.downcast_ref::<DataError>() {
            return match e {
                DataError::Io(..) => "io",
                DataError::Config(_) => "config",
                _ => "data",
            };
        }
        if cause.is::<EvalError>() {
            return "eval";
        }
        if cause.is::<SamplingError>() {
            return "sampling";
        }
        if cause.is::<ModelError>() || cause.is::<NumericsError>() {
            return "model";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "error"
}

#[derive(Debug, thiserror::Error)]
#[error("{path}: {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

/// Parses a TOML config. Every key is required; unknown keys are rejected.
pub fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).map_err(|e| {
        ConfigError {
            path: path.display().to_string(),
            message: e.message().to_string(),
        }
        .into()
    })
}

/// SHA-256 over the three dataset files, each prefixed by its name.
pub fn dataset_fingerprint(dir: &Path) -> Result<String> {
    let files = DatasetFiles::in_dir(dir);
    let mut h = Sha256::new();
    for (name, path) in [
        ("items", &files.items),
        ("outfits", &files.outfits),
        ("shoppers", &files.shoppers),
    ] {
        let bytes = fs::read(path).map_err(|e| DataError::Io(path.display().to_string(), e))?;
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

fn load_data(dir: &Path) -> Result<(Dataset, String)> {
    let fingerprint = dataset_fingerprint(dir)?;
    let ds = DatasetFiles::in_dir(dir).load()?;
    info!(
        "loaded {} items, {} outfits, {} shoppers from {}",
        ds.items().len(),
        ds.outfits().len(),
        ds.shoppers().len(),
        dir.display()
    );
    Ok((ds, fingerprint))
}

pub fn parse_task(name: &str) -> Result<Task> {
    name.parse::<Task>().map_err(|_| {
        let valid: Vec<&str> = Task::ALL.iter().map(|t| t.name()).collect();
        UsageError(format!(
            "unknown task {name:?}; valid tasks: {}",
            valid.join(", ")
        ))
        .into()
    })
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<PathBuf> {
    let config: SynthConfig = load_toml(&args.config)?;
    let mut manifest = RunManifest {
        command: "generate".into(),
        config_path: Some(args.config.clone()),
        config: serde_json::to_value(&config)?,
        seed: args.seed,
        dataset_fingerprint: None,
        checkpoint: None,
        out_dir: args.out.clone(),
    };
    manifest.write(&args.out)?;
    let ds = generate_synthetic(&config, args.seed)?;
    write_dataset(&ds, &args.out)?;
    manifest.dataset_fingerprint = Some(dataset_fingerprint(&args.out)?);
    manifest.write(&args.out)?;
    info!(
        "wrote {} outfits for {} shoppers to {}",
        ds.outfits().len(),
        ds.shoppers().len(),
        args.out.display()
    );
    Ok(args.out.clone())
}

fn train_config(path: &Path, seed: Option<u64>) -> Result<TrainConfig> {
    let mut config: TrainConfig = load_toml(path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

pub fn cmd_train(args: &TrainArgs) -> Result<PathBuf> {
    let config = train_config(&args.config, args.seed)?;
    let (ds, fingerprint) = load_data(&args.data)?;
    let ck_path = args.out.join(CHECKPOINT_FILE);
    RunManifest {
        command: "train".into(),
        config_path: Some(args.config.clone()),
        config: serde_json::to_value(&config)?,
        seed: config.seed,
        dataset_fingerprint: Some(fingerprint),
        checkpoint: Some(ck_path.clone()),
        out_dir: args.out.clone(),
    }
    .write(&args.out)?;

    let (ds, report) = split_dataset(ds, config.fractions()?, config.seed);
    if !report.small_shoppers.is_empty() {
        log::warn!(
            "{} shoppers kept entirely in train",
            report.small_shoppers.len()
        );
    }
    let outcome = match train(&ds, &config) {
        Ok(o) => o,
        Err(TrainError::Diverged { step, last_good }) => {
            let path = args.out.join("last_good.bin");
            last_good.save(&path)?;
            return Err(TrainError::Diverged { step, last_good })
                .with_context(|| format!("last good checkpoint written to {}", path.display()));
        }
        Err(e) => return Err(e.into()),
    };
    write_logs(&outcome, &args.out)?;
    outcome.checkpoint(&config).save(&ck_path)?;
    info!(
        "best epoch {} (val CP-Random AUC {:?}); checkpoint at {}",
        outcome.best_epoch,
        outcome.best_val_auc,
        ck_path.display()
    );
    Ok(ck_path)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let task = parse_task(&args.task)?;
    if args.resamples == 0 {
        return Err(UsageError("--resamples must be at least 1".into()).into());
    }
    let ck = Checkpoint::load(&args.checkpoint)?;
    let meta = CheckpointMeta::parse(&ck)?;
    let max_history = args.max_history.unwrap_or(meta.config.max_history);
    let (ds, fingerprint) = load_data(&args.data)?;
    RunManifest {
        command: "eval".into(),
        config_path: None,
        config: serde_json::json!({
            "task": task,
            "max_history": max_history,
            "resamples": args.resamples,
            "model": meta,
        }),
        seed: args.seed,
        dataset_fingerprint: Some(fingerprint),
        checkpoint: Some(args.checkpoint.clone()),
        out_dir: args.out.clone(),
    }
    .write(&args.out)?;

    let Some(split) = meta.split else {
        bail!(UsageError(format!(
            "{} carries no split record; evaluate a checkpoint written by `hat train`",
            args.checkpoint.display()
        )));
    };
    let fractions =
        SplitFractions::new(split.fractions[0], split.fractions[1], split.fractions[2])?;
    let (ds, _) = split_dataset(ds, fractions, split.seed);
    let model = HatModel::from_checkpoint(&ck)?;
    let opts = EvalOptions {
        resamples: args.resamples,
        ..EvalOptions::new(max_history, args.seed)
    };
    let report = evaluate(&model, &ds, task, &opts)?.report;
    let path = args.out.join(REPORT_FILE);
    let mut f = fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?;
    serde_json::to_writer(&mut f, &report)?;
    f.write_all(b"\n")?;
    info!(
        "{task}: {} {:.4} [{:.4}, {:.4}]",
        report.metric, report.point, report.lower, report.upper
    );
    Ok(report)
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<PathBuf> {
    if args.resamples == 0 {
        return Err(UsageError("--resamples must be at least 1".into()).into());
    }
    let config = train_config(&args.config, args.seed)?;
    let (ds, fingerprint) = load_data(&args.data)?;
    RunManifest {
        command: "ablate".into(),
        config_path: Some(args.config.clone()),
        config: serde_json::json!({ "train": config, "resamples": args.resamples }),
        seed: config.seed,
        dataset_fingerprint: Some(fingerprint.clone()),
        checkpoint: None,
        out_dir: args.out.clone(),
    }
    .write(&args.out)?;
    let rows = run_ablation_suite(&ds, &config, args.resamples, &fingerprint)?;
    let path = args.out.join(ABLATION_FILE);
    write_ablation_csv(&path, &rows)?;
    Ok(path)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a).map(drop),
        Command::Train(a) => cmd_train(a).map(drop),
        Command::Eval(a) => cmd_eval(a).map(drop),
        Command::Ablate(a) => cmd_ablate(a).map(drop),
    }
}
