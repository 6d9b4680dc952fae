use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ranger_core::checkpoint::{read_checkpoint, write_checkpoint};
use ranger_core::corpus::{generate_synthetic_corpus, read_dataset, write_dataset};
use ranger_core::memory::{build_training_bank, read_bank, write_bank};
use ranger_core::{DecodeConfig, RunConfig};

use crate::ablation::{self, Axis};
use crate::manifest::{prepare_out_dir, Recorder};
use crate::pipeline::{self, BANK, CHECKPOINT, EPOCH_LOG, GENERATIONS, LAST_CHECKPOINT, LOAD_LOG, METRICS, TRAIN_LOG};
use crate::selftest;

#[derive(Debug, Parser)]
#[command(name = "ranger", version, about = "Report generation from patch embedding sets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset.
    GenData(GenDataArgs),
    /// Build the sentence memory bank from a dataset's training split.
    BuildBank(BuildBankArgs),
    /// Train a model and keep the checkpoint with the best validation NLL.
    Train(TrainArgs),
    /// Decode reports for one split of a dataset.
    Generate(GenerateArgs),
    /// Score generations against the dataset's reference reports.
    Evaluate(EvaluateArgs),
    /// Train and score one child run per grid value, then tabulate.
    Ablate(AblateArgs),
    /// Run the acceptance suite.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Run directory to create.
    #[arg(long)]
    pub out: PathBuf,
    /// Replace an existing, non-empty run directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct BuildBankArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Memory bank file; built from the training split when absent.
    #[arg(long)]
    pub bank: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to bank.bin next to the checkpoint.
    #[arg(long)]
    pub bank: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Decoding settings are read from the [decode] section.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub generations: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset to use; generated from the configuration when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub axis: Axis,
    /// Comma-separated values; defaults to the axis' standard grid.
    #[arg(long)]
    pub values: Option<String>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Run only these criteria (1-11).
    #[arg(long, value_delimiter = ',')]
    pub only: Vec<usize>,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("configuration {}", p.display())),
        None => Ok(RunConfig::parse("")?),
    }
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    prepare_out_dir(&a.out.out, a.out.force)?;
    let mut rec = Recorder::new("gen-data").config(a.config.as_deref(), &cfg);
    if let Some(p) = &a.config {
        rec = rec.input(p);
    }
    let corpus = generate_synthetic_corpus(&cfg.corpus)?;
    write_dataset(&a.out.out, &corpus)?;
    rec.output("manifest.json");
    rec.output("cases/");
    rec.finish(&a.out.out)?;
    println!("wrote {} cases to {}", corpus.cases.len(), a.out.out.display());
    Ok(())
}

fn build_bank(a: &BuildBankArgs) -> Result<()> {
    let corpus = read_dataset(&a.data).with_context(|| format!("dataset {}", a.data.display()))?;
    prepare_out_dir(&a.out.out, a.out.force)?;
    let mut rec = Recorder::new("build-bank").input(&a.data);
    let bank = build_training_bank(&corpus)?;
    write_bank(&a.out.out.join(BANK), &bank)?;
    rec.output(BANK);
    rec.finish(&a.out.out)?;
    println!("wrote {} sentences to {}", bank.len(), a.out.out.join(BANK).display());
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let corpus = read_dataset(&a.data).with_context(|| format!("dataset {}", a.data.display()))?;
    let bank = a.bank.as_deref().map(read_bank).transpose()?;
    let dir = &a.out.out;
    prepare_out_dir(dir, a.out.force)?;
    let mut rec = Recorder::new("train").config(a.config.as_deref(), &cfg).input(&a.data);
    if let Some(p) = &a.config {
        rec = rec.input(p);
    }
    if let Some(p) = &a.bank {
        rec = rec.input(p);
    }
    let run = pipeline::train_run(&cfg, &corpus, bank, Some(dir))?;
    for f in [TRAIN_LOG, LOAD_LOG, EPOCH_LOG] {
        rec.output(f);
    }
    write_checkpoint(&dir.join(CHECKPOINT), &run.model, &run.vocab)?;
    rec.output(CHECKPOINT);
    let last = ranger_core::Model::with_params(run.model.config.clone(), &run.outcome.last)?;
    write_checkpoint(&dir.join(LAST_CHECKPOINT), &last, &run.vocab)?;
    rec.output(LAST_CHECKPOINT);
    write_bank(&dir.join(BANK), &run.bank)?;
    rec.output(BANK);
    rec.finish(dir)?;
    let best = &run.outcome.epochs[run.outcome.best_epoch];
    println!(
        "trained {} epochs ({} steps); best epoch {} train loss {:.4}{}",
        run.outcome.epochs.len(),
        run.outcome.steps.len(),
        best.epoch,
        best.train_loss,
        best.val_nll.map(|v| format!(" val NLL {v:.4}")).unwrap_or_default()
    );
    Ok(())
}

fn generate(a: &GenerateArgs) -> Result<()> {
    let mut decode = match &a.config {
        Some(p) => load_config(Some(p))?.decode,
        None => DecodeConfig::default(),
    };
    if let Some(b) = a.beam {
        decode.beam = b;
    }
    decode.validate().context("decode")?;
    let split = pipeline::parse_split(&a.split)?;
    let bank_path = match &a.bank {
        Some(p) => p.clone(),
        None => a.checkpoint.with_file_name(BANK),
    };
    let (model, vocab) = read_checkpoint(&a.checkpoint)
        .with_context(|| format!("checkpoint {}", a.checkpoint.display()))?
        .into_model()?;
    let bank = read_bank(&bank_path).with_context(|| format!("memory bank {}", bank_path.display()))?;
    let corpus = read_dataset(&a.data).with_context(|| format!("dataset {}", a.data.display()))?;
    let cases = corpus.split(split);
    if cases.is_empty() {
        bail!("split {} of {} is empty", a.split, a.data.display());
    }
    prepare_out_dir(&a.out.out, a.out.force)?;
    let mut rec = Recorder::new("generate")
        .input(&a.checkpoint)
        .input(&bank_path)
        .input(&a.data);
    if let Some(p) = &a.config {
        rec = rec.input(p);
    }
    let gens = pipeline::generate_cases(&model, &vocab, &bank, &cases, &decode)?;
    pipeline::write_generations(&a.out.out.join(GENERATIONS), &gens)?;
    rec.output(GENERATIONS);
    rec.finish(&a.out.out)?;
    println!("decoded {} cases with beam {}", gens.len(), decode.beam);
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let gens = pipeline::read_generations(&a.generations)?;
    let corpus = read_dataset(&a.data).with_context(|| format!("dataset {}", a.data.display()))?;
    let report = pipeline::evaluate_generations(&gens, &corpus)?;
    prepare_out_dir(&a.out.out, a.out.force)?;
    let mut rec = Recorder::new("evaluate").input(&a.generations).input(&a.data);
    report.write(&a.out.out.join(METRICS))?;
    rec.output(METRICS);
    rec.finish(&a.out.out)?;
    for (name, v) in ranger_core::metrics::METRIC_NAMES.iter().zip(report.values()) {
        println!("{name:<8} {v:.4}");
    }
    Ok(())
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let summary = ablation::run_ablation(&ablation::Request {
        base: &cfg,
        config_path: a.config.as_deref(),
        data: a.data.as_deref(),
        axis: a.axis,
        values: a.values.as_deref(),
        out: &a.out.out,
        force: a.out.force,
        progress: true,
    })?;
    print!("{}", summary.to_markdown());
    Ok(())
}

fn run_selftest(a: &SelftestArgs) -> Result<()> {
    let ids: Vec<usize> = if a.only.is_empty() {
        selftest::CRITERIA.iter().map(|c| c.0).collect()
    } else {
        a.only.clone()
    };
    let mut failed = Vec::new();
    for id in ids {
        let outcome = selftest::run_criterion(id)?;
        println!("{outcome}");
        if !outcome.passed {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        bail!("criteria {failed:?} failed");
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::BuildBank(a) => build_bank(a),
        Command::Train(a) => train(a),
        Command::Generate(a) => generate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Ablate(a) => ablate(a),
        Command::Selftest(a) => run_selftest(a),
    }
}
