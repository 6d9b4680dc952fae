//! Steps shared by the subcommands: corpus to examples, training with logs,
//! decoding, and scoring.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use ranger_core::corpus::{build_vocab, decode_tokens, encode_report};
use ranger_core::decode::generate;
use ranger_core::memory::build_training_bank;
use ranger_core::metrics::evaluate_cases;
use ranger_core::train::{train, TrainOutcome};
use ranger_core::{
    Case, Corpus, DecodeConfig, Example, LoadStats, MemoryBank, MetricsReport, Model, ModelConfig, RunConfig, Split,
    TrainConfig, Vocabulary,
};

pub const CHECKPOINT: &str = "checkpoint.bin";
pub const LAST_CHECKPOINT: &str = "last.bin";
pub const BANK: &str = "bank.bin";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const LOAD_LOG: &str = "load_stats.jsonl";
pub const EPOCH_LOG: &str = "epochs.jsonl";
pub const GENERATIONS: &str = "generations.jsonl";
pub const METRICS: &str = "metrics.json";

/// Vocabulary over training-split reports.
pub fn vocabulary(corpus: &Corpus) -> Result<Vocabulary> {
    let reports: Vec<&Vec<String>> = corpus.split(Split::Train).into_iter().map(|c| &c.report).collect();
    let owned: Vec<Vec<&str>> = reports.iter().map(|r| r.iter().map(String::as_str).collect()).collect();
    Ok(build_vocab(&owned, 1)?)
}

pub fn examples(cases: &[&Case], vocab: &Vocabulary) -> Vec<Example> {
    cases
        .iter()
        .map(|c| Example {
            id: c.id().to_string(),
            patches: c.embeddings.patches().clone(),
            report: encode_report(vocab, &c.report).tokens,
        })
        .collect()
}

/// Fills in the data-dependent model dimensions.
pub fn model_config(base: &ModelConfig, corpus: &Corpus, vocab: &Vocabulary) -> ModelConfig {
    ModelConfig {
        input_dim: corpus.spec.dim,
        vocab_size: vocab.len(),
        ..base.clone()
    }
}

#[derive(Serialize)]
struct LoadLine {
    step: usize,
    epoch: usize,
    layers: Vec<LoadStats>,
}

/// JSON-lines sinks for the training logs.
struct Logs {
    steps: BufWriter<File>,
    load: BufWriter<File>,
    epochs: BufWriter<File>,
}

impl Logs {
    fn create(dir: &Path) -> Result<Self> {
        let open = |name: &str| -> Result<BufWriter<File>> {
            Ok(BufWriter::new(
                File::create(dir.join(name)).with_context(|| format!("creating {}", dir.join(name).display()))?,
            ))
        };
        Ok(Self {
            steps: open(TRAIN_LOG)?,
            load: open(LOAD_LOG)?,
            epochs: open(EPOCH_LOG)?,
        })
    }
}

fn json_line(w: &mut impl Write, value: &impl Serialize) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")
}

pub struct TrainedRun {
    /// Model holding the best parameters.
    pub model: Model,
    pub vocab: Vocabulary,
    pub bank: MemoryBank,
    pub outcome: TrainOutcome,
}

/// Trains on the corpus' training split, validating on its validation split.
/// Logs go to `log_dir` when given.
pub fn train_run(cfg: &RunConfig, corpus: &Corpus, bank: Option<MemoryBank>, log_dir: Option<&Path>) -> Result<TrainedRun> {
    let vocab = vocabulary(corpus)?;
    let bank = match bank {
        Some(b) => b,
        None => build_training_bank(corpus)?,
    };
    let train_set = examples(&corpus.split(Split::Train), &vocab);
    let val_set = examples(&corpus.split(Split::Val), &vocab);
    let mut model = Model::new(model_config(&cfg.model, corpus, &vocab))?;
    let logs = log_dir.map(Logs::create).transpose()?.map(RefCell::new);
    let failure: RefCell<Option<std::io::Error>> = RefCell::new(None);
    let record = |r: std::io::Result<()>| {
        if let Err(e) = r {
            failure.borrow_mut().get_or_insert(e);
        }
    };
    let outcome = train(
        &mut model,
        &cfg.train,
        &train_set,
        &val_set,
        &bank,
        |s| {
            if let Some(l) = &logs {
                let mut l = l.borrow_mut();
                record(json_line(&mut l.steps, s));
                let line = LoadLine {
                    step: s.step,
                    epoch: s.epoch,
                    layers: s
                        .f_usage
                        .iter()
                        .zip(&s.p_mean)
                        .map(|(f, p)| LoadStats {
                            f_usage: f.clone(),
                            p_mean: p.clone(),
                        })
                        .collect(),
                };
                record(json_line(&mut l.load, &line));
            }
        },
        |e| {
            if let Some(l) = &logs {
                record(json_line(&mut l.borrow_mut().epochs, e));
            }
        },
    )?;
    if let Some(l) = logs {
        let mut l = l.into_inner();
        for w in [&mut l.steps, &mut l.load, &mut l.epochs] {
            record(w.flush());
        }
    }
    if let Some(e) = failure.into_inner() {
        return Err(e).context("writing training logs");
    }
    let model = Model::with_params(model.config.clone(), &outcome.best)?;
    Ok(TrainedRun {
        model,
        vocab,
        bank,
        outcome,
    })
}

/// Training configuration with the overfit stop rule applied.
pub fn with_target(train: &TrainConfig, target: f64) -> TrainConfig {
    TrainConfig {
        target_nll: Some(target),
        ..train.clone()
    }
}

/// One decoded report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub case: String,
    pub tokens: Vec<String>,
    pub log_prob: f64,
    pub finished: bool,
}

pub fn generate_cases(
    model: &Model,
    vocab: &Vocabulary,
    bank: &MemoryBank,
    cases: &[&Case],
    decode: &DecodeConfig,
) -> Result<Vec<Generation>> {
    cases
        .iter()
        .map(|c| {
            let h = generate(model, c.embeddings.patches(), bank, decode)
                .with_context(|| format!("decoding case {}", c.id()))?;
            Ok(Generation {
                case: c.id().to_string(),
                tokens: decode_tokens(vocab, &h.tokens)?,
                log_prob: h.log_prob,
                finished: h.finished,
            })
        })
        .collect()
}

pub fn write_generations(path: &Path, gens: &[Generation]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for g in gens {
        json_line(&mut w, g)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_generations(path: &Path) -> Result<Vec<Generation>> {
    let r = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

/// Scores generations against the references of the same case ids.
pub fn evaluate_generations(gens: &[Generation], corpus: &Corpus) -> Result<MetricsReport> {
    if gens.is_empty() {
        bail!("no generations to evaluate");
    }
    let refs: HashMap<&str, &Vec<String>> = corpus.cases.iter().map(|c| (c.id(), &c.report)).collect();
    let mut ids = Vec::with_capacity(gens.len());
    let mut cands = Vec::with_capacity(gens.len());
    let mut references = Vec::with_capacity(gens.len());
    for g in gens {
        let r = refs
            .get(g.case.as_str())
            .ok_or_else(|| anyhow!("case {} is not in the dataset", g.case))?;
        ids.push(g.case.clone());
        cands.push(g.tokens.clone());
        references.push((*r).clone());
    }
    Ok(evaluate_cases(&ids, &cands, &references)?)
}

pub fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => bail!("unknown split {other:?}; expected train, val, or test"),
    }
}
