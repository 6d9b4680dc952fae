//! Ablation grids over configuration axes and their summary tables.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use ranger_core::checkpoint::write_checkpoint;
use ranger_core::corpus::{generate_synthetic_corpus, read_dataset, write_dataset};
use ranger_core::metrics::METRIC_NAMES;
use ranger_core::{Corpus, MetricsReport, RunConfig, Split};

use crate::manifest::{prepare_out_dir, Recorder, RunManifest, MANIFEST};
use crate::pipeline::{self, CHECKPOINT, EPOCH_LOG, GENERATIONS, LOAD_LOG, METRICS, TRAIN_LOG};

pub const SUMMARY_MD: &str = "summary.md";
pub const SUMMARY_JSON: &str = "summary.json";
const DEFAULT_LAMBDA: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    /// The five cumulative module rows: baseline, reranker, MoE, noise, balance.
    #[value(name = "modules")]
    Modules,
    #[value(name = "reranker")]
    Reranker,
    #[value(name = "moe")]
    Moe,
    #[value(name = "noisy_routing")]
    NoisyRouting,
    #[value(name = "load_balance")]
    LoadBalance,
    #[value(name = "E", alias = "experts")]
    Experts,
    #[value(name = "routing_k")]
    RoutingK,
    #[value(name = "lambda")]
    Lambda,
    #[value(name = "recall_size")]
    RecallSize,
    #[value(name = "final_topk")]
    FinalTopk,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Modules => "modules",
            Axis::Reranker => "reranker",
            Axis::Moe => "moe",
            Axis::NoisyRouting => "noisy_routing",
            Axis::LoadBalance => "load_balance",
            Axis::Experts => "E",
            Axis::RoutingK => "routing_k",
            Axis::Lambda => "lambda",
            Axis::RecallSize => "recall_size",
            Axis::FinalTopk => "final_topk",
        }
    }

    pub fn default_values(self) -> &'static str {
        match self {
            Axis::Modules => "",
            Axis::Reranker | Axis::Moe | Axis::NoisyRouting | Axis::LoadBalance => "false,true",
            Axis::Experts => "2,4,8",
            Axis::RoutingK => "1,2,3",
            Axis::Lambda => "0,0.001,0.01,0.1",
            Axis::RecallSize => "10,20,50",
            Axis::FinalTopk => "1,3,5",
        }
    }
}

/// One child run of a grid.
#[derive(Clone, Debug)]
pub struct Variant {
    pub slug: String,
    pub label: String,
    pub config: RunConfig,
}

fn split_values(values: &str) -> Vec<&str> {
    values.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
}

fn parse<T: std::str::FromStr>(axis: Axis, v: &str) -> Result<T> {
    v.parse()
        .ok()
        .with_context(|| format!("value {v:?} is not valid for axis {}", axis.name()))
}

fn balance_weight(base: &RunConfig) -> f64 {
    if base.model.aux_weight > 0.0 {
        base.model.aux_weight
    } else {
        DEFAULT_LAMBDA
    }
}

fn module_rows(base: &RunConfig) -> Vec<Variant> {
    let lambda = balance_weight(base);
    let rows: [(&str, String, bool, bool, bool, bool); 5] = [
        ("baseline", "Baseline (cosine retrieval)".into(), false, false, false, false),
        ("reranker", "+ MLP Reranker".into(), true, false, false, false),
        ("moe", "+ MoE Decoder (sparse)".into(), true, true, false, false),
        ("noisy_topk", "+ Noisy Top-k Routing".into(), true, true, true, false),
        ("load_balance", format!("+ Load Balance (λ={lambda})"), true, true, true, true),
    ];
    rows.into_iter()
        .enumerate()
        .map(|(i, (slug, label, rr, moe, noisy, lb))| {
            let mut config = base.clone();
            config.model.use_reranker = rr;
            config.model.use_moe = moe;
            config.model.noisy_routing = noisy;
            config.model.aux_weight = if lb { lambda } else { 0.0 };
            Variant {
                slug: format!("{i:02}-{slug}"),
                label,
                config,
            }
        })
        .collect()
}

/// Expands an axis into child configurations; `values` defaults to the
/// axis' standard grid.
pub fn variants(base: &RunConfig, axis: Axis, values: Option<&str>) -> Result<Vec<Variant>> {
    if axis == Axis::Modules {
        if values.is_some() {
            bail!("axis modules takes no --values");
        }
        return Ok(module_rows(base));
    }
    let values = split_values(values.unwrap_or(axis.default_values()));
    if values.is_empty() {
        bail!("no values given for axis {}", axis.name());
    }
    let mut out = Vec::with_capacity(values.len());
    for (i, v) in values.iter().enumerate() {
        let mut config = base.clone();
        let m = &mut config.model;
        let label = match axis {
            Axis::Modules => unreachable!(),
            Axis::Reranker => {
                m.use_reranker = parse(axis, v)?;
                format!("reranker={v}")
            }
            Axis::Moe => {
                m.use_moe = parse(axis, v)?;
                format!("moe={v}")
            }
            Axis::NoisyRouting => {
                m.noisy_routing = parse(axis, v)?;
                format!("noisy_routing={v}")
            }
            Axis::LoadBalance => {
                let on: bool = parse(axis, v)?;
                m.aux_weight = if on { balance_weight(base) } else { 0.0 };
                format!("load_balance={v}")
            }
            Axis::Experts => {
                m.experts = parse(axis, v)?;
                format!("E={v}")
            }
            Axis::RoutingK => {
                m.routing_top_k = parse(axis, v)?;
                format!("routing_k={v}")
            }
            Axis::Lambda => {
                m.aux_weight = parse(axis, v)?;
                format!("λ={v}")
            }
            Axis::RecallSize => {
                m.recall_size = parse(axis, v)?;
                format!("K={v}")
            }
            Axis::FinalTopk => {
                m.final_top_k = parse(axis, v)?;
                format!("k={v}")
            }
        };
        config
            .validate()
            .with_context(|| format!("axis {} value {v}", axis.name()))?;
        out.push(Variant {
            slug: format!("{i:02}-{}-{v}", axis.name()),
            label,
            config,
        });
    }
    Ok(out)
}

/// Trains, decodes the test split, and scores one child run in `dir`.
pub fn run_variant(variant: &Variant, corpus: &Corpus, data_dir: &Path, dir: &Path, force: bool) -> Result<MetricsReport> {
    prepare_out_dir(dir, force)?;
    let mut rec = Recorder::new("ablate")
        .label(&variant.label)
        .config(None, &variant.config)
        .input(data_dir);
    let run = pipeline::train_run(&variant.config, corpus, None, Some(dir))?;
    for f in [TRAIN_LOG, LOAD_LOG, EPOCH_LOG] {
        rec.output(f);
    }
    write_checkpoint(&dir.join(CHECKPOINT), &run.model, &run.vocab)?;
    rec.output(CHECKPOINT);
    let test = corpus.split(Split::Test);
    if test.is_empty() {
        bail!("the dataset has no test cases to evaluate on");
    }
    let gens = pipeline::generate_cases(&run.model, &run.vocab, &run.bank, &test, &variant.config.decode)?;
    pipeline::write_generations(&dir.join(GENERATIONS), &gens)?;
    rec.output(GENERATIONS);
    let report = pipeline::evaluate_generations(&gens, corpus)?;
    report.write(&dir.join(METRICS))?;
    rec.output(METRICS);
    rec.finish(dir)?;
    Ok(report)
}

pub struct Request<'a> {
    pub base: &'a RunConfig,
    pub config_path: Option<&'a Path>,
    /// Dataset directory; generated from `base` under `out/data` when absent.
    pub data: Option<&'a Path>,
    pub axis: Axis,
    pub values: Option<&'a str>,
    pub out: &'a Path,
    pub force: bool,
    /// Print one line per child run on stderr.
    pub progress: bool,
}

/// Runs every child of the grid under `out/runs/` and writes the summary
/// tables to `out`.
pub fn run_ablation(req: &Request<'_>) -> Result<Summary> {
    let grid = variants(req.base, req.axis, req.values)?;
    prepare_out_dir(req.out, req.force)?;
    let mut rec = Recorder::new("ablate").config(req.config_path, req.base);
    if let Some(p) = req.config_path {
        rec = rec.input(p);
    }
    let data_dir = match req.data {
        Some(d) => d.to_path_buf(),
        None => {
            let d = req.out.join("data");
            write_dataset(&d, &generate_synthetic_corpus(&req.base.corpus)?)?;
            rec.output("data/");
            d
        }
    };
    rec = rec.input(&data_dir);
    let corpus = read_dataset(&data_dir).with_context(|| format!("dataset {}", data_dir.display()))?;
    let mut run_dirs = Vec::with_capacity(grid.len());
    for v in &grid {
        let child = req.out.join("runs").join(&v.slug);
        if req.progress {
            eprintln!("run {}: {}", v.slug, v.label);
        }
        run_variant(v, &corpus, &data_dir, &child, false)?;
        rec.output(&format!("runs/{}/", v.slug));
        run_dirs.push(child);
    }
    let summary = summarize_ablation(&run_dirs)?;
    for w in &summary.warnings {
        eprintln!("warning: skipped {w}");
    }
    summary.write(req.out)?;
    rec.output(SUMMARY_MD);
    rec.output(SUMMARY_JSON);
    rec.finish(req.out)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run: String,
    pub label: String,
    pub reranker: bool,
    pub moe: bool,
    pub noisy_topk: bool,
    pub load_balance: bool,
    /// BLEU-1..4, METEOR, ROUGE-L.
    pub metrics: [f64; 6],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub warnings: Vec<String>,
}

fn mark(on: bool) -> &'static str {
    if on {
        "✓"
    } else {
        "×"
    }
}

impl Summary {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Model | Reranker | MoE | Noisy Top-k | Load Balance |");
        for name in METRIC_NAMES {
            let _ = write!(s, " {name} |");
        }
        s.push_str("\n|:--|:-:|:-:|:-:|:-:|");
        s.push_str(&"--:|".repeat(METRIC_NAMES.len()));
        s.push('\n');
        for r in &self.rows {
            let _ = write!(
                s,
                "| {} | {} | {} | {} | {} |",
                r.label,
                mark(r.reranker),
                mark(r.moe),
                mark(r.noisy_topk),
                mark(r.load_balance)
            );
            for v in r.metrics {
                let _ = write!(s, " {v:.4} |");
            }
            s.push('\n');
        }
        for w in &self.warnings {
            let _ = write!(s, "\nskipped: {w}\n");
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(SUMMARY_MD), self.to_markdown())?;
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        fs::write(dir.join(SUMMARY_JSON), json)?;
        Ok(())
    }
}

fn summary_row(dir: &Path) -> Result<SummaryRow> {
    let manifest = RunManifest::read(dir)?;
    let config = manifest
        .resolved_config()?
        .with_context(|| format!("{} records no configuration", dir.join(MANIFEST).display()))?;
    let metrics = MetricsReport::read(&dir.join(METRICS)).with_context(|| format!("reading {}", dir.join(METRICS).display()))?;
    let run = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let m = &config.model;
    Ok(SummaryRow {
        label: manifest.label.unwrap_or_else(|| run.clone()),
        run,
        reranker: m.use_reranker,
        moe: m.use_moe,
        noisy_topk: m.use_moe && m.noisy_routing,
        load_balance: m.use_moe && m.aux_weight > 0.0,
        metrics: metrics.values(),
    })
}

/// Collects finished runs into a table; unreadable runs are skipped with a
/// warning.
pub fn summarize_ablation(dirs: &[PathBuf]) -> Result<Summary> {
    let mut summary = Summary::default();
    for dir in dirs {
        match summary_row(dir) {
            Ok(row) => summary.rows.push(row),
            Err(e) => summary.warnings.push(format!("{}: {e:#}", dir.display())),
        }
    }
    if summary.rows.is_empty() {
        bail!("no complete runs among {} directories", dirs.len());
    }
    Ok(summary)
}
