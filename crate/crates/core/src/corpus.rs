//! Synthetic corpora standing in for slide patch embeddings, sentence
//! embeddings, and report token sequences.
//!
//! Every case draws a latent topic. Its report walks the topic's phrase
//! grammar, its sentence embeddings sit near per-phrase directions, and a
//! share of its patches carry the same phrase directions on top of the topic
//! centroid. Reports are therefore predictable from patches and cosine
//! retrieval from the sentence bank is informative.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{self, Matrix};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Unordered patch embeddings of one slide, stored one patch per row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    case_id: String,
    patches: Matrix,
}

impl EmbeddingSet {
    pub fn new(case_id: impl Into<String>, patches: Matrix) -> Result<Self> {
        if patches.rows() == 0 {
            return Err(Error::Empty("embedding set has no patches".into()));
        }
        if patches.cols() == 0 {
            return Err(Error::Shape("embedding dimension must be positive".into()));
        }
        if !patches.is_finite() {
            return Err(Error::InvalidArgument("non-finite patch embedding".into()));
        }
        Ok(Self {
            case_id: case_id.into(),
            patches,
        })
    }

    pub fn case_id(&self) -> &str {
        &self.case_id
    }

    pub fn patches(&self) -> &Matrix {
        &self.patches
    }

    pub fn dim(&self) -> usize {
        self.patches.cols()
    }

    pub fn len(&self) -> usize {
        self.patches.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.rows() == 0
    }
}

/// A sentence of a report together with its frozen embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Sentence {
    pub text: String,
    pub embedding: Vec<f64>,
}

/// One dataset row: a slide's patches, its report, and its report sentences.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub embeddings: EmbeddingSet,
    /// Whitespace tokens of the report.
    pub report: Vec<String>,
    pub sentences: Vec<Sentence>,
    pub topic: usize,
}

impl Case {
    pub fn id(&self) -> &str {
        self.embeddings.case_id()
    }
}

/// Ordered token ids of a report, without BOS/EOS.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct ReportSequence {
    pub tokens: Vec<u32>,
}

impl ReportSequence {
    pub fn new(tokens: Vec<u32>) -> Self {
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub n_cases: usize,
    pub dim: usize,
    pub patches_min: usize,
    pub patches_max: usize,
    pub vocab_size: usize,
    pub report_len_min: usize,
    pub report_len_max: usize,
    pub n_topics: usize,
    /// Share of patches carrying a phrase signature.
    pub informative_fraction: f64,
    pub patch_noise: f64,
    pub sentence_noise: f64,
    /// Probability that a report token is replaced by one filler word.
    /// Non-zero values give a heavily skewed token distribution.
    pub filler_rate: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_cases: 64,
            dim: 32,
            patches_min: 40,
            patches_max: 64,
            vocab_size: 200,
            report_len_min: 12,
            report_len_max: 32,
            n_topics: 4,
            informative_fraction: 0.4,
            patch_noise: 0.5,
            sentence_noise: 0.2,
            filler_rate: 0.0,
            val_fraction: 0.1,
            test_fraction: 0.1,
            seed: 7,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_cases", self.n_cases),
            ("dim", self.dim),
            ("patches_min", self.patches_min),
            ("patches_max", self.patches_max),
            ("report_len_min", self.report_len_min),
            ("report_len_max", self.report_len_max),
            ("n_topics", self.n_topics),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.vocab_size < 5 {
            return Err(Error::config("vocab_size", "must be at least 5"));
        }
        if self.patches_min > self.patches_max {
            return Err(Error::config("patches_min", "exceeds patches_max"));
        }
        if self.report_len_min > self.report_len_max {
            return Err(Error::config("report_len_min", "exceeds report_len_max"));
        }
        for (field, v) in [
            ("informative_fraction", self.informative_fraction),
            ("filler_rate", self.filler_rate),
            ("val_fraction", self.val_fraction),
            ("test_fraction", self.test_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(field, "must lie in [0, 1]"));
            }
        }
        if self.val_fraction + self.test_fraction >= 1.0 {
            return Err(Error::config("val_fraction", "val + test must leave training cases"));
        }
        for (field, v) in [("patch_noise", self.patch_noise), ("sentence_noise", self.sentence_noise)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// A generated corpus with its case-level split.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub cases: Vec<Case>,
    pub splits: Vec<Split>,
}

impl Corpus {
    pub fn split(&self, which: Split) -> Vec<&Case> {
        self.cases
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == which)
            .map(|(c, _)| c)
            .collect()
    }
}

const SYLLABLES: [&str; 16] = [
    "ba", "ce", "di", "fo", "gu", "ha", "ki", "lo", "mu", "na", "pe", "ri", "so", "tu", "ve", "zy",
];

/// Deterministic pseudo-word for index `i`.
fn word(i: usize) -> String {
    let mut s = String::new();
    s.push_str(SYLLABLES[(i / 16) % 16]);
    s.push_str(SYLLABLES[i % 16]);
    let hi = i / 256;
    if hi > 0 {
        s.push_str(&hi.to_string());
    }
    s
}

fn unit_gaussian<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let n = tensor::l2_norm(&v).max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

fn noise<R: Rng + ?Sized>(rng: &mut R, d: usize, scale: f64) -> Vec<f64> {
    let s = scale / (d as f64).sqrt();
    (0..d)
        .map(|_| s * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

/// Values are rounded through `f32` so the on-disk format is lossless.
fn to_f32_grid(v: &mut [f64]) {
    for x in v {
        *x = *x as f32 as f64;
    }
}

struct Grammar {
    words: Vec<String>,
    phrases: Vec<Vec<usize>>,
    phrase_dirs: Vec<Vec<f64>>,
    centroids: Vec<Vec<f64>>,
    /// `slots[topic][slot]` lists `(phrase, weight)` variants.
    slots: Vec<Vec<Vec<(usize, f64)>>>,
}

const VARIANTS: usize = 3;

fn build_grammar<R: Rng + ?Sized>(spec: &CorpusSpec, rng: &mut R) -> Grammar {
    let d = spec.dim;
    // The last content word is reserved as the filler token.
    let n_words = spec.vocab_size - 5;
    let words: Vec<String> = (0..=n_words).map(word).collect();
    let n_slots = spec.report_len_max.div_ceil(2) + 1;
    let mut phrases = Vec::new();
    let mut phrase_dirs = Vec::new();
    let mut slots = Vec::with_capacity(spec.n_topics);
    for _ in 0..spec.n_topics {
        let mut topic_slots = Vec::with_capacity(n_slots);
        for _ in 0..n_slots {
            let mut variants = Vec::with_capacity(VARIANTS);
            for _ in 0..VARIANTS {
                let len = rng.random_range(2..=5);
                let p: Vec<usize> = (0..len).map(|_| rng.random_range(0..n_words.max(1))).collect();
                phrases.push(p);
                phrase_dirs.push(unit_gaussian(rng, d));
                variants.push((phrases.len() - 1, rng.random_range(0.2..1.0)));
            }
            topic_slots.push(variants);
        }
        slots.push(topic_slots);
    }
    let centroids = (0..spec.n_topics).map(|_| unit_gaussian(rng, d)).collect();
    Grammar {
        words,
        phrases,
        phrase_dirs,
        centroids,
        slots,
    }
}

fn pick_weighted<R: Rng + ?Sized>(rng: &mut R, items: &[(usize, f64)]) -> usize {
    let total: f64 = items.iter().map(|(_, w)| w).sum();
    let mut u = rng.random_range(0.0..total);
    for &(p, w) in items {
        if u < w {
            return p;
        }
        u -= w;
    }
    items[items.len() - 1].0
}

/// Generates a corpus; a pure function of `spec`.
pub fn generate_synthetic_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let d = spec.dim;
    let mut grammar_rng = rng::stream(spec.seed, "corpus/grammar");
    let grammar = build_grammar(spec, &mut grammar_rng);
    let filler = grammar.words[grammar.words.len() - 1].clone();
    let mut rng = rng::stream(spec.seed, "corpus/cases");

    let mut cases = Vec::with_capacity(spec.n_cases);
    for ci in 0..spec.n_cases {
        let topic = rng.random_range(0..spec.n_topics);
        let target_len = rng.random_range(spec.report_len_min..=spec.report_len_max);
        let mut report: Vec<String> = Vec::new();
        let mut chosen = Vec::new();
        for slot in &grammar.slots[topic] {
            if report.len() >= target_len {
                break;
            }
            let p = pick_weighted(&mut rng, slot);
            chosen.push(p);
            report.extend(grammar.phrases[p].iter().map(|&w| grammar.words[w].clone()));
        }
        report.truncate(spec.report_len_max);
        if spec.filler_rate > 0.0 {
            for tok in report.iter_mut() {
                if rng.random_bool(spec.filler_rate) {
                    *tok = filler.clone();
                }
            }
        }

        let sentences = chosen
            .iter()
            .map(|&p| {
                let text = grammar.phrases[p]
                    .iter()
                    .map(|&w| grammar.words[w].as_str())
                    .collect::<Vec<_>>()
                    .join(" ");
                let mut e: Vec<f64> = grammar.phrase_dirs[p]
                    .iter()
                    .zip(noise(&mut rng, d, spec.sentence_noise))
                    .map(|(a, b)| a + b)
                    .collect();
                to_f32_grid(&mut e);
                Sentence { text, embedding: e }
            })
            .collect::<Vec<_>>();

        let n_patches = rng.random_range(spec.patches_min..=spec.patches_max);
        let n_informative = ((n_patches as f64 * spec.informative_fraction).round() as usize)
            .max(chosen.len().min(n_patches));
        let mut rows = Vec::with_capacity(n_patches);
        let centroid = &grammar.centroids[topic];
        for pi in 0..n_patches {
            let mut v: Vec<f64> = noise(&mut rng, d, spec.patch_noise);
            for (x, c) in v.iter_mut().zip(centroid) {
                *x += c;
            }
            if pi < n_informative && !chosen.is_empty() {
                let p = chosen[pi % chosen.len()];
                for (x, s) in v.iter_mut().zip(&grammar.phrase_dirs[p]) {
                    *x += 1.5 * s;
                }
            }
            to_f32_grid(&mut v);
            rows.push(v);
        }
        rows.shuffle(&mut rng);
        let embeddings = EmbeddingSet::new(format!("case-{ci:04}"), Matrix::from_rows(&rows)?)?;
        cases.push(Case {
            embeddings,
            report,
            sentences,
            topic,
        });
    }

    let mut order: Vec<usize> = (0..spec.n_cases).collect();
    order.shuffle(&mut rng::stream(spec.seed, "corpus/split"));
    let n_val = (spec.n_cases as f64 * spec.val_fraction).round() as usize;
    let n_test = (spec.n_cases as f64 * spec.test_fraction).round() as usize;
    let mut splits = vec![Split::Train; spec.n_cases];
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_val {
            splits[i] = Split::Val;
        } else if rank < n_val + n_test {
            splits[i] = Split::Test;
        }
    }
    if !splits.contains(&Split::Train) {
        return Err(Error::config("n_cases", "too few cases to leave a training split"));
    }
    Ok(Corpus {
        spec: spec.clone(),
        cases,
        splits,
    })
}

/// Bijective token table with reserved ids 0..=3.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds from a stored token list whose first four entries are reserved.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 5 {
            return Err(Error::format("vocabulary", "needs at least 5 entries"));
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens[i] != *r {
                return Err(Error::format("vocabulary", format!("id {i} must be {r}")));
            }
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), i as u32).is_some() {
                return Err(Error::format("vocabulary", format!("duplicate token {t:?}")));
            }
        }
        Ok(Self {
            id_to_token: tokens,
            token_to_id,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }
}

/// Frequency-ordered vocabulary: ids from 4 in descending count, ties
/// broken lexicographically; tokens below `min_freq` are left out.
pub fn build_vocab<S: AsRef<str>>(reports: &[Vec<S>], min_freq: usize) -> Result<Vocabulary> {
    if min_freq < 1 {
        return Err(Error::config("min_freq", "must be at least 1"));
    }
    if reports.iter().all(|r| r.is_empty()) {
        return Err(Error::Empty("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in reports {
        for t in r {
            *counts.entry(t.as_ref()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_freq && !RESERVED.contains(t))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(ranked.into_iter().map(|(t, _)| t.to_string()));
    if tokens.len() < 5 {
        return Err(Error::Empty(format!("no token reaches min_freq {min_freq}")));
    }
    Vocabulary::from_tokens(tokens)
}

pub fn encode_report<S: AsRef<str>>(vocab: &Vocabulary, tokens: &[S]) -> ReportSequence {
    ReportSequence::new(
        tokens
            .iter()
            .map(|t| vocab.id(t.as_ref()).unwrap_or(UNK))
            .collect(),
    )
}

pub fn decode_tokens(vocab: &Vocabulary, ids: &[u32]) -> Result<Vec<String>> {
    ids.iter()
        .map(|&i| {
            vocab
                .token(i)
                .map(str::to_string)
                .ok_or(Error::UnknownTokenId(i))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// On-disk dataset: manifest.json plus one little-endian binary file per case.

const CASE_MAGIC: &[u8; 8] = b"RGRCASE\0";
const CASE_VERSION: u32 = 1;
pub const DATASET_MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    format: String,
    version: u32,
    spec: CorpusSpec,
    cases: Vec<CaseEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CaseEntry {
    id: String,
    file: String,
    split: Split,
    topic: usize,
}

pub(crate) fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

pub(crate) fn put_f32s(buf: &mut Vec<u8>, xs: &[f64]) {
    for &x in xs {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

/// Cursor over a byte buffer with format-aware error messages.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.what, "unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, magic: &[u8]) -> Result<()> {
        if self.take(magic.len())? != magic {
            return Err(Error::format(self.what, "bad magic"));
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::format(self.what, "invalid UTF-8"))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(self.what, "trailing bytes"));
        }
        Ok(())
    }
}

pub fn encode_case(case: &Case) -> Vec<u8> {
    let d = case.embeddings.dim();
    let mut buf = Vec::new();
    buf.extend_from_slice(CASE_MAGIC);
    put_u32(&mut buf, CASE_VERSION);
    put_u32(&mut buf, d as u32);
    put_u32(&mut buf, case.embeddings.len() as u32);
    put_u32(&mut buf, case.sentences.len() as u32);
    put_u32(&mut buf, case.report.len() as u32);
    put_u32(&mut buf, case.topic as u32);
    put_str(&mut buf, case.id());
    put_f32s(&mut buf, case.embeddings.patches().data());
    for s in &case.sentences {
        put_f32s(&mut buf, &s.embedding);
        put_str(&mut buf, &s.text);
    }
    for t in &case.report {
        put_str(&mut buf, t);
    }
    buf
}

pub fn decode_case(bytes: &[u8]) -> Result<Case> {
    let mut r = Reader::new(bytes, "case file");
    r.magic(CASE_MAGIC)?;
    let version = r.u32()?;
    if version != CASE_VERSION {
        return Err(Error::format("case file", format!("unsupported version {version}")));
    }
    let d = r.u32()? as usize;
    let n_patches = r.u32()? as usize;
    let n_sentences = r.u32()? as usize;
    let n_tokens = r.u32()? as usize;
    let topic = r.u32()? as usize;
    let id = r.string()?;
    let patches = Matrix::from_vec(n_patches, d, r.f32s(n_patches * d)?)?;
    let mut sentences = Vec::with_capacity(n_sentences);
    for _ in 0..n_sentences {
        let embedding = r.f32s(d)?;
        let text = r.string()?;
        sentences.push(Sentence { text, embedding });
    }
    let report = (0..n_tokens).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(Case {
        embeddings: EmbeddingSet::new(id, patches)?,
        report,
        sentences,
        topic,
    })
}

/// Writes `corpus` under `dir`, which must be empty or absent.
pub fn write_dataset(dir: &Path, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir.join("cases"))?;
    let mut entries = Vec::with_capacity(corpus.cases.len());
    for (case, split) in corpus.cases.iter().zip(&corpus.splits) {
        let file = format!("cases/{}.bin", case.id());
        fs::File::create(dir.join(&file))?.write_all(&encode_case(case))?;
        entries.push(CaseEntry {
            id: case.id().to_string(),
            file,
            split: *split,
            topic: case.topic,
        });
    }
    let manifest = DatasetManifest {
        format: "ranger-dataset".into(),
        version: CASE_VERSION,
        spec: corpus.spec.clone(),
        cases: entries,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(DATASET_MANIFEST), text)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(dir.join(DATASET_MANIFEST))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.format != "ranger-dataset" {
        return Err(Error::format("dataset manifest", "unknown format tag"));
    }
    let mut cases = Vec::with_capacity(manifest.cases.len());
    let mut splits = Vec::with_capacity(manifest.cases.len());
    for e in &manifest.cases {
        let path: PathBuf = dir.join(&e.file);
        let mut bytes = Vec::new();
        fs::File::open(&path)?.read_to_end(&mut bytes)?;
        let case = decode_case(&bytes)?;
        if case.id() != e.id {
            return Err(Error::format(
                "dataset manifest",
                format!("{} holds case {}, expected {}", e.file, case.id(), e.id),
            ));
        }
        cases.push(case);
        splits.push(e.split);
    }
    Ok(Corpus {
        spec: manifest.spec,
        cases,
        splits,
    })
}
