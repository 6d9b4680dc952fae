//! Sentence memory bank and two-stage retrieval: attention-guided patch
//! selection, region pooling, exhaustive cosine recall, learned re-ranking,
//! and softmax aggregation over the re-ranked top-k.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::corpus::{put_f32s, put_str, put_u32, Case, Corpus, Reader, Split};
use crate::error::{Error, Result};
use crate::layers::Builder;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, Matrix};

/// Frozen sentence embeddings drawn from training reports.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    sentences: Vec<String>,
    embeddings: Matrix,
    norms: Vec<f64>,
}

impl MemoryBank {
    pub fn new(sentences: Vec<String>, embeddings: Matrix) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::Empty("memory bank needs at least one sentence".into()));
        }
        if sentences.len() != embeddings.rows() {
            return Err(Error::Shape(format!(
                "{} sentences but {} embeddings",
                sentences.len(),
                embeddings.rows()
            )));
        }
        if !embeddings.is_finite() {
            return Err(Error::InvalidArgument("non-finite bank embedding".into()));
        }
        let norms = embeddings.row_iter().map(tensor::l2_norm).collect();
        Ok(Self {
            sentences,
            embeddings,
            norms,
        })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn sentence(&self, i: usize) -> &str {
        &self.sentences[i]
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        self.embeddings.row(i)
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    /// Rows `idx` of the bank as a matrix.
    pub fn gather(&self, idx: &[usize]) -> Matrix {
        Matrix::from_rows(&idx.iter().map(|&i| self.embedding(i)).collect::<Vec<_>>())
            .expect("bank rows share a dimension")
    }
}

/// One entry per sentence, in case order then sentence order.
pub fn build_memory_bank(cases: &[&Case]) -> Result<MemoryBank> {
    if cases.is_empty() {
        return Err(Error::Empty("no cases to build a memory bank from".into()));
    }
    let d = cases[0].embeddings.dim();
    let mut sentences = Vec::new();
    let mut rows: Vec<&[f64]> = Vec::new();
    for c in cases {
        for s in &c.sentences {
            if s.embedding.len() != d {
                return Err(Error::Shape(format!(
                    "sentence of {} has dimension {}, expected {d}",
                    c.id(),
                    s.embedding.len()
                )));
            }
            sentences.push(s.text.clone());
            rows.push(&s.embedding);
        }
    }
    if rows.is_empty() {
        return Err(Error::Empty("cases contain no sentences".into()));
    }
    MemoryBank::new(sentences, Matrix::from_rows(&rows)?)
}

/// Bank over the training split only, so no validation or test report leaks
/// into retrieval.
pub fn build_training_bank(corpus: &Corpus) -> Result<MemoryBank> {
    build_memory_bank(&corpus.split(Split::Train))
}

const BANK_MAGIC: &[u8; 8] = b"RGRBANK\0";
const BANK_VERSION: u32 = 1;

pub fn encode_bank(bank: &MemoryBank) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(BANK_MAGIC);
    put_u32(&mut buf, BANK_VERSION);
    put_u32(&mut buf, bank.len() as u32);
    put_u32(&mut buf, bank.dim() as u32);
    put_f32s(&mut buf, bank.embeddings.data());
    for s in &bank.sentences {
        put_str(&mut buf, s);
    }
    buf
}

pub fn decode_bank(bytes: &[u8]) -> Result<MemoryBank> {
    let mut r = Reader::new(bytes, "bank file");
    r.magic(BANK_MAGIC)?;
    let version = r.u32()?;
    if version != BANK_VERSION {
        return Err(Error::format("bank file", format!("unsupported version {version}")));
    }
    let m = r.u32()? as usize;
    let d = r.u32()? as usize;
    let embeddings = Matrix::from_vec(m, d, r.f32s(m * d)?)?;
    let sentences = (0..m).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    MemoryBank::new(sentences, embeddings)
}

pub fn write_bank(path: &Path, bank: &MemoryBank) -> Result<()> {
    fs::write(path, encode_bank(bank))?;
    Ok(())
}

pub fn read_bank(path: &Path) -> Result<MemoryBank> {
    decode_bank(&fs::read(path)?)
}

/// Descending score, ascending index.
fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Indices of the `ceil(ratio * N)` highest attention scores, ordered by
/// descending score then ascending index.
pub fn select_salient_patches(scores: &[f64], ratio: f64) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::config("patch_ratio", format!("{ratio} is outside (0, 1]")));
    }
    if scores.is_empty() {
        return Err(Error::Empty("no attention scores".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("non-finite attention score".into()));
    }
    let keep = ((ratio * scores.len() as f64).ceil() as usize).clamp(1, scores.len());
    let mut idx = rank_desc(scores);
    idx.truncate(keep);
    Ok(idx)
}

/// Mean of a group of selected patches.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionToken {
    pub embedding: Vec<f64>,
    /// Patch indices pooled into this region.
    pub members: Vec<usize>,
}

/// Consecutive groups of `group_size` selected patches (in the given order);
/// a shorter trailing group keeps the remainder.
pub fn pool_regions(patches: &Matrix, selected: &[usize], group_size: usize) -> Result<Vec<RegionToken>> {
    if group_size < 1 {
        return Err(Error::config("group_size", "must be at least 1"));
    }
    if selected.is_empty() {
        return Err(Error::Empty("no selected patches to pool".into()));
    }
    selected
        .chunks(group_size)
        .map(|group| {
            let mut mean = vec![0.0; patches.cols()];
            for &i in group {
                if i >= patches.rows() {
                    return Err(Error::InvalidArgument(format!("patch index {i} out of range")));
                }
                for (m, v) in mean.iter_mut().zip(patches.row(i)) {
                    *m += v;
                }
            }
            for m in &mut mean {
                *m /= group.len() as f64;
            }
            Ok(RegionToken {
                embedding: mean,
                members: group.to_vec(),
            })
        })
        .collect()
}

/// Cosine similarity of `query` against every bank entry.
pub fn cosine_scores(query: &[f64], bank: &MemoryBank) -> Result<Vec<f64>> {
    if query.len() != bank.dim() {
        return Err(Error::Shape(format!(
            "query has dimension {}, bank has {}",
            query.len(),
            bank.dim()
        )));
    }
    let qn = tensor::l2_norm(query);
    if qn == 0.0 {
        return Err(Error::ZeroNorm("region embedding".into()));
    }
    if let Some(i) = bank.norms.iter().position(|&n| n == 0.0) {
        return Err(Error::ZeroNorm(format!("bank entry {i}")));
    }
    Ok(bank
        .embeddings
        .row_iter()
        .zip(&bank.norms)
        .map(|(row, n)| tensor::dot(query, row) / (qn * n))
        .collect())
}

/// Exhaustive cosine top-`recall_size`, descending similarity, ties by index.
pub fn coarse_recall(region: &[f64], bank: &MemoryBank, recall_size: usize) -> Result<Vec<usize>> {
    if recall_size == 0 || recall_size > bank.len() {
        return Err(Error::config(
            "recall_size",
            format!("{recall_size} must lie in 1..={}", bank.len()),
        ));
    }
    let sims = cosine_scores(region, bank)?;
    let mut idx = rank_desc(&sims);
    idx.truncate(recall_size);
    Ok(idx)
}

/// `s = MLP([region || candidate])`, `2d -> d -> 1` with GELU.
#[derive(Clone, Copy, Debug)]
pub struct Reranker {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub dim: usize,
}

impl Reranker {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, dim: usize) -> Self {
        Self {
            w1: b.weight("w1", 2 * dim, dim),
            b1: b.zeros("b1", 1, dim),
            w2: b.weight("w2", dim, 1),
            b2: b.zeros("b2", 1, 1),
            dim,
        }
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    /// Scores every candidate row against one `1 x d` region; returns `K x 1`.
    pub fn score<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, region: Var, candidates: Var) -> Var {
        let k = g.shape(candidates).0;
        let rep = g.gather_rows(region, &vec![0; k]);
        let x = g.concat_cols(&[rep, candidates]);
        let w1 = g.param(store, self.w1);
        let b1 = g.param(store, self.b1);
        let w2 = g.param(store, self.w2);
        let b2 = g.param(store, self.b2);
        let h = g.matmul(x, w1);
        let h = g.add_row(h, b1);
        let h = g.gelu(h);
        let s = g.matmul(h, w2);
        g.add_row(s, b2)
    }
}

pub fn rerank_score(store: &ParamStore, reranker: &Reranker, region: &[f64], candidate: &[f64]) -> Result<f64> {
    if region.len() != reranker.dim || candidate.len() != reranker.dim {
        return Err(Error::Shape(format!(
            "re-ranker expects dimension {}, got {} and {}",
            reranker.dim,
            region.len(),
            candidate.len()
        )));
    }
    let mut g = Graph::inference();
    let r = g.constant(Matrix::row_vector(region));
    let c = g.constant(Matrix::row_vector(candidate));
    let s = reranker.score(&mut g, store, r, c);
    Ok(g.value(s).get(0, 0))
}

/// Top-`k` positions of `scores` (descending, ties by lower position).
pub fn top_k_positions(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k < 1 {
        return Err(Error::config("final_top_k", "must be at least 1"));
    }
    if k > scores.len() {
        return Err(Error::config(
            "final_top_k",
            format!("{k} exceeds the {} recalled candidates", scores.len()),
        ));
    }
    let mut idx = rank_desc(scores);
    idx.truncate(k);
    Ok(idx)
}

/// Aggregation result for one region.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    /// Positions within the candidate list.
    pub selected: Vec<usize>,
    pub weights: Vec<f64>,
    pub embedding: Vec<f64>,
}

/// Softmax over the top-`k` scores, then the weighted sum of their rows.
pub fn aggregate_topk(candidates: &Matrix, scores: &[f64], k: usize) -> Result<Aggregate> {
    if candidates.rows() != scores.len() {
        return Err(Error::Shape(format!(
            "{} candidates but {} scores",
            candidates.rows(),
            scores.len()
        )));
    }
    let selected = top_k_positions(scores, k)?;
    let weights = tensor::softmax(&selected.iter().map(|&i| scores[i]).collect::<Vec<_>>());
    let mut embedding = vec![0.0; candidates.cols()];
    for (&i, w) in selected.iter().zip(&weights) {
        for (e, v) in embedding.iter_mut().zip(candidates.row(i)) {
            *e += w * v;
        }
    }
    Ok(Aggregate {
        selected,
        weights,
        embedding,
    })
}

/// Per-region retrieval trace.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionRetrieval {
    /// Bank indices from coarse recall.
    pub candidates: Vec<usize>,
    pub scores: Vec<f64>,
    /// Bank indices kept after re-ranking.
    pub selected: Vec<usize>,
    pub weights: Vec<f64>,
    pub aggregated: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub regions: Vec<RegionRetrieval>,
}

/// Retrieval recorded on a graph so re-ranker parameters receive gradients.
/// Returns the `R x d` aggregated embeddings. Without a re-ranker the
/// stage-2 scores are the stage-1 cosine similarities.
pub fn retrieve_on_graph<'a>(
    g: &mut Graph<'a>,
    store: &'a ParamStore,
    reranker: Option<&Reranker>,
    regions: &[RegionToken],
    bank: &MemoryBank,
    recall_size: usize,
    k: usize,
) -> Result<(Var, RetrievalResult)> {
    if regions.is_empty() {
        return Err(Error::Empty("no regions to retrieve for".into()));
    }
    let mut outs = Vec::with_capacity(regions.len());
    let mut trace = Vec::with_capacity(regions.len());
    for region in regions {
        let candidates = coarse_recall(&region.embedding, bank, recall_size)?;
        let cand = g.constant(bank.gather(&candidates));
        let scores_col = match reranker {
            Some(rr) => {
                if rr.dim != bank.dim() {
                    return Err(Error::Shape(format!(
                        "re-ranker dimension {} differs from bank dimension {}",
                        rr.dim,
                        bank.dim()
                    )));
                }
                let q = g.constant(Matrix::row_vector(&region.embedding));
                rr.score(g, store, q, cand)
            }
            None => {
                let sims = cosine_scores(&region.embedding, bank)?;
                let col: Vec<f64> = candidates.iter().map(|&i| sims[i]).collect();
                g.constant(Matrix::from_vec(col.len(), 1, col)?)
            }
        };
        let scores: Vec<f64> = g.value(scores_col).data().to_vec();
        let selected = top_k_positions(&scores, k)?;
        let picked = g.gather_rows(scores_col, &selected);
        let row = g.transpose(picked);
        let weights = g.softmax_rows(row, None);
        let chosen = g.gather_rows(cand, &selected);
        let agg = g.matmul(weights, chosen);
        trace.push(RegionRetrieval {
            selected: selected.iter().map(|&p| candidates[p]).collect(),
            candidates,
            scores,
            weights: g.value(weights).data().to_vec(),
            aggregated: g.value(agg).data().to_vec(),
        });
        outs.push(agg);
    }
    let stacked = if outs.len() == 1 {
        outs[0]
    } else {
        g.concat_rows(&outs)
    };
    Ok((stacked, RetrievalResult { regions: trace }))
}

/// Coarse recall, re-ranking, and top-k aggregation for every region.
pub fn retrieve(
    regions: &[RegionToken],
    bank: &MemoryBank,
    recall_size: usize,
    k: usize,
    store: &ParamStore,
    reranker: Option<&Reranker>,
) -> Result<RetrievalResult> {
    let mut g = Graph::inference();
    let (_, result) = retrieve_on_graph(&mut g, store, reranker, regions, bank, recall_size, k)?;
    Ok(result)
}
