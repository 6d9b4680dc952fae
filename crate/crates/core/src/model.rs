//! Encoder-decoder report generator.
//!
//! Patches are projected and encoded by a pre-norm self-attention stack. A
//! condensation layer summarizes them into `z_v`; its attention picks the
//! salient patches whose raw embeddings are pooled into region queries for
//! the memory bank. Retrieved sentence aggregates are projected to model
//! width and condensed into `z_t`. The decoder cross-attends over
//! `[encoded patches; z_v; z_t; projected aggregates]`, each row tagged with a
//! learned type embedding, and replaces its feed-forward blocks with
//! mixture-of-experts layers.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::condense::{attend, AttentionParams, TcLayer};
use crate::corpus::{BOS, EOS};
use crate::error::{Error, Result};
use crate::layers::{dropout, Builder, FeedForward, LayerNorm};
use crate::memory::{
    pool_regions, retrieve_on_graph, select_salient_patches, MemoryBank, Reranker, RetrievalResult,
};
use crate::moe::{GateDecision, LoadStats, MoeLayer, RoutingNoise};
use crate::params::{ParamId, ParamStore};
use crate::rng::{self, Stream};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Patch and sentence embedding width; filled from the dataset.
    pub input_dim: usize,
    /// Filled from the vocabulary.
    pub vocab_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    pub experts: usize,
    pub routing_top_k: usize,
    pub max_len: usize,
    pub aux_weight: f64,
    pub recall_size: usize,
    pub final_top_k: usize,
    pub patch_ratio: f64,
    pub group_size: usize,
    pub dropout: f64,
    pub use_reranker: bool,
    pub use_moe: bool,
    pub noisy_routing: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            input_dim: 32,
            vocab_size: 200,
            dim: 64,
            heads: 4,
            encoder_layers: 3,
            decoder_layers: 3,
            ffn_dim: 256,
            experts: 4,
            routing_top_k: 2,
            max_len: 64,
            aux_weight: 0.01,
            recall_size: 20,
            final_top_k: 3,
            patch_ratio: 0.4,
            group_size: 20,
            dropout: 0.1,
            use_reranker: true,
            use_moe: true,
            noisy_routing: true,
            seed: 7,
        }
    }

    pub fn paper() -> Self {
        Self {
            dim: 512,
            ffn_dim: 2048,
            max_len: 128,
            ..Self::desk()
        }
    }

    /// Tiny configuration used for finite-difference checks.
    pub fn micro() -> Self {
        Self {
            input_dim: 6,
            vocab_size: 11,
            dim: 8,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            ffn_dim: 12,
            experts: 3,
            routing_top_k: 2,
            max_len: 16,
            recall_size: 4,
            final_top_k: 2,
            group_size: 3,
            dropout: 0.0,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("dim", self.dim),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("experts", self.experts),
            ("recall_size", self.recall_size),
            ("final_top_k", self.final_top_k),
            ("group_size", self.group_size),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config(
                "heads",
                format!("{} does not divide dim {}", self.heads, self.dim),
            ));
        }
        if self.routing_top_k == 0 || self.routing_top_k > self.experts {
            return Err(Error::config(
                "routing_top_k",
                format!("{} must lie in 1..={}", self.routing_top_k, self.experts),
            ));
        }
        if self.final_top_k > self.recall_size {
            return Err(Error::config(
                "final_top_k",
                format!("{} exceeds recall_size {}", self.final_top_k, self.recall_size),
            ));
        }
        if self.vocab_size <= EOS as usize + 1 {
            return Err(Error::config("vocab_size", "must exceed the reserved tokens"));
        }
        if self.max_len < 2 {
            return Err(Error::config("max_len", "must be at least 2"));
        }
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return Err(Error::config("aux_weight", "must be finite and non-negative"));
        }
        if !(self.patch_ratio > 0.0 && self.patch_ratio <= 1.0) {
            return Err(Error::config("patch_ratio", "must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Role of a row in the decoder's cross-attention memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenType {
    Visual = 0,
    CondensedVisual = 1,
    CondensedText = 2,
    RegionText = 3,
}

/// Randomness used by a training-mode pass.
pub struct TrainStreams {
    pub dropout: Stream,
    pub routing: Stream,
}

pub enum Mode {
    Eval,
    Train(Box<TrainStreams>),
}

impl Mode {
    /// Training mode whose dropout masks and routing noise derive from `seed`.
    pub fn train(seed: u64) -> Self {
        Mode::Train(Box::new(TrainStreams {
            dropout: rng::stream(seed, "dropout"),
            routing: rng::stream(seed, "routing"),
        }))
    }

    fn dropout_rng(&mut self) -> Option<&mut Stream> {
        match self {
            Mode::Eval => None,
            Mode::Train(s) => Some(&mut s.dropout),
        }
    }

    fn routing(&mut self, noisy: bool) -> RoutingNoise<'_, Stream> {
        match self {
            Mode::Train(s) if noisy => RoutingNoise::Sample(&mut s.routing),
            _ => RoutingNoise::Off,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new<R: rand::Rng>(b: &mut Builder<'_, R>, from: usize, to: usize) -> Self {
        Self {
            w: b.weight("w", from, to),
            b: b.zeros("b", 1, to),
        }
    }

    fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn_norm: LayerNorm,
    attn: AttentionParams,
    ffn_norm: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub enum DecoderFfn {
    Dense(FeedForward),
    Moe(MoeLayer),
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_norm: LayerNorm,
    self_attn: AttentionParams,
    cross_norm: LayerNorm,
    cross_attn: AttentionParams,
    ffn_norm: LayerNorm,
    ffn: DecoderFfn,
}

#[derive(Clone, Debug)]
struct Layout {
    input: Linear,
    encoder: Vec<EncoderLayer>,
    tc_visual: TcLayer,
    reranker: Option<Reranker>,
    text: Linear,
    tc_text: TcLayer,
    types: ParamId,
    tokens: ParamId,
    decoder: Vec<DecoderLayer>,
    final_norm: LayerNorm,
    output: Linear,
}

/// Result of encoding one case.
pub struct EncoderState {
    /// Cross-attention memory rows.
    pub memory: Var,
    pub types: Vec<TokenType>,
    /// Head-averaged attention of the visual condensation over patches.
    pub visual_attention: Vec<f64>,
    pub salient: Vec<usize>,
    pub retrieval: RetrievalResult,
}

pub struct DecoderOutput {
    /// `positions x vocab`.
    pub logits: Var,
    /// One `1 x 1` load-balance loss per mixture layer.
    pub aux: Vec<Var>,
    pub stats: Vec<LoadStats>,
    pub decisions: Vec<Vec<GateDecision>>,
}

/// Training objective for one case.
pub struct CaseLoss {
    pub total: Var,
    pub nll: Var,
    pub aux: Vec<Var>,
    pub stats: Vec<LoadStats>,
    pub tokens: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    layout: Layout,
}

/// Sinusoidal encodings for positions `0..len`.
pub fn positional_encoding(len: usize, dim: usize) -> Matrix {
    let mut m = Matrix::zeros(len, dim);
    for pos in 0..len {
        for i in 0..dim {
            let exponent = (2 * (i / 2)) as f64 / dim as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            m.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    m
}

/// Decoder inputs `[BOS, y...]` and targets `[y..., EOS]`.
pub fn teacher_forcing(report: &[u32]) -> (Vec<u32>, Vec<Option<usize>>) {
    let mut inputs = Vec::with_capacity(report.len() + 1);
    inputs.push(BOS);
    inputs.extend_from_slice(report);
    let mut targets: Vec<Option<usize>> = report.iter().map(|&t| Some(t as usize)).collect();
    targets.push(Some(EOS as usize));
    (inputs, targets)
}

fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|i| i % n <= i / n).collect()
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng::stream(config.seed, "init");
        let c = &config;
        let layout = {
            let mut b = Builder::new(&mut store, &mut r);
            let input = b.scoped("input", |b| Linear::new(b, c.input_dim, c.dim));
            let encoder = (0..c.encoder_layers)
                .map(|i| {
                    b.scoped(&format!("encoder.{i}"), |b| EncoderLayer {
                        attn_norm: b.scoped("attn_norm", |b| LayerNorm::new(b, c.dim)),
                        attn: b.scoped("attn", |b| AttentionParams::new(b, c.dim, c.heads)),
                        ffn_norm: b.scoped("ffn_norm", |b| LayerNorm::new(b, c.dim)),
                        ffn: b.scoped("ffn", |b| FeedForward::new(b, c.dim, c.ffn_dim)),
                    })
                })
                .collect();
            let tc_visual = b.scoped("tc_visual", |b| TcLayer::new(b, c.dim, c.heads, c.ffn_dim));
            let reranker = c
                .use_reranker
                .then(|| b.scoped("reranker", |b| Reranker::new(b, c.input_dim)));
            let text = b.scoped("text", |b| Linear::new(b, c.input_dim, c.dim));
            let tc_text = b.scoped("tc_text", |b| TcLayer::new(b, c.dim, c.heads, c.ffn_dim));
            let types = b.uniform("types", 4, c.dim, c.dim);
            let tokens = b.uniform("tokens", c.vocab_size, c.dim, c.dim);
            let decoder = (0..c.decoder_layers)
                .map(|i| {
                    b.scoped(&format!("decoder.{i}"), |b| DecoderLayer {
                        self_norm: b.scoped("self_norm", |b| LayerNorm::new(b, c.dim)),
                        self_attn: b.scoped("self_attn", |b| AttentionParams::new(b, c.dim, c.heads)),
                        cross_norm: b.scoped("cross_norm", |b| LayerNorm::new(b, c.dim)),
                        cross_attn: b.scoped("cross_attn", |b| AttentionParams::new(b, c.dim, c.heads)),
                        ffn_norm: b.scoped("ffn_norm", |b| LayerNorm::new(b, c.dim)),
                        ffn: if c.use_moe {
                            DecoderFfn::Moe(b.scoped("moe", |b| {
                                MoeLayer::new(b, c.dim, c.ffn_dim, c.experts, c.routing_top_k)
                            }))
                        } else {
                            DecoderFfn::Dense(b.scoped("ffn", |b| FeedForward::new(b, c.dim, c.ffn_dim)))
                        },
                    })
                })
                .collect();
            let final_norm = b.scoped("final_norm", |b| LayerNorm::new(b, c.dim));
            let output = b.scoped("output", |b| Linear::new(b, c.dim, c.vocab_size));
            Layout {
                input,
                encoder,
                tc_visual,
                reranker,
                text,
                tc_text,
                types,
                tokens,
                decoder,
                final_norm,
                output,
            }
        };
        Ok(Self {
            config,
            store,
            layout,
        })
    }

    /// Rebuilds a model around previously saved parameters. Every parameter
    /// of the layout must be present with the expected shape.
    pub fn with_params(config: ModelConfig, params: &ParamStore) -> Result<Self> {
        let mut model = Self::new(config)?;
        if params.len() != model.store.len() {
            return Err(Error::format(
                "checkpoint",
                format!("{} tensors, model expects {}", params.len(), model.store.len()),
            ));
        }
        let ids: Vec<ParamId> = model.store.ids().collect();
        for id in ids {
            let name = model.store.name(id).to_string();
            let src = params
                .id(&name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {name}")))?;
            let value = params.value(src);
            if value.shape() != model.store.value(id).shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!("tensor {name} has shape {:?}", value.shape()),
                ));
            }
            *model.store.value_mut(id) = value.clone();
        }
        Ok(model)
    }

    pub fn reranker(&self) -> Option<&Reranker> {
        self.layout.reranker.as_ref()
    }

    /// Mixture layers in decoder order.
    pub fn moe_layers(&self) -> Vec<&MoeLayer> {
        self.layout
            .decoder
            .iter()
            .filter_map(|l| match &l.ffn {
                DecoderFfn::Moe(m) => Some(m),
                DecoderFfn::Dense(_) => None,
            })
            .collect()
    }

    pub fn encode<'a>(
        &'a self,
        g: &mut Graph<'a>,
        patches: &Matrix,
        bank: &MemoryBank,
        mode: &mut Mode,
    ) -> Result<EncoderState> {
        let c = &self.config;
        let store = &self.store;
        let l = &self.layout;
        if patches.rows() == 0 {
            return Err(Error::Empty("case has no patches".into()));
        }
        if patches.cols() != c.input_dim || bank.dim() != c.input_dim {
            return Err(Error::Shape(format!(
                "patches have dimension {} and bank {}, model expects {}",
                patches.cols(),
                bank.dim(),
                c.input_dim
            )));
        }
        let raw = g.constant(patches.clone());
        let mut x = l.input.forward(g, store, raw);
        for layer in &l.encoder {
            let n = layer.attn_norm.forward(g, store, x);
            let a = attend(g, store, &layer.attn, n, n, n, None).output;
            let a = dropout(g, a, c.dropout, mode.dropout_rng());
            x = g.add(x, a);
            let n = layer.ffn_norm.forward(g, store, x);
            let f = layer.ffn.forward(g, store, n);
            let f = dropout(g, f, c.dropout, mode.dropout_rng());
            x = g.add(x, f);
        }

        let visual = l.tc_visual.forward(g, store, x);
        let salient = select_salient_patches(&visual.attention, c.patch_ratio)?;
        let regions = pool_regions(patches, &salient, c.group_size)?;
        let recall = c.recall_size.min(bank.len());
        let top_k = c.final_top_k.min(recall);
        let (aggregated, retrieval) =
            retrieve_on_graph(g, store, l.reranker.as_ref(), &regions, bank, recall, top_k)?;
        let text = l.text.forward(g, store, aggregated);
        let z_t = l.tc_text.forward(g, store, text).output;

        let memory = g.concat_rows(&[x, visual.output, z_t, text]);
        let mut types = vec![TokenType::Visual; patches.rows()];
        types.push(TokenType::CondensedVisual);
        types.push(TokenType::CondensedText);
        types.extend(std::iter::repeat_n(TokenType::RegionText, regions.len()));
        let type_idx: Vec<usize> = types.iter().map(|&t| t as usize).collect();
        let table = g.param(store, l.types);
        let tags = g.gather_rows(table, &type_idx);
        let memory = g.add(memory, tags);
        Ok(EncoderState {
            memory,
            types,
            visual_attention: visual.attention,
            salient,
            retrieval,
        })
    }

    pub fn decode<'a>(
        &'a self,
        g: &mut Graph<'a>,
        memory: Var,
        inputs: &[u32],
        mode: &mut Mode,
    ) -> Result<DecoderOutput> {
        let c = &self.config;
        let store = &self.store;
        let l = &self.layout;
        let n = inputs.len();
        if n == 0 {
            return Err(Error::Empty("empty decoder input".into()));
        }
        if n > c.max_len {
            return Err(Error::InvalidArgument(format!(
                "prefix of {n} tokens exceeds max_len {}",
                c.max_len
            )));
        }
        if let Some(&bad) = inputs.iter().find(|&&t| t as usize >= c.vocab_size) {
            return Err(Error::UnknownTokenId(bad));
        }
        let idx: Vec<usize> = inputs.iter().map(|&t| t as usize).collect();
        let table = g.param(store, l.tokens);
        let emb = g.gather_rows(table, &idx);
        let pe = g.constant(positional_encoding(n, c.dim));
        let mut x = g.add(emb, pe);
        let mask = causal_mask(n);
        let mut aux = Vec::new();
        let mut stats = Vec::new();
        let mut decisions = Vec::new();
        for layer in &l.decoder {
            let h = layer.self_norm.forward(g, store, x);
            let a = attend(g, store, &layer.self_attn, h, h, h, Some(&mask)).output;
            let a = dropout(g, a, c.dropout, mode.dropout_rng());
            x = g.add(x, a);
            let h = layer.cross_norm.forward(g, store, x);
            let a = attend(g, store, &layer.cross_attn, h, memory, memory, None).output;
            let a = dropout(g, a, c.dropout, mode.dropout_rng());
            x = g.add(x, a);
            let h = layer.ffn_norm.forward(g, store, x);
            let f = match &layer.ffn {
                DecoderFfn::Dense(ffn) => ffn.forward(g, store, h),
                DecoderFfn::Moe(moe) => {
                    let out = moe.forward(g, store, h, &mut mode.routing(c.noisy_routing));
                    aux.push(out.aux);
                    stats.push(out.stats);
                    decisions.push(out.decisions);
                    out.output
                }
            };
            let f = dropout(g, f, c.dropout, mode.dropout_rng());
            x = g.add(x, f);
        }
        let x = l.final_norm.forward(g, store, x);
        let logits = l.output.forward(g, store, x);
        Ok(DecoderOutput {
            logits,
            aux,
            stats,
            decisions,
        })
    }

    pub fn forward<'a>(
        &'a self,
        g: &mut Graph<'a>,
        patches: &Matrix,
        bank: &MemoryBank,
        inputs: &[u32],
        mode: &mut Mode,
    ) -> Result<(EncoderState, DecoderOutput)> {
        let enc = self.encode(g, patches, bank, mode)?;
        let dec = self.decode(g, enc.memory, inputs, mode)?;
        Ok((enc, dec))
    }

    /// `nll + aux_weight * mean(aux)` for one report under teacher forcing.
    pub fn case_loss<'a>(
        &'a self,
        g: &mut Graph<'a>,
        patches: &Matrix,
        bank: &MemoryBank,
        report: &[u32],
        mode: &mut Mode,
    ) -> Result<CaseLoss> {
        let (inputs, targets) = teacher_forcing(report);
        let (_, dec) = self.forward(g, patches, bank, &inputs, mode)?;
        let nll = g
            .cross_entropy(dec.logits, &targets)
            .ok_or_else(|| Error::Empty("every target is padding".into()))?;
        let total = if dec.aux.is_empty() {
            nll
        } else {
            let parts = if dec.aux.len() == 1 {
                dec.aux[0]
            } else {
                g.concat_cols(&dec.aux)
            };
            let column = g.transpose(parts);
            let mean = g.mean_rows(column);
            let weighted = g.scale(mean, self.config.aux_weight);
            g.add(nll, weighted)
        };
        Ok(CaseLoss {
            total,
            nll,
            aux: dec.aux,
            stats: dec.stats,
            tokens: targets.len(),
        })
    }

    /// Cross-attention memory for a case, computed in evaluation mode.
    pub fn encode_case(&self, patches: &Matrix, bank: &MemoryBank) -> Result<Matrix> {
        let mut g = Graph::inference();
        let enc = self.encode(&mut g, patches, bank, &mut Mode::Eval)?;
        Ok(g.value(enc.memory).clone())
    }

    /// Log-probabilities of the token following `prefix`, evaluation mode.
    pub fn next_log_probs(&self, memory: &Matrix, prefix: &[u32]) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let mem = g.constant(memory.clone());
        let dec = self.decode(&mut g, mem, prefix, &mut Mode::Eval)?;
        let logits = g.value(dec.logits);
        Ok(log_softmax(logits.row(logits.rows() - 1)))
    }
}

pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    xs.iter().map(|x| x - lse).collect()
}

/// Mean negative log-likelihood over non-padding positions.
pub fn nll_loss(logits: &Matrix, targets: &[Option<usize>]) -> Result<f64> {
    if logits.rows() != targets.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        if t >= logits.cols() {
            return Err(Error::InvalidArgument(format!("target {t} outside vocabulary")));
        }
        total -= log_softmax(logits.row(i))[t];
        count += 1;
    }
    if count == 0 {
        return Err(Error::Empty("every target is padding".into()));
    }
    Ok(total / count as f64)
}

/// `nll + weight * mean(aux)`; no mixture layers means no penalty.
pub fn total_loss(nll: f64, aux: &[f64], weight: f64) -> f64 {
    if aux.is_empty() {
        return nll;
    }
    nll + weight * (aux.iter().sum::<f64>() / aux.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, CorpusSpec};
    use crate::memory::build_training_bank;
    use rand::Rng;

    fn setup(config: ModelConfig) -> (Model, MemoryBank, Matrix) {
        let spec = CorpusSpec {
            n_cases: 8,
            dim: config.input_dim,
            patches_min: 12,
            patches_max: 16,
            ..CorpusSpec::default()
        };
        let corpus = generate_synthetic_corpus(&spec).unwrap();
        let bank = build_training_bank(&corpus).unwrap();
        let patches = corpus.cases[0].embeddings.patches().clone();
        (Model::new(config).unwrap(), bank, patches)
    }

    fn small() -> ModelConfig {
        ModelConfig {
            input_dim: 10,
            vocab_size: 17,
            dim: 16,
            heads: 2,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn_dim: 24,
            recall_size: 6,
            group_size: 3,
            ..ModelConfig::desk()
        }
    }

    fn eval_logits(model: &Model, patches: &Matrix, bank: &MemoryBank, inputs: &[u32]) -> Matrix {
        let mut g = Graph::inference();
        let (_, dec) = model.forward(&mut g, patches, bank, inputs, &mut Mode::Eval).unwrap();
        g.value(dec.logits).clone()
    }

    #[test]
    fn validation_names_fields() {
        let bad = ModelConfig {
            experts: 0,
            ..ModelConfig::desk()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "experts"));
        let bad = ModelConfig {
            routing_top_k: 5,
            ..ModelConfig::desk()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "routing_top_k"));
        ModelConfig::paper().validate().unwrap();
        ModelConfig::micro().validate().unwrap();
    }

    #[test]
    fn decoder_is_causal() {
        let (model, bank, patches) = setup(small());
        let a = [1u32, 5, 6, 7, 8, 9];
        let mut b = a;
        b[4] = 12;
        let la = eval_logits(&model, &patches, &bank, &a);
        let lb = eval_logits(&model, &patches, &bank, &b);
        for i in 0..4 {
            for j in 0..la.cols() {
                assert!((la.get(i, j) - lb.get(i, j)).abs() <= 1e-10);
            }
        }
        assert!(la.row(4) != lb.row(4));
    }

    #[test]
    fn patch_order_does_not_matter() {
        let (model, bank, patches) = setup(small());
        let n = patches.rows();
        let perm: Vec<usize> = (0..n).rev().collect();
        let rows: Vec<&[f64]> = perm.iter().map(|&i| patches.row(i)).collect();
        let shuffled = Matrix::from_rows(&rows).unwrap();
        let inputs = [1u32, 4, 9, 10];
        let a = eval_logits(&model, &patches, &bank, &inputs);
        let b = eval_logits(&model, &shuffled, &bank, &inputs);
        assert!(a.max_abs_diff(&b) <= 1e-8);
    }

    #[test]
    fn single_expert_matches_dense_decoder() {
        let moe_cfg = ModelConfig {
            experts: 1,
            routing_top_k: 1,
            ..small()
        };
        let dense_cfg = ModelConfig {
            use_moe: false,
            ..moe_cfg.clone()
        };
        let (moe, bank, patches) = setup(moe_cfg);
        let mut dense = Model::new(dense_cfg).unwrap();
        let ids: Vec<ParamId> = dense.store.ids().collect();
        for id in ids {
            let name = dense.store.name(id).replace(".ffn.", ".moe.expert0.");
            let src = moe.store.id(&name).unwrap_or_else(|| moe.store.id(dense.store.name(id)).unwrap());
            *dense.store.value_mut(id) = moe.store.value(src).clone();
        }
        let inputs = [1u32, 7, 3, 12, 9];
        let a = eval_logits(&moe, &patches, &bank, &inputs);
        let b = eval_logits(&dense, &patches, &bank, &inputs);
        assert!(a.max_abs_diff(&b) <= 1e-10);
    }

    #[test]
    fn memory_layout_and_types() {
        let (model, bank, patches) = setup(small());
        let mut g = Graph::inference();
        let enc = model.encode(&mut g, &patches, &bank, &mut Mode::Eval).unwrap();
        let regions = enc.retrieval.regions.len();
        assert_eq!(g.shape(enc.memory), (patches.rows() + 2 + regions, 16));
        assert_eq!(enc.types.len(), patches.rows() + 2 + regions);
        assert_eq!(enc.salient.len(), (0.4 * patches.rows() as f64).ceil() as usize);
        assert!(g.value(enc.memory).is_finite());
    }

    #[test]
    fn nll_examples() {
        let uniform = Matrix::zeros(3, 8);
        let t = [Some(1), Some(4), Some(7)];
        assert!((nll_loss(&uniform, &t).unwrap() - 8f64.ln()).abs() < 1e-12);
        let mut peaked = Matrix::zeros(3, 8);
        for (i, &ti) in t.iter().enumerate() {
            peaked.set(i, ti.unwrap(), 1e6);
        }
        assert!(nll_loss(&peaked, &t).unwrap() < 1e-9);
        assert!(nll_loss(&uniform, &[None, None, None]).is_err());
    }

    #[test]
    fn nll_matches_graph_cross_entropy() {
        let mut r = rng::stream(3, "nll");
        let logits = Matrix::from_vec(5, 9, (0..45).map(|_| r.random_range(-3.0..3.0)).collect()).unwrap();
        let targets = [Some(0), None, Some(8), Some(3), Some(3)];
        let mut g = Graph::inference();
        let v = g.constant(logits.clone());
        let ce = g.cross_entropy(v, &targets).unwrap();
        assert!((g.scalar(ce) - nll_loss(&logits, &targets).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        assert!((total_loss(2.0, &[1.0], 0.01) - 2.01).abs() < 1e-15);
        assert_eq!(total_loss(2.5, &[1.3, 1.1], 0.0), 2.5);
        let aux = [1.4, 1.2, 1.9];
        let mean = aux.iter().sum::<f64>() / 3.0;
        let d = total_loss(3.0, &aux, 0.1) - total_loss(3.0, &aux, 0.01);
        assert!((d - 0.09 * mean).abs() < 1e-12);
    }

    #[test]
    fn graph_loss_decomposes() {
        let (model, bank, patches) = setup(small());
        let mut g = Graph::new();
        let loss = model
            .case_loss(&mut g, &patches, &bank, &[4, 5, 6], &mut Mode::train(1))
            .unwrap();
        let aux: Vec<f64> = loss.aux.iter().map(|&a| g.scalar(a)).collect();
        assert_eq!(aux.len(), 2);
        let expected = total_loss(g.scalar(loss.nll), &aux, 0.01);
        assert!((g.scalar(loss.total) - expected).abs() < 1e-14);
        assert_eq!(loss.tokens, 4);
    }

    #[test]
    fn rejects_long_prefix_and_bad_tokens() {
        let (model, bank, patches) = setup(small());
        let mut g = Graph::inference();
        let enc = model.encode(&mut g, &patches, &bank, &mut Mode::Eval).unwrap();
        let long = vec![4u32; 65];
        assert!(model.decode(&mut g, enc.memory, &long, &mut Mode::Eval).is_err());
        assert!(model.decode(&mut g, enc.memory, &[1, 99], &mut Mode::Eval).is_err());
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding(3, 4);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.get(1, 0) - 1f64.sin()).abs() < 1e-15);
        assert!((pe.get(2, 3) - (2.0 / 100.0f64).cos()).abs() < 1e-15);
    }
}
