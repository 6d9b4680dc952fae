//! Sparsely-gated mixture-of-experts feed-forward layer.
//!
//! Routing computes `g = h W_r + eps * softplus(h W_n)` with `eps ~ N(0, I)`
//! drawn only in training, keeps the `k` largest logits per token (ties go
//! to the lower expert index), and renormalizes them with a softmax. Only
//! the selected experts are evaluated for a token.
//!
//! The load-balance loss is `E * sum_e f_e * p_e` where `f_e` is the share of
//! `(token, slot)` dispatches that went to expert `e` (a constant) and `p_e`
//! is the mean full-softmax router probability (differentiable).

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{Builder, FeedForward};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, Matrix};

/// Router projections, stored `dim x experts` so that logits are `h W`.
#[derive(Clone, Copy, Debug)]
pub struct Router {
    pub w_clean: ParamId,
    pub w_noise: ParamId,
    pub experts: usize,
    pub top_k: usize,
}

impl Router {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, dim: usize, experts: usize, top_k: usize) -> Self {
        assert!(experts >= 1 && (1..=experts).contains(&top_k));
        Self {
            w_clean: b.weight("w_clean", dim, experts),
            w_noise: b.weight("w_noise", dim, experts),
            experts,
            top_k,
        }
    }
}

/// Source of the routing noise `eps`.
pub enum RoutingNoise<'r, R: Rng> {
    /// Evaluation: logits are `h W_r` exactly.
    Off,
    /// Training with every draw forced to zero.
    Zero,
    /// Training: one standard-normal draw per (token, expert).
    Sample(&'r mut R),
}

impl<R: Rng> RoutingNoise<'_, R> {
    fn draws(&mut self, n: usize) -> Option<Vec<f64>> {
        match self {
            RoutingNoise::Off => None,
            RoutingNoise::Zero => Some(vec![0.0; n]),
            RoutingNoise::Sample(rng) => Some(
                (0..n)
                    .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, *rng))
                    .collect(),
            ),
        }
    }
}

/// Noise actually applied to one token's logits.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseRecord {
    pub eps: Vec<f64>,
    /// `softplus(h W_n)`, strictly positive.
    pub scale: Vec<f64>,
}

/// Sparse routing result for one token.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    pub logits: Vec<f64>,
    /// Selected experts in descending-logit order.
    pub experts: Vec<usize>,
    /// Weights aligned with `experts`; they sum to one.
    pub weights: Vec<f64>,
    pub noise: Option<NoiseRecord>,
}

impl GateDecision {
    /// Dense weight vector with zeros for unselected experts.
    pub fn dense_weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.logits.len()];
        for (&e, &p) in self.experts.iter().zip(&self.weights) {
            w[e] = p;
        }
        w
    }
}

/// Per-batch expert utilization.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LoadStats {
    pub f_usage: Vec<f64>,
    pub p_mean: Vec<f64>,
}

/// Top-`k` expert indices by logit, ties to the lower index.
fn top_k_experts(logits: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn topk_gate(logits: &[f64], k: usize) -> Result<GateDecision> {
    if k < 1 || k > logits.len() {
        return Err(Error::config(
            "routing_top_k",
            format!("{k} must lie in 1..={}", logits.len()),
        ));
    }
    let experts = top_k_experts(logits, k);
    let weights = tensor::softmax(&experts.iter().map(|&e| logits[e]).collect::<Vec<_>>());
    Ok(GateDecision {
        logits: logits.to_vec(),
        experts,
        weights,
        noise: None,
    })
}

/// Router logits for one token.
pub fn router_logits<R: Rng>(
    store: &ParamStore,
    router: &Router,
    h: &[f64],
    noise: &mut RoutingNoise<'_, R>,
) -> Result<(Vec<f64>, Option<NoiseRecord>)> {
    let wr = store.value(router.w_clean);
    if h.len() != wr.rows() {
        return Err(Error::Shape(format!(
            "token has dimension {}, router expects {}",
            h.len(),
            wr.rows()
        )));
    }
    let hm = Matrix::row_vector(h);
    let clean = tensor::matmul(&hm, wr).into_vec();
    let Some(eps) = noise.draws(router.experts) else {
        return Ok((clean, None));
    };
    let scale: Vec<f64> = tensor::matmul(&hm, store.value(router.w_noise))
        .data()
        .iter()
        .map(|&x| tensor::softplus(x))
        .collect();
    let logits = clean
        .iter()
        .zip(&eps)
        .zip(&scale)
        .map(|((c, e), s)| c + e * s)
        .collect();
    Ok((logits, Some(NoiseRecord { eps, scale })))
}

pub fn load_balance_loss(stats: &LoadStats, experts: usize) -> f64 {
    experts as f64 * tensor::dot(&stats.f_usage, &stats.p_mean)
}

/// Router plus experts.
#[derive(Clone, Debug)]
pub struct MoeLayer {
    pub router: Router,
    pub experts: Vec<FeedForward>,
}

pub struct MoeOutput {
    pub output: Var,
    /// `1 x 1` load-balance loss.
    pub aux: Var,
    pub stats: LoadStats,
    pub decisions: Vec<GateDecision>,
}

impl MoeLayer {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, dim: usize, hidden: usize, experts: usize, top_k: usize) -> Self {
        let router = b.scoped("router", |b| Router::new(b, dim, experts, top_k));
        let experts = (0..experts)
            .map(|e| b.scoped(&format!("expert{e}"), |b| FeedForward::new(b, dim, hidden)))
            .collect();
        Self { router, experts }
    }

    pub fn forward<'a, R: Rng>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        h: Var,
        noise: &mut RoutingNoise<'_, R>,
    ) -> MoeOutput {
        let (n, _) = g.shape(h);
        let e_count = self.router.experts;
        let k = self.router.top_k;
        let wr = g.param(store, self.router.w_clean);
        let clean = g.matmul(h, wr);
        let (logits, records) = match noise.draws(n * e_count) {
            None => (clean, None),
            Some(eps) => {
                let wn = g.param(store, self.router.w_noise);
                let pre = g.matmul(h, wn);
                let scale = g.softplus(pre);
                let scale_vals = g.value(scale).clone();
                let eps_m = Matrix::from_vec(n, e_count, eps).expect("noise shape");
                let records: Vec<NoiseRecord> = (0..n)
                    .map(|i| NoiseRecord {
                        eps: eps_m.row(i).to_vec(),
                        scale: scale_vals.row(i).to_vec(),
                    })
                    .collect();
                let eps_v = g.constant(eps_m);
                let noisy = g.mul(eps_v, scale);
                (g.add(clean, noisy), Some(records))
            }
        };

        let lv = g.value(logits).clone();
        let mut allowed = vec![false; n * e_count];
        let mut counts = vec![0usize; e_count];
        let mut routed: Vec<Vec<usize>> = vec![Vec::new(); e_count];
        let mut selections = Vec::with_capacity(n);
        for i in 0..n {
            let sel = top_k_experts(lv.row(i), k);
            for &e in &sel {
                allowed[i * e_count + e] = true;
                counts[e] += 1;
                routed[e].push(i);
            }
            selections.push(sel);
        }

        let sparse = g.softmax_rows(logits, Some(&allowed));
        let full = g.softmax_rows(logits, None);
        let p_mean = g.mean_rows(full);
        let f_usage: Vec<f64> = counts.iter().map(|&c| c as f64 / (n * k) as f64).collect();
        let f_const = g.constant(Matrix::row_vector(&f_usage));
        let prod = g.mul(p_mean, f_const);
        let dot = g.sum(prod);
        let aux = g.scale(dot, e_count as f64);

        let mut output: Option<Var> = None;
        for (e, tokens) in routed.iter().enumerate() {
            if tokens.is_empty() {
                continue;
            }
            let x = g.gather_rows(h, tokens);
            let y = self.experts[e].forward(g, store, x);
            let w_rows = g.gather_rows(sparse, tokens);
            let w = g.slice_cols(w_rows, e, 1);
            let y = g.mul_col(y, w);
            let placed = g.scatter_rows(y, tokens, n);
            output = Some(match output {
                None => placed,
                Some(acc) => g.add(acc, placed),
            });
        }
        let output = output.expect("at least one expert receives tokens");

        let sv = g.value(sparse);
        let decisions = selections
            .into_iter()
            .enumerate()
            .map(|(i, experts)| GateDecision {
                logits: lv.row(i).to_vec(),
                weights: experts.iter().map(|&e| sv.get(i, e)).collect(),
                experts,
                noise: records.as_ref().map(|r| r[i].clone()),
            })
            .collect();
        let stats = LoadStats {
            f_usage,
            p_mean: g.value(p_mean).data().to_vec(),
        };
        MoeOutput {
            output,
            aux,
            stats,
            decisions,
        }
    }
}

/// MoE on plain rows; returns outputs, stats, and per-token decisions.
pub fn moe_forward<R: Rng>(
    store: &ParamStore,
    layer: &MoeLayer,
    tokens: &Matrix,
    noise: &mut RoutingNoise<'_, R>,
) -> Result<(Matrix, LoadStats, Vec<GateDecision>)> {
    if layer.experts.is_empty() {
        return Err(Error::config("experts", "must be at least 1"));
    }
    if tokens.rows() == 0 {
        return Err(Error::Empty("no tokens to route".into()));
    }
    let dim = store.value(layer.router.w_clean).rows();
    if tokens.cols() != dim {
        return Err(Error::Shape(format!(
            "tokens have dimension {}, layer expects {dim}",
            tokens.cols()
        )));
    }
    let mut g = Graph::inference();
    let h = g.constant(tokens.clone());
    let out = layer.forward(&mut g, store, h, noise);
    Ok((g.value(out.output).clone(), out.stats, out.decisions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Stream};
    use proptest::prelude::*;
    use rand::Rng;

    fn layer(dim: usize, hidden: usize, experts: usize, k: usize, seed: u64) -> (ParamStore, MoeLayer) {
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, "moe");
        let l = {
            let mut b = Builder::new(&mut store, &mut r);
            MoeLayer::new(&mut b, dim, hidden, experts, k)
        };
        (store, l)
    }

    fn random(rng: &mut impl Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn ffn(store: &ParamStore, f: &FeedForward, x: &Matrix) -> Matrix {
        let mut g = Graph::inference();
        let v = g.constant(x.clone());
        let y = f.forward(&mut g, store, v);
        g.value(y).clone()
    }

    #[test]
    fn gate_examples() {
        let d = topk_gate(&[3.0, 1.0, 2.0, 0.0], 2).unwrap();
        assert_eq!(d.experts, vec![0, 2]);
        // sigma(1) = 1 / (1 + e^-1)
        assert!((d.weights[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((d.weights[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
        let eq = topk_gate(&[0.5; 4], 2).unwrap();
        assert_eq!(eq.experts, vec![0, 1]);
        assert_eq!(eq.weights, vec![0.5, 0.5]);
        let one = topk_gate(&[0.1, -4.0, 7.0], 1).unwrap();
        assert_eq!(one.weights, vec![1.0]);
        assert!(topk_gate(&[1.0, 2.0], 0).is_err());
        assert!(topk_gate(&[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn router_noise_modes() {
        let (store, l) = layer(4, 8, 3, 2, 1);
        let h = [0.3, -0.7, 1.1, 0.2];
        let clean = tensor::matmul(&Matrix::row_vector(&h), store.value(l.router.w_clean)).into_vec();
        let (off, rec) = router_logits::<Stream>(&store, &l.router, &h, &mut RoutingNoise::Off).unwrap();
        assert_eq!(off, clean);
        assert!(rec.is_none());
        let (zero, rec) = router_logits::<Stream>(&store, &l.router, &h, &mut RoutingNoise::Zero).unwrap();
        assert_eq!(zero, clean);
        assert!(rec.unwrap().scale.iter().all(|&s| s > 0.0));

        let mut store0 = store.clone();
        *store0.value_mut(l.router.w_noise) = Matrix::zeros(4, 3);
        let mut r = rng::stream(2, "n");
        let (_, rec) = router_logits(&store0, &l.router, &h, &mut RoutingNoise::Sample(&mut r)).unwrap();
        for s in rec.unwrap().scale {
            assert!((s - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn single_expert_is_a_plain_ffn() {
        let (store, l) = layer(6, 12, 1, 1, 2);
        let mut r = rng::stream(3, "x");
        let x = random(&mut r, 9, 6);
        let (out, stats, _) = moe_forward::<Stream>(&store, &l, &x, &mut RoutingNoise::Off).unwrap();
        assert_eq!(out, ffn(&store, &l.experts[0], &x));
        assert_eq!(stats.f_usage, vec![1.0]);
    }

    #[test]
    fn full_top_k_matches_dense_mixture() {
        let (store, l) = layer(5, 10, 4, 4, 3);
        let mut r = rng::stream(4, "x");
        let x = random(&mut r, 7, 5);
        let (out, _, _) = moe_forward::<Stream>(&store, &l, &x, &mut RoutingNoise::Off).unwrap();
        let logits = tensor::matmul(&x, store.value(l.router.w_clean));
        let outs: Vec<Matrix> = l.experts.iter().map(|f| ffn(&store, f, &x)).collect();
        for i in 0..7 {
            let p = tensor::softmax(logits.row(i));
            for c in 0..5 {
                let dense: f64 = (0..4).map(|e| p[e] * outs[e].get(i, c)).sum();
                assert!((dense - out.get(i, c)).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn identical_experts_make_routing_irrelevant() {
        let (mut store, l) = layer(4, 8, 3, 2, 5);
        for e in 1..3 {
            for (src, dst) in l.experts[0].ids().iter().zip(l.experts[e].ids()) {
                let v = store.value(*src).clone();
                *store.value_mut(dst) = v;
            }
        }
        let mut r = rng::stream(6, "x");
        let x = random(&mut r, 10, 4);
        let (out, _, _) = moe_forward(&store, &l, &x, &mut RoutingNoise::Sample(&mut r)).unwrap();
        assert!(out.max_abs_diff(&ffn(&store, &l.experts[0], &x)) < 1e-12);
    }

    #[test]
    fn load_balance_examples() {
        let uniform = LoadStats {
            f_usage: vec![0.25; 4],
            p_mean: vec![0.25; 4],
        };
        assert!((load_balance_loss(&uniform, 4) - 1.0).abs() < 1e-12);
        let collapse = LoadStats {
            f_usage: vec![1.0, 0.0, 0.0, 0.0],
            p_mean: vec![1.0, 0.0, 0.0, 0.0],
        };
        assert_eq!(load_balance_loss(&collapse, 4), 4.0);
        let mixed = LoadStats {
            f_usage: vec![0.5, 0.5, 0.0, 0.0],
            p_mean: vec![0.4, 0.4, 0.1, 0.1],
        };
        assert!((load_balance_loss(&mixed, 4) - 1.6).abs() < 1e-12);
    }

    #[test]
    fn eval_routing_is_deterministic_and_stats_normalized() {
        let (store, l) = layer(6, 8, 4, 2, 7);
        let mut r = rng::stream(8, "x");
        let x = random(&mut r, 50, 6);
        let (_, s1, d1) = moe_forward::<Stream>(&store, &l, &x, &mut RoutingNoise::Off).unwrap();
        let (_, s2, d2) = moe_forward::<Stream>(&store, &l, &x, &mut RoutingNoise::Off).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(s1, s2);
        assert!((s1.f_usage.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((s1.p_mean.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn graph_aux_matches_plain_formula() {
        let (store, l) = layer(4, 6, 3, 2, 9);
        let mut r = rng::stream(10, "x");
        let x = random(&mut r, 12, 4);
        let mut g = Graph::inference();
        let h = g.constant(x);
        let out = l.forward::<Stream>(&mut g, &store, h, &mut RoutingNoise::Off);
        let expected = load_balance_loss(&out.stats, 3);
        assert!((g.scalar(out.aux) - expected).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn aux_is_at_least_one_when_usage_equals_probability(
            raw in proptest::collection::vec(0.001f64..1.0, 1..8)
        ) {
            let total: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let e = p.len();
            let loss = load_balance_loss(&LoadStats { f_usage: p.clone(), p_mean: p.clone() }, e);
            prop_assert!(loss >= 1.0 - 1e-12);
            let uniform = p.iter().all(|&v| (v - 1.0 / e as f64).abs() < 1e-12);
            if !uniform {
                prop_assert!(loss > 1.0);
            }
        }

        #[test]
        fn gate_weights_are_sparse_and_normalized(
            logits in proptest::collection::vec(-5.0f64..5.0, 1..9),
            k_frac in 0.0f64..1.0,
        ) {
            let k = 1 + ((logits.len() - 1) as f64 * k_frac) as usize;
            let d = topk_gate(&logits, k).unwrap();
            let dense = d.dense_weights();
            prop_assert_eq!(dense.iter().filter(|&&w| w > 0.0).count(), k);
            prop_assert!((dense.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
