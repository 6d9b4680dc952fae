//! Central finite-difference comparison of analytic parameter gradients.

use rand::Rng;

use crate::autograd::Graph;
use crate::error::Result;
use crate::memory::MemoryBank;
use crate::model::{Mode, Model, ModelConfig};
use crate::params::{ParamId, ParamStore};
use crate::rng;
use crate::tensor::Matrix;

/// Relative errors are measured against `max(|analytic|, |numeric|, FLOOR)`.
pub const FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub elements: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
}

/// Aggregated checks for a family of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub group: String,
    pub elements: usize,
    pub max_rel_error: f64,
    /// Largest analytic gradient magnitude in the group.
    pub max_gradient: f64,
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Compares `analytic[i]` (indexed by parameter index) against central
/// differences of `loss` for every element of every parameter in `ids`.
pub fn compare(
    store: &ParamStore,
    ids: &[ParamId],
    analytic: &[Option<Matrix>],
    step: f64,
    loss: impl Fn(&ParamStore) -> f64,
) -> Vec<ParamCheck> {
    let mut work = store.clone();
    ids.iter()
        .map(|&id| {
            let n = store.value(id).len();
            let zero = Matrix::zeros(store.value(id).rows(), store.value(id).cols());
            let a = analytic[id.index()].as_ref().unwrap_or(&zero);
            let mut max_abs: f64 = 0.0;
            let mut max_rel: f64 = 0.0;
            for i in 0..n {
                let orig = store.value(id).data()[i];
                work.value_mut(id).data_mut()[i] = orig + step;
                let up = loss(&work);
                work.value_mut(id).data_mut()[i] = orig - step;
                let down = loss(&work);
                work.value_mut(id).data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * step);
                let analytic = a.data()[i];
                max_abs = max_abs.max((analytic - numeric).abs());
                max_rel = max_rel.max(relative_error(analytic, numeric));
            }
            ParamCheck {
                name: store.name(id).to_string(),
                elements: n,
                max_abs_error: max_abs,
                max_rel_error: max_rel,
            }
        })
        .collect()
}

/// Coarse family of a model parameter name.
pub fn parameter_group(name: &str) -> &'static str {
    let has = |s: &str| name.split('.').any(|p| p == s);
    if has("router") {
        "router"
    } else if name.contains(".expert") || (has("decoder") && has("ffn")) {
        "experts"
    } else if has("reranker") {
        "reranker"
    } else if name.ends_with(".token") {
        "condense_tokens"
    } else if has("attn") || has("self_attn") || has("cross_attn") {
        "attention"
    } else if name == "tokens" || name == "types" {
        "embeddings"
    } else if name.contains("norm") {
        "norms"
    } else if has("ffn") {
        "feed_forward"
    } else {
        "projections"
    }
}

/// Fixed random fixture for end-to-end checks.
pub struct Fixture {
    pub patches: Matrix,
    pub bank: MemoryBank,
    pub report: Vec<u32>,
}

pub fn fixture(config: &ModelConfig, seed: u64) -> Result<Fixture> {
    let mut r = rng::stream(seed, "gradcheck");
    let d = config.input_dim;
    let mut random = |rows: usize| {
        Matrix::from_vec(rows, d, (0..rows * d).map(|_| r.random_range(-1.0..1.0)).collect())
    };
    let patches = random(10)?;
    let bank_rows = random(config.recall_size + 4)?;
    let sentences = (0..bank_rows.rows()).map(|i| format!("s{i}")).collect();
    let bank = MemoryBank::new(sentences, bank_rows)?;
    let mut r = rng::stream(seed, "gradcheck.report");
    let report = (0..5)
        .map(|_| r.random_range(4..config.vocab_size as u32))
        .collect();
    Ok(Fixture {
        patches,
        bank,
        report,
    })
}

/// Checks the training objective of `config` (dropout should be zero) on a
/// random fixture with routing noise frozen to one draw sequence.
pub fn model_gradient_check(config: &ModelConfig, seed: u64, step: f64) -> Result<Vec<GroupCheck>> {
    let model = Model::new(config.clone())?;
    let fx = fixture(config, seed)?;
    let noise_seed = seed ^ 0x5eed;
    let analytic = {
        let mut g = Graph::new();
        let loss = model.case_loss(&mut g, &fx.patches, &fx.bank, &fx.report, &mut Mode::train(noise_seed))?;
        let grads = g.backward(loss.total);
        let mut out: Vec<Option<Matrix>> = vec![None; model.store.len()];
        for (id, m) in grads.into_param_grads() {
            out[id.index()] = Some(m);
        }
        out
    };
    let eval = |store: &ParamStore| -> f64 {
        let m = Model::with_params(config.clone(), store).expect("same layout");
        let mut g = Graph::inference();
        let loss = m
            .case_loss(&mut g, &fx.patches, &fx.bank, &fx.report, &mut Mode::train(noise_seed))
            .expect("loss");
        g.scalar(loss.total)
    };
    let ids: Vec<ParamId> = model.store.ids().collect();
    let checks = compare(&model.store, &ids, &analytic, step, eval);
    let mut groups: Vec<GroupCheck> = Vec::new();
    for (check, id) in checks.iter().zip(&ids) {
        let name = parameter_group(&check.name);
        let max_grad = analytic[id.index()]
            .as_ref()
            .map_or(0.0, |m| m.data().iter().fold(0.0f64, |a, v| a.max(v.abs())));
        match groups.iter_mut().find(|g| g.group == name) {
            Some(g) => {
                g.elements += check.elements;
                g.max_rel_error = g.max_rel_error.max(check.max_rel_error);
                g.max_gradient = g.max_gradient.max(max_grad);
            }
            None => groups.push(GroupCheck {
                group: name.to_string(),
                elements: check.elements,
                max_rel_error: check.max_rel_error,
                max_gradient: max_grad,
            }),
        }
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_cover_expected_families() {
        assert_eq!(parameter_group("decoder.0.moe.router.w_clean"), "router");
        assert_eq!(parameter_group("decoder.0.moe.expert2.w1"), "experts");
        assert_eq!(parameter_group("reranker.w1"), "reranker");
        assert_eq!(parameter_group("tc_visual.token"), "condense_tokens");
        assert_eq!(parameter_group("encoder.0.attn.wq"), "attention");
        assert_eq!(parameter_group("tokens"), "embeddings");
        assert_eq!(parameter_group("tc_text.norm.gain"), "norms");
        assert_eq!(parameter_group("input.w"), "projections");
    }

    #[test]
    fn compare_on_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.insert("x", Matrix::from_vec(1, 3, vec![1.0, -2.0, 0.5]).unwrap());
        let grad = store.value(id).map(|v| 2.0 * v);
        let checks = compare(&store, &[id], &[Some(grad)], 1e-5, |s| {
            s.value(id).data().iter().map(|v| v * v).sum()
        });
        assert!(checks[0].max_rel_error < 1e-9);
    }
}
