use ranger_core::autograd::Graph;
use ranger_core::gradcheck::{compare, model_gradient_check};
use ranger_core::layers::Builder;
use ranger_core::model::ModelConfig;
use ranger_core::moe::{MoeLayer, RoutingNoise};
use ranger_core::params::{ParamId, ParamStore};
use ranger_core::rng;
use ranger_core::tensor::Matrix;
use rand::Rng;

#[test]
fn micro_model_gradients_match_finite_differences() {
    let groups = model_gradient_check(&ModelConfig::micro(), 11, 1e-5).unwrap();
    for g in &groups {
        println!("{:<16} n={:<5} max_rel={:.3e} max|grad|={:.3e}", g.group, g.elements, g.max_rel_error, g.max_gradient);
    }
    for family in ["router", "experts", "reranker", "condense_tokens", "attention", "embeddings"] {
        let g = groups.iter().find(|g| g.group == family).unwrap();
        assert!(g.max_gradient > 0.0, "{family} has no gradient");
    }
    for g in &groups {
        assert!(g.max_rel_error <= 1e-3, "{}: {}", g.group, g.max_rel_error);
    }
}

#[test]
fn moe_gradients_with_frozen_noise() {
    let mut store = ParamStore::new();
    let mut r = rng::stream(5, "init");
    let layer = {
        let mut b = Builder::new(&mut store, &mut r);
        MoeLayer::new(&mut b, 5, 7, 4, 2)
    };
    let x = Matrix::from_vec(6, 5, (0..30).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let target = Matrix::from_vec(6, 5, (0..30).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let run = |s: &ParamStore| -> (f64, Vec<Option<Matrix>>) {
        let mut g = Graph::new();
        let h = g.constant(x.clone());
        let mut noise_rng = rng::stream(9, "noise");
        let out = layer.forward(&mut g, s, h, &mut RoutingNoise::Sample(&mut noise_rng));
        let t = g.constant(target.clone());
        let prod = g.mul(out.output, t);
        let fit = g.sum(prod);
        let total = g.add(fit, out.aux);
        let value = g.scalar(total);
        let mut grads = vec![None; s.len()];
        for (id, m) in g.backward(total).into_param_grads() {
            grads[id.index()] = Some(m);
        }
        (value, grads)
    };
    let (_, analytic) = run(&store);
    let ids: Vec<ParamId> = store.ids().collect();
    for check in compare(&store, &ids, &analytic, 1e-6, |s| run(s).0) {
        assert!(check.max_rel_error <= 1e-4, "{}: {}", check.name, check.max_rel_error);
    }
}
