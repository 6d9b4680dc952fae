//! Multi-head scaled dot-product attention and the token-condensation layer:
//! a single learnable query cross-attends over a set, followed by a residual
//! feed-forward block.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{Builder, FeedForward, LayerNorm};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

/// Projection weights of a multi-head attention block. All projections are
/// `dim x dim` without bias; head `h` uses columns `h*dh .. (h+1)*dh`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub dim: usize,
}

impl AttentionParams {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim must be divisible by heads");
        Self {
            wq: b.weight("wq", dim, dim),
            wk: b.weight("wk", dim, dim),
            wv: b.weight("wv", dim, dim),
            wo: b.weight("wo", dim, dim),
            heads,
            dim,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.wq, self.wk, self.wv, self.wo]
    }
}

/// Output of an attention call on the graph.
pub struct Attended {
    pub output: Var,
    /// Per-head `nq x nk` softmax weights.
    pub head_weights: Vec<Var>,
}

impl Attended {
    /// Head-averaged attention weights, `nq x nk`.
    pub fn mean_weights(&self, g: &Graph<'_>) -> Matrix {
        let first = g.value(self.head_weights[0]);
        let mut acc = Matrix::zeros(first.rows(), first.cols());
        for &w in &self.head_weights {
            acc.add_assign(g.value(w));
        }
        acc.scale_assign(1.0 / self.head_weights.len() as f64);
        acc
    }
}

/// Multi-head attention of `query` rows over `keys`/`values` rows.
/// `allowed` optionally masks query-key pairs (row-major `nq x nk`).
pub fn attend<'a>(
    g: &mut Graph<'a>,
    store: &'a ParamStore,
    p: &AttentionParams,
    query: Var,
    keys: Var,
    values: Var,
    allowed: Option<&[bool]>,
) -> Attended {
    let wq = g.param(store, p.wq);
    let wk = g.param(store, p.wk);
    let wv = g.param(store, p.wv);
    let wo = g.param(store, p.wo);
    let q = g.matmul(query, wq);
    let k = g.matmul(keys, wk);
    let v = g.matmul(values, wv);
    let dh = p.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(p.heads);
    let mut head_weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (qh, kh, vh) = if p.heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh),
                g.slice_cols(k, h * dh, dh),
                g.slice_cols(v, h * dh, dh),
            )
        };
        let s = g.matmul_nt(qh, kh);
        let s = g.scale(s, scale);
        let w = g.softmax_rows(s, allowed);
        head_weights.push(w);
        heads.push(g.matmul(w, vh));
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)
    };
    Attended {
        output: g.matmul(cat, wo),
        head_weights,
    }
}

fn check_attention_inputs(p: &AttentionParams, query: &Matrix, keys: &Matrix, values: &Matrix) -> Result<()> {
    if keys.rows() == 0 {
        return Err(Error::Empty("attention needs at least one key".into()));
    }
    if keys.rows() != values.rows() {
        return Err(Error::Shape(format!(
            "{} keys but {} values",
            keys.rows(),
            values.rows()
        )));
    }
    for (what, m) in [("query", query), ("keys", keys), ("values", values)] {
        if m.cols() != p.dim {
            return Err(Error::Shape(format!(
                "{what} have dimension {}, attention expects {}",
                m.cols(),
                p.dim
            )));
        }
    }
    Ok(())
}

/// Cross-attention on plain matrices; one output row per query row.
pub fn cross_attend(
    store: &ParamStore,
    p: &AttentionParams,
    query: &Matrix,
    keys: &Matrix,
    values: &Matrix,
) -> Result<Matrix> {
    check_attention_inputs(p, query, keys, values)?;
    let mut g = Graph::inference();
    let q = g.constant(query.clone());
    let k = g.constant(keys.clone());
    let v = g.constant(values.clone());
    let out = attend(&mut g, store, p, q, k, v, None);
    Ok(g.value(out.output).clone())
}

/// Token condensation: `h = attn(token, X, X)`, `z = h + FFN(LN(h))`.
#[derive(Clone, Copy, Debug)]
pub struct TcLayer {
    pub token: ParamId,
    pub attention: AttentionParams,
    pub norm: LayerNorm,
    pub ffn: FeedForward,
}

pub struct Condensed {
    /// `1 x dim` summary vector.
    pub output: Var,
    /// Head-averaged attention weights over the input set, one per element.
    pub attention: Vec<f64>,
}

impl TcLayer {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, dim: usize, heads: usize, ffn_hidden: usize) -> Self {
        Self {
            token: b.uniform("token", 1, dim, dim),
            attention: b.scoped("attn", |b| AttentionParams::new(b, dim, heads)),
            norm: b.scoped("norm", |b| LayerNorm::new(b, dim)),
            ffn: b.scoped("ffn", |b| FeedForward::new(b, dim, ffn_hidden)),
        }
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, set: Var) -> Condensed {
        let token = g.param(store, self.token);
        let att = attend(g, store, &self.attention, token, set, set, None);
        let attention = att.mean_weights(g).data().to_vec();
        let h = att.output;
        let n = self.norm.forward(g, store, h);
        let f = self.ffn.forward(g, store, n);
        Condensed {
            output: g.add(h, f),
            attention,
        }
    }
}

/// Condenses a non-empty set of row vectors into one vector.
pub fn condense(store: &ParamStore, layer: &TcLayer, set: &Matrix) -> Result<Vec<f64>> {
    if set.rows() == 0 {
        return Err(Error::Empty("cannot condense an empty set".into()));
    }
    if set.cols() != layer.attention.dim {
        return Err(Error::Shape(format!(
            "set has dimension {}, layer expects {}",
            set.cols(),
            layer.attention.dim
        )));
    }
    let mut g = Graph::inference();
    let x = g.constant(set.clone());
    let out = layer.forward(&mut g, store, x);
    Ok(g.value(out.output).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn layer(dim: usize, heads: usize) -> (ParamStore, TcLayer) {
        let mut store = ParamStore::new();
        let mut r = rng::stream(11, "test");
        let l = {
            let mut b = Builder::new(&mut store, &mut r);
            TcLayer::new(&mut b, dim, heads, 4 * dim)
        };
        (store, l)
    }

    fn set_identity(store: &mut ParamStore, p: &AttentionParams) {
        for id in p.ids() {
            *store.value_mut(id) = Matrix::identity(p.dim);
        }
    }

    fn random(rng: &mut impl Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn single_key_returns_its_value() {
        let (mut store, l) = layer(4, 2);
        set_identity(&mut store, &l.attention);
        let q = Matrix::row_vector(&[0.3, -0.2, 0.9, 0.1]);
        let k = Matrix::row_vector(&[1.0, 2.0, 3.0, 4.0]);
        let v = Matrix::row_vector(&[-1.0, 0.5, 0.25, 2.0]);
        let out = cross_attend(&store, &l.attention, &q, &k, &v).unwrap();
        assert!(out.max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn equal_values_pass_through() {
        let (mut store, l) = layer(4, 2);
        set_identity(&mut store, &l.attention);
        let mut r = rng::stream(1, "t");
        let q = random(&mut r, 2, 4);
        let k = random(&mut r, 6, 4);
        let u = [0.7, -0.1, 0.4, 1.2];
        let v = Matrix::from_rows(&vec![u; 6]).unwrap();
        let out = cross_attend(&store, &l.attention, &q, &k, &v).unwrap();
        for row in out.row_iter() {
            for (a, b) in row.iter().zip(&u) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn joint_key_value_permutation_is_invisible() {
        let (store, l) = layer(8, 2);
        let mut r = rng::stream(2, "t");
        let q = random(&mut r, 1, 8);
        let k = random(&mut r, 5, 8);
        let v = random(&mut r, 5, 8);
        let base = cross_attend(&store, &l.attention, &q, &k, &v).unwrap();
        let mut perm: Vec<usize> = (0..5).collect();
        perm.shuffle(&mut r);
        let kp = Matrix::from_rows(&perm.iter().map(|&i| k.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let vp = Matrix::from_rows(&perm.iter().map(|&i| v.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let out = cross_attend(&store, &l.attention, &q, &kp, &vp).unwrap();
        assert!(out.max_abs_diff(&base) < 1e-12);
    }

    #[test]
    fn attention_rejects_bad_inputs() {
        let (store, l) = layer(4, 2);
        let q = Matrix::zeros(1, 4);
        assert!(cross_attend(&store, &l.attention, &q, &Matrix::zeros(0, 4), &Matrix::zeros(0, 4)).is_err());
        assert!(cross_attend(&store, &l.attention, &q, &Matrix::zeros(2, 4), &Matrix::zeros(3, 4)).is_err());
        assert!(cross_attend(&store, &l.attention, &q, &Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn single_element_set_degenerates_to_ffn_residual() {
        let (mut store, l) = layer(4, 2);
        set_identity(&mut store, &l.attention);
        let u = Matrix::row_vector(&[0.5, -1.0, 2.0, 0.25]);
        let z = condense(&store, &l, &u).unwrap();
        let mut g = Graph::inference();
        let x = g.constant(u.clone());
        let n = l.norm.forward(&mut g, &store, x);
        let f = l.ffn.forward(&mut g, &store, n);
        let expected = g.add(f, x);
        for (a, b) in z.iter().zip(g.value(expected).data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn duplicated_set_matches_singleton() {
        let (store, l) = layer(6, 3);
        let mut r = rng::stream(3, "t");
        let u = random(&mut r, 1, 6);
        let triple = Matrix::from_rows(&[u.row(0), u.row(0), u.row(0)]).unwrap();
        let a = condense(&store, &l, &u).unwrap();
        let b = condense(&store, &l, &triple).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn condense_is_permutation_invariant() {
        let (store, l) = layer(8, 2);
        let mut r = rng::stream(4, "t");
        let set = random(&mut r, 20, 8);
        let base = condense(&store, &l, &set).unwrap();
        let mut rows: Vec<Vec<f64>> = set.row_iter().map(<[f64]>::to_vec).collect();
        rows.shuffle(&mut r);
        let out = condense(&store, &l, &Matrix::from_rows(&rows).unwrap()).unwrap();
        for (x, y) in base.iter().zip(&out) {
            assert!((x - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn zeroed_ffn_leaves_attention_output() {
        let (mut store, l) = layer(4, 2);
        for id in l.ffn.ids() {
            let m = store.value_mut(id);
            *m = Matrix::zeros(m.rows(), m.cols());
        }
        let mut r = rng::stream(5, "t");
        let set = random(&mut r, 7, 4);
        let z = condense(&store, &l, &set).unwrap();
        let token = store.value(l.token).clone();
        let h = cross_attend(&store, &l.attention, &token, &set, &set).unwrap();
        assert_eq!(z, h.data().to_vec());
    }

    #[test]
    fn condense_rejects_empty_set() {
        let (store, l) = layer(4, 2);
        assert!(matches!(condense(&store, &l, &Matrix::zeros(0, 4)), Err(Error::Empty(_))));
    }
}
