//! Shared building blocks: parameter registration, layer norm, feed-forward.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::params::{fan_in_uniform, ParamId, ParamStore};
use crate::tensor::Matrix;

pub const LN_EPS: f64 = 1e-5;

/// Registers parameters under a dotted name prefix.
pub struct Builder<'s, R: Rng> {
    pub store: &'s mut ParamStore,
    pub rng: &'s mut R,
    prefix: String,
}

impl<'s, R: Rng> Builder<'s, R> {
    pub fn new(store: &'s mut ParamStore, rng: &'s mut R) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Runs `f` with `name` appended to the prefix.
    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Builder<'_, R>) -> T) -> T {
        let prefix = self.full(name);
        let mut child = Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        };
        f(&mut child)
    }

    /// Fan-in uniform weights of shape `rows x cols`.
    pub fn weight(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let m = fan_in_uniform(self.rng, rows, cols);
        let full = self.full(name);
        self.store.insert(full, m)
    }

    /// Uniform weights bounded by `1/sqrt(fan_in)`.
    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        let full = self.full(name);
        self.store
            .insert(full, Matrix::from_vec(rows, cols, data).expect("init shape"))
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let full = self.full(name);
        self.store.insert(full, Matrix::zeros(rows, cols))
    }

    pub fn ones(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let full = self.full(name);
        self.store.insert(full, Matrix::filled(rows, cols, 1.0))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, dim: usize) -> Self {
        Self {
            gain: b.ones("gain", 1, dim),
            bias: b.zeros("bias", 1, dim),
        }
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: Var) -> Var {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// `x -> W2 gelu(x W1 + b1) + b2`.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForward {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, dim: usize, hidden: usize) -> Self {
        Self {
            w1: b.weight("w1", dim, hidden),
            b1: b.zeros("b1", 1, hidden),
            w2: b.weight("w2", hidden, dim),
            b2: b.zeros("b2", 1, dim),
        }
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: Var) -> Var {
        let w1 = g.param(store, self.w1);
        let b1 = g.param(store, self.b1);
        let w2 = g.param(store, self.w2);
        let b2 = g.param(store, self.b2);
        let h = g.matmul(x, w1);
        let h = g.add_row(h, b1);
        let h = g.gelu(h);
        let o = g.matmul(h, w2);
        g.add_row(o, b2)
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// Inverted dropout with a caller-supplied mask source.
pub fn dropout<'a, R: Rng>(g: &mut Graph<'a>, x: Var, rate: f64, rng: Option<&mut R>) -> Var {
    let Some(rng) = rng else { return x };
    if rate <= 0.0 {
        return x;
    }
    let (r, c) = g.shape(x);
    let keep = 1.0 - rate;
    let mask: Vec<f64> = (0..r * c)
        .map(|_| if rng.random_bool(keep) { 1.0 / keep } else { 0.0 })
        .collect();
    let m = g.constant(Matrix::from_vec(r, c, mask).expect("dropout mask"));
    g.mul(x, m)
}
