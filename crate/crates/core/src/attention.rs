use alloc::format;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::nn::{Linear, ParamStore};
use crate::real::Real;

/// Multi-head attention with learned input and output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub d_head: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d_model: usize, heads: usize) -> Self {
        assert!(d_model.is_multiple_of(heads), "d_model {d_model} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), d_model, d_model, true),
            k: Linear::new(store, &format!("{name}.k"), d_model, d_model, true),
            v: Linear::new(store, &format!("{name}.v"), d_model, d_model, true),
            out: Linear::new(store, &format!("{name}.out"), d_model, d_model, true),
            heads,
            d_head: d_model / heads,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], query: Var, key: Var, value: Var) -> Result<Var> {
        let q = self.q.forward(g, p, query)?;
        let k = self.k.forward(g, p, key)?;
        let v = self.v.forward(g, p, value)?;
        let scale = T::one() / T::of(self.d_head as f64).sqrt();
        let a = g.attention(q, k, v, self.heads, scale)?;
        self.out.forward(g, p, a)
    }
}
