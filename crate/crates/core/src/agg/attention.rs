use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Array, Graph, ParamId, ParamStore, Var};

/// Multi-hop attention pooling over time.
///
/// Each hop `h` forms weights `softmax_t(W_a[h] · tanh(W_i x_t))` and returns
/// the weighted frame sum; the hops are concatenated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionPool {
    pub input_dim: usize,
    pub proj: usize,
    pub hops: usize,
    /// `[P × D]`
    pub w_i: ParamId,
    /// `[H × P]`
    pub w_a: ParamId,
}

impl AttentionPool {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        proj: usize,
        hops: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || proj == 0 || hops == 0 {
            return Err(Error::InvalidArgument(format!(
                "attention pool dims must be positive (input {input_dim}, proj {proj}, hops {hops})"
            )));
        }
        let w_i = store.add_scaled_normal(format!("{prefix}/w_i"), vec![proj, input_dim], input_dim, rng);
        let w_a = store.add_scaled_normal(format!("{prefix}/w_a"), vec![hops, proj], proj, rng);
        Ok(Self {
            input_dim,
            proj,
            hops,
            w_i,
            w_a,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.hops * self.input_dim
    }

    /// Attention weights `[T × H]`; every column sums to one.
    pub fn weights(&self, g: &mut Graph, x: Var) -> Var {
        let (wi, wa) = (g.param(self.w_i), g.param(self.w_a));
        let wi_t = g.transpose(wi);
        let proj = g.matmul(x, wi_t);
        let proj = g.tanh(proj);
        let wa_t = g.transpose(wa);
        let scores = g.matmul(proj, wa_t);
        g.softmax(scores, 0)
    }

    /// `x: [T × D]` to `[1 × H·D]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = self.weights(g, x);
        let wt = g.transpose(w);
        let pooled = g.matmul(wt, x);
        g.reshape(pooled, vec![1, self.output_dim()])
    }
}

/// Pools the first `len` frames of `frames`.
pub fn attention_pool(frames: &Array, len: usize, pool: &AttentionPool, store: &ParamStore) -> Result<Array> {
    if len == 0 {
        return Err(Error::InvalidArgument("attention_pool on an empty sequence".into()));
    }
    if frames.ndim() != 2 || frames.cols() != pool.input_dim || len > frames.rows() {
        return Err(Error::shape(
            "attention_pool",
            format!("[>={len} × {}]", pool.input_dim),
            format!("{:?}", frames.shape()),
        ));
    }
    let mut g = Graph::new(store);
    let x = g.constant(frames.slice_rows(0, len));
    let out = pool.forward(&mut g, x);
    Ok(g.value(out).clone())
}
