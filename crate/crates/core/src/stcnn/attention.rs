//! Metadata embedding and metadata-queried multi-head attention.

use rand::Rng;

use crate::error::{PulmoError, Result};
use crate::numerics::init::{GAIN_LINEAR, GAIN_UNIT};
use crate::numerics::{dot, relu_inplace, softmax_slice, Tensor};

use super::layers::Dense;

/// `relu(W x + b)` over normalised metadata features.
pub fn embed_metadata(embedder: &Dense, features: &[f32]) -> Result<Vec<f32>> {
    let mut e = embedder.forward(features)?;
    relu_inplace(&mut e);
    Ok(e)
}

/// Query, key, value and output projections of one attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub heads: usize,
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    pub o: Dense,
}

/// Intermediate values of one [`mha_fuse`] call.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    query: Vec<f32>,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    /// Attention weights per head over the tokens.
    pub weights: Vec<Vec<f32>>,
    concat: Vec<f32>,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(d_model: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(PulmoError::Config(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        Ok(Attention {
            heads,
            q: Dense::new(d_model, d_model, GAIN_UNIT, rng),
            k: Dense::new(d_model, d_model, GAIN_UNIT, rng),
            v: Dense::new(d_model, d_model, GAIN_UNIT, rng),
            o: Dense::new(d_model, d_model, GAIN_LINEAR, rng),
        })
    }

    pub fn d_model(&self) -> usize {
        self.q.outputs()
    }

    pub(crate) fn zeroed(&self) -> Self {
        Attention {
            heads: self.heads,
            q: self.q.zeroed(),
            k: self.k.zeroed(),
            v: self.v.zeroed(),
            o: self.o.zeroed(),
        }
    }

    /// Backward pass. Returns `(d query_source, d tokens)`.
    pub(crate) fn backward(
        &self,
        query_source: &[f32],
        tokens: &Tensor,
        trace: &AttentionTrace,
        grad_out: &[f32],
        grad: &mut Attention,
    ) -> (Vec<f32>, Vec<Vec<f32>>) {
        let d = self.d_model();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let n = tokens.dim(0);
        let g_concat = self
            .o
            .backward(&trace.concat, grad_out, &mut grad.o, true)
            .expect("input grad");
        let mut g_q = vec![0.0f32; d];
        let mut g_k = vec![vec![0.0f32; d]; n];
        let mut g_v = vec![vec![0.0f32; d]; n];
        for h in 0..self.heads {
            let r = h * dh..(h + 1) * dh;
            let alpha = &trace.weights[h];
            let go = &g_concat[r.clone()];
            let g_alpha: Vec<f32> = (0..n)
                .map(|i| dot(go, &trace.values[i][r.clone()]))
                .collect();
            for i in 0..n {
                for (gv, &g) in g_v[i][r.clone()].iter_mut().zip(go) {
                    *gv += alpha[i] * g;
                }
            }
            let mean: f32 = alpha.iter().zip(&g_alpha).map(|(a, g)| a * g).sum();
            for i in 0..n {
                let gs = alpha[i] * (g_alpha[i] - mean) * scale;
                for (j, idx) in r.clone().enumerate() {
                    g_q[idx] += gs * trace.keys[i][r.start + j];
                    g_k[i][idx] += gs * trace.query[idx];
                }
            }
        }
        let g_src = self
            .q
            .backward(query_source, &g_q, &mut grad.q, true)
            .expect("input grad");
        let g_tokens = (0..n)
            .map(|i| {
                let x = tokens.outer(i);
                let a = self
                    .k
                    .backward(x, &g_k[i], &mut grad.k, true)
                    .expect("input grad");
                let b = self
                    .v
                    .backward(x, &g_v[i], &mut grad.v, true)
                    .expect("input grad");
                a.iter().zip(&b).map(|(p, q)| p + q).collect()
            })
            .collect();
        (g_src, g_tokens)
    }
}

/// Scaled dot-product attention with the projected `query_source` as the
/// single query and the `[N, d_model]` tokens as keys and values. Heads are
/// concatenated and passed through the output projection.
pub fn mha_fuse(
    attn: &Attention,
    tokens: &Tensor,
    query_source: &[f32],
) -> Result<(Vec<f32>, AttentionTrace)> {
    let d = attn.d_model();
    tokens.expect_rank("attention tokens [N,d_model]", 2)?;
    if tokens.dim(1) != d {
        return Err(PulmoError::dim(
            "attention token width (d_model)",
            d,
            tokens.dim(1),
        ));
    }
    if query_source.len() != d {
        return Err(PulmoError::dim(
            "attention query width (d_model)",
            d,
            query_source.len(),
        ));
    }
    let n = tokens.dim(0);
    let dh = d / attn.heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let query = attn.q.forward(query_source)?;
    let mut keys = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    for i in 0..n {
        keys.push(attn.k.forward(tokens.outer(i))?);
        values.push(attn.v.forward(tokens.outer(i))?);
    }
    let mut weights = Vec::with_capacity(attn.heads);
    let mut concat = vec![0.0f32; d];
    for h in 0..attn.heads {
        let r = h * dh..(h + 1) * dh;
        let scores: Vec<f32> = keys
            .iter()
            .map(|k| dot(&query[r.clone()], &k[r.clone()]) * scale)
            .collect();
        let alpha = softmax_slice(&scores)?;
        for (i, v) in values.iter().enumerate() {
            for (c, &x) in concat[r.clone()].iter_mut().zip(&v[r.clone()]) {
                *c += alpha[i] * x;
            }
        }
        weights.push(alpha);
    }
    let out = attn.o.forward(&concat)?;
    Ok((
        out,
        AttentionTrace {
            query,
            keys,
            values,
            weights,
            concat,
        },
    ))
}
