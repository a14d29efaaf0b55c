//! Layers shared by the encoders and task heads.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub(crate) fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::randn(&[fan_in, fan_out], std, rng)
}

/// `x · W + b` with `W: [in×out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(in_dim, out_dim, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
            eps: Self::EPS,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, self.eps)
    }
}

/// Position-wise `relu(x W1 + b1) W2 + b2`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            inner: Linear::new(store, &format!("{name}.inner"), dim, hidden, true, rng),
            outer: Linear::new(store, &format!("{name}.outer"), hidden, dim, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, store, x)?;
        let h = g.relu(h);
        self.outer.forward(g, store, h)
    }
}

/// Output of one attention call.
pub struct Attended {
    pub output: Var,
    /// Per-head `[queries × keys]` weight matrices.
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention split over `heads` subspaces.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{name}: dimension {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, true, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, true, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, true, rng),
            output: Linear::new(store, &format!("{name}.output"), dim, dim, true, rng),
            heads,
            dim,
        })
    }

    /// Queries `[n×d]` attend over `memory` `[k×d]`. `mask`, when given, has
    /// one flag per `(query, key)` pair, row-major; `false` blocks the pair.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        memory: Var,
        mask: Option<&[bool]>,
    ) -> Result<Attended> {
        let (nq, nk) = (g.shape(queries)[0], g.shape(memory)[0]);
        if let Some(m) = mask {
            if m.len() != nq * nk {
                return Err(Error::dim("attention_mask", &[nq, nk], &[m.len()]));
            }
        }
        let q = self.query.forward(g, store, queries)?;
        let k = self.key.forward(g, store, memory)?;
        let v = self.value.forward(g, store, memory)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = if self.heads == 1 {
                q
            } else {
                g.slice_cols(q, lo, hi)?
            };
            let kh = if self.heads == 1 {
                k
            } else {
                g.slice_cols(k, lo, hi)?
            };
            let vh = if self.heads == 1 {
                v
            } else {
                g.slice_cols(v, lo, hi)?
            };
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let attn = g.masked_softmax(scores, mask.map(<[bool]>::to_vec))?;
            outs.push(g.matmul(attn, vh)?);
            weights.push(attn);
        }
        let joined = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_last(&outs)?
        };
        let output = self.output.forward(g, store, joined)?;
        Ok(Attended { output, weights })
    }
}

/// `(query, key)` mask allowing only keys whose flag is set.
pub fn key_padding_mask(queries: usize, keys: &[bool]) -> Vec<bool> {
    (0..queries).flat_map(|_| keys.iter().copied()).collect()
}

/// Lower-triangular mask: query `i` sees keys `0..=i`.
pub fn causal_mask(n: usize) -> Vec<bool> {
    (0..n).flat_map(|i| (0..n).map(move |j| j <= i)).collect()
}
