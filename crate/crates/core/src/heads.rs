//! Task layers over the fused representation `Ĥ`: a per-token tagger, a
//! sentence-pair classifier and a one-layer attentive decoder.

use rand::Rng;

use crate::error::{Error, Result};
use crate::fusion::FusedSequence;
use crate::nn::{causal_mask, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Affine `d -> T` applied per token.
#[derive(Clone, Debug)]
pub struct TagHead {
    pub linear: Linear,
    pub tags: usize,
}

impl TagHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        tags: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if tags < 2 {
            return Err(Error::Config(format!(
                "tag head needs at least 2 tags, got {tags}"
            )));
        }
        Ok(Self {
            linear: Linear::new(store, name, dim, tags, true, rng),
            tags,
        })
    }

    /// `[I×T]` logits.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, fused: Var) -> Result<Var> {
        self.linear.forward(g, store, fused)
    }

    /// Mean token cross-entropy; `None` targets (padding) are skipped.
    pub fn loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        fused: Var,
        gold: &[Option<usize>],
    ) -> Result<Var> {
        let logits = self.logits(g, store, fused)?;
        g.cross_entropy(logits, gold)
    }
}

/// Per-token tag distribution `[I×T]`.
pub fn tag_sequence(fused: &FusedSequence, head: &TagHead, store: &ParamStore) -> Result<Tensor> {
    let mut g = Graph::new();
    let h = g.constant(fused.value.clone());
    let logits = head.logits(&mut g, store, h)?;
    let p = g.softmax(logits)?;
    Ok(g.value(p).clone())
}

/// Affine `4d -> C` over `[h_p; h_h; |h_p - h_h|; h_p ⊙ h_h]` of mean-pooled
/// sequences.
#[derive(Clone, Debug)]
pub struct PairHead {
    pub linear: Linear,
    pub classes: usize,
}

impl PairHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!(
                "pair head needs at least 2 classes, got {classes}"
            )));
        }
        Ok(Self {
            linear: Linear::new(store, name, 4 * dim, classes, true, rng),
            classes,
        })
    }

    pub fn features(&self, g: &mut Graph, premise: Var, hypothesis: Var) -> Result<Var> {
        for v in [premise, hypothesis] {
            let s = g.shape(v);
            if s.len() != 2 || s[0] == 0 {
                return Err(Error::Contract(format!(
                    "pair input must be a non-empty sequence, got {s:?}"
                )));
            }
        }
        let hp = g.mean_rows(premise)?;
        let hh = g.mean_rows(hypothesis)?;
        let diff = g.sub(hp, hh)?;
        let diff = g.abs(diff);
        let prod = g.mul(hp, hh)?;
        g.concat_last(&[hp, hh, diff, prod])
    }

    /// `[1×C]` logits.
    pub fn logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        premise: Var,
        hypothesis: Var,
    ) -> Result<Var> {
        let f = self.features(g, premise, hypothesis)?;
        self.linear.forward(g, store, f)
    }
}

/// Distribution over the pair classes.
pub fn classify_pair(
    premise: &FusedSequence,
    hypothesis: &FusedSequence,
    head: &PairHead,
    store: &ParamStore,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = g.constant(premise.value.clone());
    let h = g.constant(hypothesis.value.clone());
    let logits = head.logits(&mut g, store, p, h)?;
    let probs = g.softmax(logits)?;
    Ok(g.value(probs).data().to_vec())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodeResult {
    /// Generated tokens, without BOS/EOS.
    pub tokens: Vec<usize>,
    /// `true` when `max_len` was hit before EOS.
    pub truncated: bool,
}

/// One post-norm transformer decoder layer: causal self-attention,
/// cross-attention over `Ĥ`, feed-forward, then a vocabulary projection.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub embed: ParamId,
    pub positions: ParamId,
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm2: LayerNorm,
    ff: FeedForward,
    norm3: LayerNorm,
    pub output: Linear,
    pub dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub bos: usize,
    pub eos: usize,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        vocab_size: usize,
        max_len: usize,
        (bos, eos): (usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        if bos >= vocab_size || eos >= vocab_size {
            return Err(Error::Vocabulary {
                id: bos.max(eos),
                size: vocab_size,
            });
        }
        let std = 1.0 / (dim as f64).sqrt();
        Ok(Self {
            embed: store.add(
                format!("{name}.embed"),
                Tensor::randn(&[vocab_size, dim], std, rng),
            ),
            positions: store.add(
                format!("{name}.positions"),
                Tensor::randn(&[max_len + 1, dim], std, rng),
            ),
            self_attn: MultiHeadAttention::new(
                store,
                &format!("{name}.self_attn"),
                dim,
                heads,
                rng,
            )?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            cross_attn: MultiHeadAttention::new(
                store,
                &format!("{name}.cross_attn"),
                dim,
                heads,
                rng,
            )?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, ff_dim, rng),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), dim),
            output: Linear::new(store, &format!("{name}.output"), dim, vocab_size, true, rng),
            dim,
            vocab_size,
            max_len,
            bos,
            eos,
        })
    }

    /// Next-token logits `[T×V]` for every prefix position of `inputs`.
    pub fn logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        memory: Var,
        inputs: &[usize],
    ) -> Result<Var> {
        let n = inputs.len();
        if n == 0 {
            return Err(Error::EmptyInput("decoder input"));
        }
        if n > self.max_len + 1 {
            return Err(Error::Length {
                len: n,
                max: self.max_len + 1,
            });
        }
        if g.shape(memory).len() != 2 || g.shape(memory)[1] != self.dim {
            return Err(Error::dim(
                "decoder_memory",
                g.shape(memory),
                &[0, self.dim],
            ));
        }
        let table = g.param(store, self.embed);
        let tok = g.gather(table, inputs)?;
        let pos_table = g.param(store, self.positions);
        let idx: Vec<usize> = (0..n).collect();
        let pos = g.gather(pos_table, &idx)?;
        let x = g.add(tok, pos)?;
        let mask = causal_mask(n);
        let a = self.self_attn.forward(g, store, x, x, Some(&mask))?;
        let x = g.add(x, a.output)?;
        let x = self.norm1.forward(g, store, x)?;
        let c = self.cross_attn.forward(g, store, x, memory, None)?;
        let x = g.add(x, c.output)?;
        let x = self.norm2.forward(g, store, x)?;
        let f = self.ff.forward(g, store, x)?;
        let x = g.add(x, f)?;
        let x = self.norm3.forward(g, store, x)?;
        self.output.forward(g, store, x)
    }

    /// Teacher-forced cross-entropy of `target` followed by EOS.
    pub fn loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        memory: Var,
        target: &[usize],
    ) -> Result<Var> {
        if target.len() > self.max_len {
            return Err(Error::Length {
                len: target.len(),
                max: self.max_len,
            });
        }
        let mut inputs = Vec::with_capacity(target.len() + 1);
        inputs.push(self.bos);
        inputs.extend_from_slice(target);
        let gold: Vec<Option<usize>> = target
            .iter()
            .chain(std::iter::once(&self.eos))
            .map(|&t| Some(t))
            .collect();
        let logits = self.logits(g, store, memory, &inputs)?;
        g.cross_entropy(logits, &gold)
    }
}

/// Greedy decoding from BOS until EOS or `max_len` tokens.
pub fn greedy_decode(
    fused: &FusedSequence,
    decoder: &Decoder,
    store: &ParamStore,
    max_len: usize,
) -> Result<DecodeResult> {
    if max_len == 0 {
        return Err(Error::Contract("max_len must be at least 1".into()));
    }
    let max_len = max_len.min(decoder.max_len);
    let mut inputs = vec![decoder.bos];
    let mut tokens = Vec::new();
    loop {
        let mut g = Graph::new();
        let memory = g.constant(fused.value.clone());
        let logits = decoder.logits(&mut g, store, memory, &inputs)?;
        let last = g.value(logits).row(inputs.len() - 1);
        let next = argmax(last);
        if next == decoder.eos {
            return Ok(DecodeResult {
                tokens,
                truncated: false,
            });
        }
        if tokens.len() == max_len {
            return Ok(DecodeResult {
                tokens,
                truncated: true,
            });
        }
        tokens.push(next);
        inputs.push(next);
    }
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
