//! Visual-aware sentence encoder.
//!
//! Text goes through a transformer encoder (`H`), retrieved image vectors
//! through a feed-forward projection (`M`). One multi-head attention layer
//! lets every token attend over the images (`H'`), and the two are fused as
//! `Ĥ = LayerNorm((H + H')·Wᵀ + b)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{key_padding_mask, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Model width `d`.
    pub dim: usize,
    /// Self-attention heads.
    pub heads: usize,
    /// Heads of the image cross-attention.
    pub fusion_heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            fusion_heads: 4,
            layers: 2,
            ff_dim: 256,
            max_len: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("heads", self.heads),
            ("fusion_heads", self.fusion_heads),
            ("layers", self.layers),
            ("ff_dim", self.ff_dim),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder.{name} must be positive")));
        }
        if !self.dim.is_multiple_of(self.heads) || !self.dim.is_multiple_of(self.fusion_heads) {
            return Err(Error::Config(format!(
                "encoder.dim {} must be divisible by heads {} and fusion_heads {}",
                self.dim, self.heads, self.fusion_heads
            )));
        }
        if self.dim < 2 {
            return Err(Error::Config("encoder.dim must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ff: FeedForward,
    norm2: LayerNorm,
}

pub struct EncoderOutput {
    /// `H: [I×d]`
    pub hidden: Var,
    /// Self-attention weights, `[layer][head]`.
    pub attention: Vec<Vec<Var>>,
}

/// Token + learned positional embeddings followed by post-norm layers
/// (self-attention, add & norm, feed-forward, add & norm).
#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    pub embed: ParamId,
    pub positions: ParamId,
    layers: Vec<EncoderLayer>,
    pub dim: usize,
    pub max_len: usize,
    pub vocab_size: usize,
}

impl TransformerEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        vocab_size: usize,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let std = 1.0 / (d as f64).sqrt();
        let embed = store.add(
            format!("{name}.embed"),
            Tensor::randn(&[vocab_size, d], std, rng),
        );
        let positions = store.add(
            format!("{name}.positions"),
            Tensor::randn(&[cfg.max_len, d], std, rng),
        );
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                Ok(EncoderLayer {
                    attn: MultiHeadAttention::new(store, &format!("{p}.attn"), d, cfg.heads, rng)?,
                    norm1: LayerNorm::new(store, &format!("{p}.norm1"), d),
                    ff: FeedForward::new(store, &format!("{p}.ff"), d, cfg.ff_dim, rng),
                    norm2: LayerNorm::new(store, &format!("{p}.norm2"), d),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            embed,
            positions,
            layers,
            dim: d,
            max_len: cfg.max_len,
            vocab_size,
        })
    }

    /// `mask[i] == false` marks token `i` as padding: no position attends
    /// to it.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: &[usize],
        mask: Option<&[bool]>,
    ) -> Result<EncoderOutput> {
        let n = tokens.len();
        if n == 0 {
            return Err(Error::EmptyInput("token sequence"));
        }
        if n > self.max_len {
            return Err(Error::Length {
                len: n,
                max: self.max_len,
            });
        }
        if let Some(m) = mask {
            if m.len() != n {
                return Err(Error::dim("padding_mask", &[n], &[m.len()]));
            }
        }
        let attn_mask = mask.map(|m| key_padding_mask(n, m));
        let table = g.param(store, self.embed);
        let tok = g.gather(table, tokens)?;
        let pos_table = g.param(store, self.positions);
        let positions: Vec<usize> = (0..n).collect();
        let pos = g.gather(pos_table, &positions)?;
        let mut h = g.add(tok, pos)?;
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let a = layer.attn.forward(g, store, h, h, attn_mask.as_deref())?;
            attention.push(a.weights);
            let res = g.add(h, a.output)?;
            h = layer.norm1.forward(g, store, res)?;
            let f = layer.ff.forward(g, store, h)?;
            let res = g.add(h, f)?;
            h = layer.norm2.forward(g, store, res)?;
        }
        Ok(EncoderOutput {
            hidden: h,
            attention,
        })
    }
}

/// Per-image `relu(e·W + b)` into the encoder width. No positional signal
/// over the image axis.
#[derive(Clone, Debug)]
pub struct ImageProjection {
    pub linear: Linear,
}

impl ImageProjection {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        image_dim: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            linear: Linear::new(store, name, image_dim, dim, true, rng),
        }
    }

    /// `images: [m×d_img] -> M: [m×d]`
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, images: Var) -> Result<Var> {
        let s = g.shape(images);
        if s.len() != 2 || s[1] != self.linear.in_dim {
            return Err(Error::dim("project_images", s, &[0, self.linear.in_dim]));
        }
        let y = self.linear.forward(g, store, images)?;
        Ok(g.relu(y))
    }
}

/// Image cross-attention plus the layer-normalized residual fusion.
#[derive(Clone, Debug)]
pub struct FusionLayer {
    pub cross: MultiHeadAttention,
    /// `W: [d×d]`
    pub mix: ParamId,
    /// `b: [d]`
    pub mix_bias: ParamId,
    pub norm: LayerNorm,
}

impl FusionLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            cross: MultiHeadAttention::new(store, &format!("{name}.cross"), dim, heads, rng)?,
            mix: store.add(format!("{name}.mix"), Tensor::identity(dim)),
            mix_bias: store.add(format!("{name}.mix_bias"), Tensor::zeros(&[dim])),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
        })
    }

    /// `H' = ATT(H, K_M, V_M)`. With no images `H'` is all zeros.
    pub fn attend(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        hidden: Var,
        images: Option<Var>,
    ) -> Result<(Var, Vec<Var>)> {
        match images {
            None => {
                let shape = g.shape(hidden).to_vec();
                Ok((g.constant(Tensor::zeros(&shape)), Vec::new()))
            }
            Some(m) => {
                let (hs, ms) = (g.shape(hidden), g.shape(m));
                if hs.len() != 2 || ms.len() != 2 || hs[1] != ms[1] {
                    return Err(Error::dim("attend_fuse", hs, ms));
                }
                let a = self.cross.forward(g, store, hidden, m, None)?;
                Ok((a.output, a.weights))
            }
        }
    }

    /// `Ĥ = LayerNorm((H + H')·Wᵀ + b)`, row-wise.
    pub fn fuse(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        hidden: Var,
        attended: Var,
    ) -> Result<Var> {
        if g.shape(hidden) != g.shape(attended) {
            return Err(Error::Contract(format!(
                "fusion inputs differ in shape: {:?} vs {:?}",
                g.shape(hidden),
                g.shape(attended)
            )));
        }
        let sum = g.add(hidden, attended)?;
        let w = g.param(store, self.mix);
        let wt = g.transpose(w)?;
        let mixed = g.matmul(sum, wt)?;
        let b = g.param(store, self.mix_bias);
        let shifted = g.add(mixed, b)?;
        self.norm.forward(g, store, shifted)
    }
}

/// Fused per-token representation `Ĥ`, same shape as `H`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedSequence {
    pub value: Tensor,
    pub mask: Vec<bool>,
}

pub struct VisualForward {
    pub hidden: Var,
    pub attended: Var,
    pub fused: Var,
    pub self_attention: Vec<Vec<Var>>,
    pub cross_attention: Vec<Var>,
}

/// Text encoder, image projection and fusion layer.
#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub config: EncoderConfig,
    pub encoder: TransformerEncoder,
    pub images: ImageProjection,
    pub fusion: FusionLayer,
}

impl VisualEncoder {
    /// Parameters are created text encoder first, so two models built from
    /// the same seed share the text encoder initialization.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        vocab_size: usize,
        image_dim: usize,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let encoder = TransformerEncoder::new(store, "encoder", vocab_size, cfg, rng)?;
        let images = ImageProjection::new(store, "image_proj", image_dim, cfg.dim, rng);
        let fusion = FusionLayer::new(store, "fusion", cfg.dim, cfg.fusion_heads, rng)?;
        Ok(Self {
            config: cfg.clone(),
            encoder,
            images,
            fusion,
        })
    }

    /// `images`: retrieved image vectors `[m×d_img]`; `None` means `m = 0`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: &[usize],
        images: Option<&Tensor>,
    ) -> Result<VisualForward> {
        let enc = self.encoder.forward(g, store, tokens, None)?;
        let m = match images {
            Some(t) => {
                let v = g.constant(t.clone());
                Some(self.images.forward(g, store, v)?)
            }
            None => None,
        };
        let (attended, cross_attention) = self.fusion.attend(g, store, enc.hidden, m)?;
        let fused = self.fusion.fuse(g, store, enc.hidden, attended)?;
        Ok(VisualForward {
            hidden: enc.hidden,
            attended,
            fused,
            self_attention: enc.attention,
            cross_attention,
        })
    }

    pub fn encode(
        &self,
        store: &ParamStore,
        tokens: &[usize],
        images: Option<&Tensor>,
    ) -> Result<FusedSequence> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, tokens, images)?;
        Ok(FusedSequence {
            value: g.value(out.fused).clone(),
            mask: vec![true; tokens.len()],
        })
    }
}
