use rand::Rng;

use super::{weldon_pool, EmbeddingConfig, SharedEmbedding, WeldonConfig};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// One SRU layer:
/// `f = σ(W_f e + b_f)`, `c_t = f ⊙ c_{t−1} + (1 − f) ⊙ (W e)`,
/// `r = σ(W_r e + b_r)`, `h = r ⊙ c + (1 − r) ⊙ e`.
#[derive(Clone, Debug)]
pub struct SruLayer {
    pub forget: Linear,
    pub reset: Linear,
    pub candidate: Linear,
}

impl SruLayer {
    fn forward(&self, g: &mut Graph, store: &ParamStore, e: Var) -> Result<Var> {
        let f = self.forget.forward(g, store, e)?;
        let f = g.sigmoid(f);
        let r = self.reset.forward(g, store, e)?;
        let r = g.sigmoid(r);
        let x = self.candidate.forward(g, store, e)?;
        let c = g.sru_scan(f, x)?;
        // h = e + r ⊙ (c − e)
        let gap = g.sub(c, e)?;
        let gated = g.mul(r, gap)?;
        g.add(e, gated)
    }
}

#[derive(Clone, Debug)]
pub struct TextPath {
    pub embed: ParamId,
    pub layers: Vec<SruLayer>,
    pub projection: Linear,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl TextPath {
    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("token sequence"));
        }
        if tokens.len() > self.max_len {
            return Err(Error::Length {
                len: tokens.len(),
                max: self.max_len,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::Vocabulary {
                id,
                size: self.vocab_size,
            });
        }
        Ok(())
    }

    /// Mean-pooled SRU states of one sentence, `[1×text_dim]`.
    fn sentence(&self, g: &mut Graph, store: &ParamStore, tokens: &[usize]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let table = g.param(store, self.embed);
        let mut h = g.gather(table, tokens)?;
        for layer in &self.layers {
            h = layer.forward(g, store, h)?;
        }
        g.mean_rows(h)
    }
}

#[derive(Clone, Debug)]
pub struct ImagePath {
    pub weldon: WeldonConfig,
    pub projection: Linear,
    pub image_dim: usize,
}

/// Both encoding paths and their parameters.
#[derive(Clone, Debug)]
pub struct EmbeddingModel {
    pub config: EmbeddingConfig,
    pub store: ParamStore,
    pub text: TextPath,
    pub image: ImagePath,
}

impl EmbeddingModel {
    pub fn new<R: Rng + ?Sized>(
        config: EmbeddingConfig,
        vocab_size: usize,
        image_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 || image_dim == 0 {
            return Err(Error::Config(
                "vocabulary and image dimension must be positive".into(),
            ));
        }
        let dt = config.text_dim;
        let mut store = ParamStore::new();
        let embed = store.add(
            "text.embed",
            Tensor::randn(&[vocab_size, dt], 1.0 / (dt as f64).sqrt(), rng),
        );
        let layers = (0..config.sru_layers)
            .map(|l| SruLayer {
                forget: Linear::new(
                    &mut store,
                    &format!("text.sru{l}.forget"),
                    dt,
                    dt,
                    true,
                    rng,
                ),
                reset: Linear::new(&mut store, &format!("text.sru{l}.reset"), dt, dt, true, rng),
                candidate: Linear::new(
                    &mut store,
                    &format!("text.sru{l}.candidate"),
                    dt,
                    dt,
                    false,
                    rng,
                ),
            })
            .collect();
        let text_proj = Linear::new(&mut store, "text.proj", dt, config.shared_dim, true, rng);
        let image_proj = Linear::new(
            &mut store,
            "image.proj",
            image_dim,
            config.shared_dim,
            true,
            rng,
        );
        Ok(Self {
            text: TextPath {
                embed,
                layers,
                projection: text_proj,
                vocab_size,
                max_len: config.max_len,
            },
            image: ImagePath {
                weldon: config.weldon,
                projection: image_proj,
                image_dim,
            },
            config,
            store,
        })
    }

    pub fn shared_dim(&self) -> usize {
        self.config.shared_dim
    }

    /// Unit-norm caption embeddings, `[B×d_s]`.
    pub fn text_embeddings(&self, g: &mut Graph, texts: &[&[usize]]) -> Result<Var> {
        if texts.is_empty() {
            return Err(Error::EmptyInput("text batch"));
        }
        let rows = texts
            .iter()
            .map(|t| self.text.sentence(g, &self.store, t))
            .collect::<Result<Vec<_>>>()?;
        let stacked = g.concat_rows(&rows)?;
        let projected = self.text.projection.forward(g, &self.store, stacked)?;
        g.l2_normalize_rows(projected)
    }

    /// Unit-norm image embeddings from pooled features `[B×d_img]`.
    pub fn image_embeddings(&self, g: &mut Graph, pooled: Var) -> Result<Var> {
        let projected = self.image.projection.forward(g, &self.store, pooled)?;
        g.l2_normalize_rows(projected)
    }

    pub fn pool(&self, regions: &Tensor) -> Result<Tensor> {
        if regions.rank() != 2 || regions.shape()[1] != self.image.image_dim {
            return Err(Error::dim(
                "encode_image",
                regions.shape(),
                &[0, self.image.image_dim],
            ));
        }
        weldon_pool(regions, &self.image.weldon)
    }

    pub fn encode_text(&self, tokens: &[usize]) -> Result<SharedEmbedding> {
        Ok(self.encode_texts(&[tokens])?.remove(0))
    }

    pub fn encode_texts(&self, texts: &[&[usize]]) -> Result<Vec<SharedEmbedding>> {
        let mut g = Graph::new();
        let e = self.text_embeddings(&mut g, texts)?;
        Ok(rows_to_embeddings(g.value(e)))
    }

    pub fn encode_image(&self, regions: &Tensor) -> Result<SharedEmbedding> {
        let pooled = self.pool(regions)?;
        Ok(self.encode_pooled(&[pooled])?.remove(0))
    }

    /// Embeds already pooled image vectors.
    pub fn encode_pooled(&self, pooled: &[Tensor]) -> Result<Vec<SharedEmbedding>> {
        let mut g = Graph::new();
        let rows: Vec<&[f64]> = pooled.iter().map(Tensor::data).collect();
        let x = g.constant(Tensor::from_rows(&rows)?);
        let e = self.image_embeddings(&mut g, x)?;
        Ok(rows_to_embeddings(g.value(e)))
    }
}

fn rows_to_embeddings(t: &Tensor) -> Vec<SharedEmbedding> {
    // rows are already unit norm
    t.iter_rows().map(|r| SharedEmbedding(r.to_vec())).collect()
}
