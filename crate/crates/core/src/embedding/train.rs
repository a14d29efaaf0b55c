use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{argmax_allowed, EmbeddingConfig, EmbeddingModel};
use crate::error::{Error, Result};
use crate::tensor::{dot, Adam, Graph, Tensor};

/// A caption (as token ids) and the id of the image it describes.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub tokens: Vec<usize>,
    pub image: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingTrainLog {
    /// Mean hinge loss over all anchors of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Optimizer state around an [`EmbeddingModel`].
pub struct EmbeddingTrainer {
    pub model: EmbeddingModel,
    adam: Adam,
}

impl EmbeddingTrainer {
    pub fn new(model: EmbeddingModel) -> Result<Self> {
        let adam = Adam::new(model.config.optimizer, &model.store)?;
        Ok(Self { model, adam })
    }

    pub fn into_model(self) -> EmbeddingModel {
        self.model
    }

    /// One Adam update on a mini-batch. `image_keys[i]` identifies the image
    /// of row `i`; captions sharing the anchor's image are never used as its
    /// negatives. Returns `(mean loss, anchors)` or `None` when no anchor had
    /// an admissible negative.
    pub fn step(
        &mut self,
        texts: &[&[usize]],
        pooled: &Tensor,
        image_keys: &[usize],
    ) -> Result<Option<(f64, usize)>> {
        if texts.len() != pooled.rows() || texts.len() != image_keys.len() {
            return Err(Error::dim(
                "embedding_batch",
                &[texts.len()],
                &[pooled.rows(), image_keys.len()],
            ));
        }
        let model = &self.model;
        let alpha = model.config.alpha;
        let mut g = Graph::new();
        let y = model.text_embeddings(&mut g, texts)?;
        let px = g.constant(pooled.clone());
        let x = model.image_embeddings(&mut g, px)?;

        let (xv, yv) = (g.value(x).clone(), g.value(y).clone());
        let b = texts.len();
        let mut hinges = Vec::new();

        // image anchors, caption negatives
        let sims: Vec<Vec<f64>> = (0..b)
            .map(|i| (0..b).map(|j| dot(xv.row(i), yv.row(j))).collect())
            .collect();
        let (anchors, negs): (Vec<usize>, Vec<usize>) = (0..b)
            .filter_map(|i| {
                argmax_allowed(&sims[i], |j| image_keys[j] == image_keys[i]).map(|n| (i, n))
            })
            .unzip();
        if !anchors.is_empty() {
            hinges.push(hinge(&mut g, x, y, y, &anchors, &negs, alpha)?);
        }

        if model.config.symmetric {
            let (anchors, negs): (Vec<usize>, Vec<usize>) = (0..b)
                .filter_map(|i| {
                    let col: Vec<f64> = (0..b).map(|j| sims[j][i]).collect();
                    argmax_allowed(&col, |j| image_keys[j] == image_keys[i]).map(|n| (i, n))
                })
                .unzip();
            if !anchors.is_empty() {
                hinges.push(hinge(&mut g, y, x, x, &anchors, &negs, alpha)?);
            }
        }

        if hinges.is_empty() {
            return Ok(None);
        }
        let all = if hinges.len() == 1 {
            hinges[0]
        } else {
            g.concat_last(&hinges)?
        };
        let count = g.value(all).len();
        let loss = g.mean(all);
        g.backward(loss)?;
        self.model.store.zero_grad();
        self.model.store.accumulate_grads(&g);
        self.adam.step(&mut self.model.store)?;
        Ok(Some((g.value(loss).item(), count)))
    }
}

/// Per-anchor `relu(alpha − a·p + a·n)` as a vector.
pub(crate) fn hinge(
    g: &mut Graph,
    anchor: crate::tensor::Var,
    positive: crate::tensor::Var,
    negative: crate::tensor::Var,
    anchors: &[usize],
    negs: &[usize],
    alpha: f64,
) -> Result<crate::tensor::Var> {
    let a = g.gather(anchor, anchors)?;
    let p = g.gather(positive, anchors)?;
    let n = g.gather(negative, negs)?;
    let ap = g.mul(a, p)?;
    let pos = g.sum_last(ap);
    let an = g.mul(a, n)?;
    let neg = g.sum_last(an);
    let diff = g.sub(neg, pos)?;
    let margin = g.add_scalar(diff, alpha);
    Ok(g.relu(margin))
}

/// Trains both paths jointly with mini-batch Adam. Batches follow a seeded
/// shuffle of `pairs` each epoch.
pub fn train_embedding(
    pairs: &[TrainingPair],
    images: &BTreeMap<String, Tensor>,
    vocab_size: usize,
    config: &EmbeddingConfig,
    seed: u64,
) -> Result<(EmbeddingModel, EmbeddingTrainLog)> {
    if pairs.is_empty() {
        return Err(Error::Ingestion("no training pairs".into()));
    }
    let image_dim = images
        .values()
        .next()
        .map(|t| t.last_dim())
        .ok_or_else(|| Error::Ingestion("no image features".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = EmbeddingModel::new(config.clone(), vocab_size, image_dim, &mut rng)?;

    // pool every referenced image once; key = position in `image_ids`
    let mut image_ids: BTreeMap<&str, usize> = BTreeMap::new();
    let mut pooled: Vec<Tensor> = Vec::new();
    let mut keys = Vec::with_capacity(pairs.len());
    for p in pairs {
        let key = match image_ids.get(p.image.as_str()) {
            Some(&k) => k,
            None => {
                let regions = images.get(&p.image).ok_or_else(|| {
                    Error::Ingestion(format!("pair references unknown image {}", p.image))
                })?;
                pooled.push(model.pool(regions)?);
                image_ids.insert(&p.image, pooled.len() - 1);
                pooled.len() - 1
            }
        };
        keys.push(key);
        model.text.check_tokens(&p.tokens)?;
    }

    let mut trainer = EmbeddingTrainer::new(model)?;
    let mut log = EmbeddingTrainLog::default();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let texts: Vec<&[usize]> = chunk.iter().map(|&i| pairs[i].tokens.as_slice()).collect();
            let rows: Vec<&[f64]> = chunk.iter().map(|&i| pooled[keys[i]].data()).collect();
            let batch_keys: Vec<usize> = chunk.iter().map(|&i| keys[i]).collect();
            if let Some((loss, n)) =
                trainer.step(&texts, &Tensor::from_rows(&rows)?, &batch_keys)?
            {
                total += loss * n as f64;
                count += n;
            }
        }
        log.epoch_losses.push(if count == 0 {
            0.0
        } else {
            total / count as f64
        });
        log::debug!(
            "embedding epoch {} loss {:.5}",
            log.epoch_losses.len(),
            log.epoch_losses.last().unwrap()
        );
    }
    Ok((trainer.into_model(), log))
}
