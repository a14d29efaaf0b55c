//! Joint semantic-visual embedding: an SRU text path and a Weldon-pooled
//! image path projected onto one unit sphere, trained with a hinge triplet
//! loss over in-batch hard negatives.

mod model;
mod train;
mod weldon;

pub use model::{EmbeddingModel, ImagePath, SruLayer, TextPath};
pub(crate) use train::hinge;
pub use train::{train_embedding, EmbeddingTrainLog, EmbeddingTrainer, TrainingPair};
pub use weldon::{weldon_pool, WeldonConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, l2_norm, AdamConfig};

/// Tolerance for the unit-norm contract on triplet inputs.
pub const UNIT_NORM_TOL: f64 = 1e-4;

/// A unit-L2-norm vector in the shared space.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedEmbedding(Vec<f64>);

impl SharedEmbedding {
    /// Scales `v` to unit length.
    pub fn normalized(mut v: Vec<f64>) -> Result<Self> {
        let n = l2_norm(&v);
        if n.is_nan() || n <= 0.0 || !n.is_finite() {
            return Err(Error::Normalization(format!("vector norm is {n}")));
        }
        v.iter_mut().for_each(|x| *x /= n);
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &SharedEmbedding) -> f64 {
        dot(&self.0, &other.0)
    }
}

impl AsRef<[f64]> for SharedEmbedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    /// Token embedding / SRU width.
    pub text_dim: usize,
    /// Shared space dimension.
    pub shared_dim: usize,
    pub sru_layers: usize,
    pub max_len: usize,
    pub weldon: WeldonConfig,
    /// Triplet margin.
    pub alpha: f64,
    /// Also add text-anchored triplets with image negatives.
    pub symmetric: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: AdamConfig,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            text_dim: 64,
            shared_dim: 64,
            sru_layers: 1,
            max_len: 64,
            weldon: WeldonConfig::default(),
            alpha: 0.2,
            symmetric: false,
            batch_size: 32,
            epochs: 10,
            optimizer: AdamConfig {
                learning_rate: 2e-3,
                ..AdamConfig::default()
            },
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("text_dim", self.text_dim),
            ("shared_dim", self.shared_dim),
            ("sru_layers", self.sru_layers),
            ("max_len", self.max_len),
            ("batch_size", self.batch_size),
            ("weldon.k_plus", self.weldon.k_plus),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("embedding.{name} must be positive")));
        }
        if self.alpha.is_nan() || self.alpha < 0.0 {
            return Err(Error::Config(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

fn check_unit(name: &str, v: &[f64]) -> Result<()> {
    let n = l2_norm(v);
    if (n - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::Contract(format!("{name} has norm {n}, expected 1")));
    }
    Ok(())
}

/// `max(0, alpha − x·y + x·z)` for unit vectors: image `x`, matching
/// caption `y`, non-matching caption `z`.
pub fn triplet_loss(x: &[f64], y: &[f64], z: &[f64], alpha: f64) -> Result<f64> {
    if alpha.is_nan() || alpha < 0.0 {
        return Err(Error::Contract(format!("margin must be >= 0, got {alpha}")));
    }
    if x.len() != y.len() || x.len() != z.len() {
        return Err(Error::dim("triplet_loss", &[x.len()], &[y.len(), z.len()]));
    }
    check_unit("x", x)?;
    check_unit("y", y)?;
    check_unit("z", z)?;
    Ok((alpha - dot(x, y) + dot(x, z)).max(0.0))
}

/// Index of the allowed candidate with the highest score; ties go to the
/// lowest index.
pub(crate) fn argmax_allowed(scores: &[f64], forbidden: impl Fn(usize) -> bool) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, &s) in scores.iter().enumerate() {
        if forbidden(j) {
            continue;
        }
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((j, s));
        }
    }
    best.map(|(j, _)| j)
}

/// The candidate caption most similar to the anchor image, skipping the
/// `forbidden` indices (captions actually paired with the image).
pub fn mine_hard_negative(
    anchor: &SharedEmbedding,
    candidates: &[SharedEmbedding],
    forbidden: &[usize],
) -> Result<usize> {
    let scores: Vec<f64> = candidates.iter().map(|c| anchor.dot(c)).collect();
    argmax_allowed(&scores, |j| forbidden.contains(&j)).ok_or(Error::NoNegative)
}
