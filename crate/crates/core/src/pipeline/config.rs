use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::SynthConfig;
use crate::embedding::EmbeddingConfig;
use crate::error::{Error, Result};
use crate::fusion::EncoderConfig;
use crate::retrieval::DEFAULT_TOP_M;
use crate::tensor::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Per-token tagging of ambiguous words.
    Tagging,
    /// Three-way sentence-pair classification.
    Nli,
    /// Token-by-token translation with the decoder.
    Translation,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Tagging => "tagging",
            TaskKind::Nli => "nli",
            TaskKind::Translation => "translation",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    /// Images forwarded per sentence. `0` disables the visual path.
    pub m: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { m: DEFAULT_TOP_M }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub task: TaskKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Decoding limit for the translation task.
    pub max_decode_len: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Tagging,
            epochs: 15,
            batch_size: 16,
            optimizer: AdamConfig::default(),
            max_decode_len: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Working directory for corpus, checkpoints, logs and predictions.
    pub out_dir: PathBuf,
    /// Corpus location; defaults to `<out_dir>/corpus`.
    pub corpus_dir: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("run"),
            corpus_dir: None,
        }
    }
}

/// Everything a pipeline run needs. Loaded from one JSON document; absent
/// sections take their defaults and unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: SynthConfig,
    pub embedding: EmbeddingConfig,
    pub retrieval: RetrievalConfig,
    pub encoder: EncoderConfig,
    pub task: TaskConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            data: SynthConfig::default(),
            embedding: EmbeddingConfig::default(),
            retrieval: RetrievalConfig::default(),
            encoder: EncoderConfig::default(),
            task: TaskConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.embedding.validate()?;
        self.encoder.validate()?;
        if self.task.epochs == 0 || self.task.batch_size == 0 || self.task.max_decode_len == 0 {
            return Err(Error::Config(
                "task epochs, batch_size and max_decode_len must be positive".into(),
            ));
        }
        if self.task.optimizer.learning_rate.is_nan() || self.task.optimizer.learning_rate <= 0.0 {
            return Err(Error::Config("task learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.paths
            .corpus_dir
            .clone()
            .unwrap_or_else(|| self.paths.out_dir.join("corpus"))
    }

    pub fn out(&self, file: &str) -> PathBuf {
        self.paths.out_dir.join(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
        assert_eq!(cfg.retrieval.m, 8);
    }

    #[test]
    fn partial_document_fills_defaults() {
        let cfg = RunConfig::from_json(r#"{"seed": 3, "retrieval": {"m": 2}}"#).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.retrieval.m, 2);
        assert_eq!(cfg.encoder, EncoderConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            RunConfig::from_json(r#"{"sede": 3}"#),
            Err(Error::Config(_))
        ));
        assert!(RunConfig::from_json(r#"{"encoder": {"dims": 3}}"#).is_err());
    }

    #[test]
    fn indivisible_heads_are_rejected() {
        assert!(RunConfig::from_json(r#"{"encoder": {"dim": 10, "heads": 4}}"#).is_err());
    }
}
