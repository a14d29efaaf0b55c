//! Configuration, corpus ingestion, synthetic data, checkpoints, metrics
//! and the command-line stages built on them.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod metrics;
pub mod stages;
pub mod synth;
pub mod tasks;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{RunConfig, TaskKind};
pub use corpus::{Corpus, NliExample, Split, TagExample, TranslationExample, Vocab};
pub use metrics::{MetricRecord, MetricsLog};
pub use synth::{generate_synthetic_corpus, SynthConfig};
