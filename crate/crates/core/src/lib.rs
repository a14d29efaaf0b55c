//! Sentence modeling with visual awareness.
//!
//! A shared text/image embedding is trained with a hinge triplet loss over
//! hard negatives; at prediction time each sentence retrieves its top-m
//! images by cosine similarity, and a transformer encoder fuses the text
//! with the retrieved image features through multi-head attention and a
//! layer-normalized residual. Task heads (tagging, pair classification and
//! a small decoder) sit on top of the fused sequence.

pub mod embedding;
pub mod error;
pub mod fusion;
pub mod gradsuite;
pub mod heads;
pub mod nn;
pub mod pipeline;
pub mod retrieval;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, ParamId, ParamStore, Tensor, Var};
