//! Long-term action anticipation with few-shot prompted language models.
//!
//! Observed (verb, noun) actions and frame captions of a video clip are
//! rendered into a few-shot prompt whose examples are picked by maximal
//! marginal relevance; K sampled completions are parsed back into the closed
//! label space and scored with best-of-K edit distance.
//!
//! The similarity, metric and regression code is generic over [`Scalar`]
//! (`f32` or `f64`); the aliases below fix it to `f64`.

pub mod backends;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod pipeline;
pub mod prompting;
mod scalar;
pub mod selection;
pub mod taxonomy;

use sha2::{Digest, Sha256};

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use taxonomy::{ActionLabel, Vocabulary};

pub type Embedding = selection::Embedding<f64>;
pub type EmbeddingF32 = selection::Embedding<f32>;
pub type MmrConfig = selection::MmrConfig<f64>;
pub type RegressionResult = evaluation::RegressionResult<f64>;
pub type EmbeddingCache = selection::EmbeddingCache<f64>;

pub(crate) fn sha256_bytes(data: &[u8]) -> [u8; 32] {
    Sha256::digest(data).into()
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(sha256_bytes(data))
}
