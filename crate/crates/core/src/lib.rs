//! Retrieval with promptable image embeddings: embedding stores, exact search,
//! attribute benchmarks, prompt handling, embedder providers, the linear
//! query-side approximation, and an evaluation harness with cost accounting.

pub mod approx;
pub mod benchmark;
pub mod config;
mod error;
pub mod harness;
pub mod prompts;
pub mod providers;
mod scalar;
pub mod search;
pub mod store;
pub mod synth;
mod vector;

pub use error::{Error, Result};
pub use scalar::{dot, l2_norm, Scalar};
pub use store::{EmbeddingStore, ItemId};
pub use vector::{EmbeddingVector, UNIT_TOLERANCE, ZERO_NORM};

/// Stored and provider-returned embeddings.
pub type Embedding = EmbeddingVector<f32>;
pub type Embedding64 = EmbeddingVector<f64>;
pub type LinearMap32 = approx::LinearMap<f32>;
pub type LinearMap64 = approx::LinearMap<f64>;
pub type SamplePairs32 = approx::SamplePairs<f32>;
pub type SamplePairs64 = approx::SamplePairs<f64>;
