//! Embedding providers: synthetic attribute world, precomputed files, HTTP service.

mod file;
mod http;
mod synthetic;

pub use file::{FileProvider, GENERAL_TAG, QUERIES_TAG};
pub use http::{HttpEmbedder, HttpEmbedderConfig, EMBEDDER_TIMEOUT_ENV, EMBEDDER_URL_ENV};
pub use synthetic::{FacetSpec, SyntheticImage, SyntheticProvider, SyntheticWorld, SyntheticWorldConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompts::PromptSpec;
use crate::store::ItemId;
use crate::Embedding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Capabilities {
    pub image_general: bool,
    pub image_prompted: bool,
    pub text_query: bool,
}

impl Capabilities {
    pub const ALL: Self = Self { image_general: true, image_prompted: true, text_query: true };
}

/// A text query to embed. Synthetic providers resolve `value` from the text when absent.
#[derive(Debug, Clone, Copy)]
pub struct QueryRequest<'a> {
    pub case_id: &'a ItemId,
    pub text: &'a str,
    pub facet: &'a str,
    pub value: Option<usize>,
}

/// The multimodal embedder `U` behind one interface.
///
/// Every returned vector has [`EmbedderProvider::dim`] entries and unit norm.
pub trait EmbedderProvider: Send + Sync {
    fn provider_id(&self) -> String;

    fn dim(&self) -> usize;

    fn capabilities(&self) -> Capabilities;

    /// Image embedding without a prompt.
    fn embed_image_general(&self, image: &ItemId) -> Result<Embedding>;

    /// Image embedding conditioned on `prompt`.
    fn embed_image_prompted(&self, image: &ItemId, prompt: &PromptSpec) -> Result<Embedding>;

    fn embed_query(&self, query: &QueryRequest<'_>) -> Result<Embedding>;
}

impl<P: EmbedderProvider + ?Sized> EmbedderProvider for &P {
    fn provider_id(&self) -> String {
        (**self).provider_id()
    }

    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }

    fn embed_image_general(&self, image: &ItemId) -> Result<Embedding> {
        (**self).embed_image_general(image)
    }

    fn embed_image_prompted(&self, image: &ItemId, prompt: &PromptSpec) -> Result<Embedding> {
        (**self).embed_image_prompted(image, prompt)
    }

    fn embed_query(&self, query: &QueryRequest<'_>) -> Result<Embedding> {
        (**self).embed_query(query)
    }
}

pub(crate) fn map_ureq_error(e: ureq::Error) -> Error {
    match e {
        ureq::Error::StatusCode(code) => Error::BadResponse(format!("HTTP status {code}")),
        other => Error::Transport(other.to_string()),
    }
}
