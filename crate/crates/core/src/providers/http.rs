use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{map_ureq_error, Capabilities, EmbedderProvider, QueryRequest};
use crate::error::{Error, Result};
use crate::prompts::PromptSpec;
use crate::store::ItemId;
use crate::vector::EmbeddingVector;
use crate::Embedding;

pub const EMBEDDER_URL_ENV: &str = "FACET_EMBEDDER_URL";
pub const EMBEDDER_TIMEOUT_ENV: &str = "FACET_EMBEDDER_TIMEOUT_SECS";

#[derive(Debug, Clone)]
pub struct HttpEmbedderConfig {
    pub url: String,
    pub dim: usize,
    pub timeout: Duration,
    pub max_in_flight: usize,
    /// Responses whose norm is within this distance of 1 are renormalized; others are rejected.
    pub norm_tolerance: f64,
}

impl HttpEmbedderConfig {
    pub fn new(url: impl Into<String>, dim: usize) -> Self {
        Self { url: url.into(), dim, timeout: Duration::from_secs(30), max_in_flight: 8, norm_tolerance: 0.05 }
    }

    /// Reads `FACET_EMBEDDER_URL` and, if set, `FACET_EMBEDDER_TIMEOUT_SECS`.
    pub fn from_env(dim: usize) -> Result<Self> {
        let url = std::env::var(EMBEDDER_URL_ENV)
            .map_err(|_| Error::ProviderUnavailable(format!("{EMBEDDER_URL_ENV} is not set")))?;
        let mut config = Self::new(url, dim);
        if let Ok(secs) = std::env::var(EMBEDDER_TIMEOUT_ENV) {
            let secs: u64 = secs
                .trim()
                .parse()
                .map_err(|_| Error::ConfigInvalid(format!("{EMBEDDER_TIMEOUT_ENV} must be an integer")))?;
            config.timeout = Duration::from_secs(secs);
        }
        Ok(config)
    }
}

#[derive(Debug, Serialize)]
struct EmbedRequest<'a> {
    item_id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    prompt: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<&'a str>,
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    embedding: Vec<f32>,
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Slots {
    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|p| p.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|p| p.into_inner());
        }
        *free -= 1;
        SlotGuard(self)
    }
}

struct SlotGuard<'a>(&'a Slots);

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|p| p.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// Client for a remote embedding service speaking the JSON embed protocol.
pub struct HttpEmbedder {
    config: HttpEmbedderConfig,
    agent: ureq::Agent,
    slots: Slots,
}

impl HttpEmbedder {
    pub fn new(config: HttpEmbedderConfig) -> Result<Self> {
        if config.dim == 0 || config.max_in_flight == 0 {
            return Err(Error::ConfigInvalid("dim and max_in_flight must be positive".into()));
        }
        let agent = ureq::Agent::config_builder().timeout_global(Some(config.timeout)).build().into();
        let slots = Slots { free: Mutex::new(config.max_in_flight), cv: Condvar::new() };
        Ok(Self { config, agent, slots })
    }

    pub fn from_env(dim: usize) -> Result<Self> {
        Self::new(HttpEmbedderConfig::from_env(dim)?)
    }

    fn request(&self, body: &EmbedRequest<'_>) -> Result<Embedding> {
        let parsed: EmbedResponse = {
            let _slot = self.slots.acquire();
            let mut resp = self.agent.post(&self.config.url).send_json(body).map_err(map_ureq_error)?;
            resp.body_mut().read_json().map_err(|e| Error::BadResponse(format!("embed response: {e}")))?
        };
        self.validate(body.item_id, parsed.embedding)
    }

    fn validate(&self, item: &str, values: Vec<f32>) -> Result<Embedding> {
        if values.len() != self.config.dim {
            return Err(Error::DimMismatch { expected: self.config.dim, actual: values.len() });
        }
        let norm = crate::scalar::l2_norm(&values);
        if !norm.is_finite() || (norm - 1.0).abs() > self.config.norm_tolerance {
            return Err(Error::Norm { id: item.to_string(), norm, tolerance: self.config.norm_tolerance });
        }
        EmbeddingVector::normalize(&values)
    }
}

impl EmbedderProvider for HttpEmbedder {
    fn provider_id(&self) -> String {
        format!("http({})", self.config.url)
    }

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities::ALL
    }

    fn embed_image_general(&self, image: &ItemId) -> Result<Embedding> {
        self.request(&EmbedRequest { item_id: image.as_str(), prompt: None, text: None })
    }

    fn embed_image_prompted(&self, image: &ItemId, prompt: &PromptSpec) -> Result<Embedding> {
        self.request(&EmbedRequest { item_id: image.as_str(), prompt: Some(&prompt.full_prompt), text: None })
    }

    fn embed_query(&self, query: &QueryRequest<'_>) -> Result<Embedding> {
        self.request(&EmbedRequest { item_id: query.case_id.as_str(), prompt: None, text: Some(query.text) })
    }
}
