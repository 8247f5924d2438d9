use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Capabilities, EmbedderProvider, QueryRequest};
use crate::error::{Error, Result};
use crate::prompts::PromptSpec;
use crate::store::{EmbeddingStore, ItemId};
use crate::Embedding;

pub const GENERAL_TAG: &str = "general";
pub const QUERIES_TAG: &str = "queries";

/// Serves precomputed embeddings from a directory of store files.
///
/// Each `*.fcte` file is routed by its tag: `general`, `queries` (keyed by
/// case id), or a prompt id (prompted embeddings keyed by image id).
#[derive(Debug, Clone)]
pub struct FileProvider {
    root: PathBuf,
    dim: usize,
    general: Option<EmbeddingStore>,
    queries: Option<EmbeddingStore>,
    prompted: HashMap<String, EmbeddingStore>,
}

impl FileProvider {
    pub fn from_stores(stores: Vec<EmbeddingStore>) -> Result<Self> {
        Self::assemble(PathBuf::new(), stores)
    }

    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().is_some_and(|x| x == "fcte") {
                paths.push(path);
            }
        }
        paths.sort();
        let stores = paths.iter().map(EmbeddingStore::load).collect::<Result<Vec<_>>>()?;
        Self::assemble(dir.to_path_buf(), stores)
    }

    fn assemble(root: PathBuf, stores: Vec<EmbeddingStore>) -> Result<Self> {
        let dim = stores.first().map(EmbeddingStore::dim).ok_or_else(|| {
            Error::ProviderUnavailable(format!("no embedding stores under {}", root.display()))
        })?;
        let mut provider = Self { root, dim, general: None, queries: None, prompted: HashMap::new() };
        for store in stores {
            if store.dim() != dim {
                return Err(Error::DimMismatch { expected: dim, actual: store.dim() });
            }
            let slot = match store.tag() {
                GENERAL_TAG => &mut provider.general,
                QUERIES_TAG => &mut provider.queries,
                tag => {
                    let tag = tag.to_string();
                    if provider.prompted.insert(tag.clone(), store).is_some() {
                        return Err(Error::InvalidArgument(format!("two stores tagged `{tag}`")));
                    }
                    continue;
                }
            };
            if slot.replace(store).is_some() {
                return Err(Error::InvalidArgument("duplicate general or queries store".into()));
            }
        }
        Ok(provider)
    }

    pub fn prompt_ids(&self) -> impl Iterator<Item = &str> {
        self.prompted.keys().map(String::as_str)
    }

    fn lookup(store: Option<&EmbeddingStore>, id: &str, missing: &'static str) -> Result<Embedding> {
        let store = store.ok_or(Error::Unsupported(missing))?;
        store.get(id).map_err(|e| match e {
            Error::UnknownId(id) => Error::UnknownImage(id),
            other => other,
        })
    }
}

impl EmbedderProvider for FileProvider {
    fn provider_id(&self) -> String {
        format!("file({})", self.root.display())
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            image_general: self.general.is_some(),
            image_prompted: !self.prompted.is_empty(),
            text_query: self.queries.is_some(),
        }
    }

    fn embed_image_general(&self, image: &ItemId) -> Result<Embedding> {
        Self::lookup(self.general.as_ref(), image.as_str(), "image_general")
    }

    fn embed_image_prompted(&self, image: &ItemId, prompt: &PromptSpec) -> Result<Embedding> {
        if self.prompted.is_empty() {
            return Err(Error::Unsupported("image_prompted"));
        }
        let store = self
            .prompted
            .get(&prompt.prompt_id)
            .ok_or_else(|| Error::MissingPrompt(prompt.prompt_id.clone()))?;
        Self::lookup(Some(store), image.as_str(), "image_prompted")
    }

    fn embed_query(&self, query: &QueryRequest<'_>) -> Result<Embedding> {
        let store = self.queries.as_ref().ok_or(Error::Unsupported("text_query"))?;
        store.get(query.case_id.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::DEFAULT_WRAPPER;
    use crate::vector::EmbeddingVector;

    fn store(tag: &str, ids: &[&str]) -> EmbeddingStore {
        let mut s = EmbeddingStore::new(3, tag).unwrap();
        for (i, id) in ids.iter().enumerate() {
            let raw = [1.0 + i as f32, 0.5, -0.25 * i as f32];
            s.push(ItemId::new(*id).unwrap(), &EmbeddingVector::normalize(&raw).unwrap()).unwrap();
        }
        s
    }

    #[test]
    fn lookups_are_byte_equal() {
        let dir = tempfile::tempdir().unwrap();
        let general = store(GENERAL_TAG, &["i1", "i2"]);
        general.save(dir.path().join("general.fcte")).unwrap();
        store(QUERIES_TAG, &["c1"]).save(dir.path().join("queries.fcte")).unwrap();
        store("gpt-scenes", &["i1", "i2"]).save(dir.path().join("gpt-scenes.fcte")).unwrap();
        let p = FileProvider::open(dir.path()).unwrap();
        assert_eq!(p.capabilities(), Capabilities::ALL);
        let i2 = ItemId::new("i2").unwrap();
        let got = p.embed_image_general(&i2).unwrap();
        let want = general.row_by_id("i2").unwrap();
        assert!(got.as_slice().iter().zip(want).all(|(a, b)| a.to_bits() == b.to_bits()));
        let prompt = PromptSpec::new("gpt-scenes", "scenes", "Where?", DEFAULT_WRAPPER).unwrap();
        assert!(p.embed_image_prompted(&i2, &prompt).is_ok());
        let other = PromptSpec::new("gpt-times", "times", "When?", DEFAULT_WRAPPER).unwrap();
        assert!(matches!(p.embed_image_prompted(&i2, &other), Err(Error::MissingPrompt(_))));
        let c1 = ItemId::new("c1").unwrap();
        let q = QueryRequest { case_id: &c1, text: "whatever", facet: "scenes", value: None };
        assert!(p.embed_query(&q).is_ok());
    }

    #[test]
    fn missing_capabilities() {
        let p = FileProvider::from_stores(vec![store(GENERAL_TAG, &["i1"])]).unwrap();
        let c = ItemId::new("c1").unwrap();
        let q = QueryRequest { case_id: &c, text: "", facet: "f", value: None };
        assert!(matches!(p.embed_query(&q), Err(Error::Unsupported(_))));
        assert!(matches!(p.embed_image_general(&ItemId::new("zz").unwrap()), Err(Error::UnknownImage(_))));
    }

    #[test]
    fn mixed_dims_rejected() {
        let mut other = EmbeddingStore::new(2, QUERIES_TAG).unwrap();
        other.push(ItemId::new("c").unwrap(), &EmbeddingVector::normalize(&[1.0f32, 1.0]).unwrap()).unwrap();
        assert!(FileProvider::from_stores(vec![store(GENERAL_TAG, &["i1"]), other]).is_err());
        assert!(FileProvider::from_stores(vec![]).is_err());
    }
}
