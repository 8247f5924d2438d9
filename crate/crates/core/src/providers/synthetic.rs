//! Desk-scale stand-in for a promptable multimodal embedder.
//!
//! Every image has one value per facet and a salience per facet. The embedding
//! space is a concatenation of one-hot blocks, one block per facet:
//!
//! - general: `normalize(sum_f s_f * e(f, v_f) + eps * eta)`
//! - prompted on facet `p`: same, with `s_p` multiplied by the prompt boost
//! - query `(f, v)`: `normalize(e(f, v) + (mu / |V_f|) * u_f)`
//!
//! The blend term `mu` rewards any image that shows facet `f` prominently,
//! which is what lets a dominant wrong value beat a faint correct one.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Capabilities, EmbedderProvider, QueryRequest};
use crate::benchmark::Facet;
use crate::error::{Error, Result};
use crate::prompts::PromptSpec;
use crate::store::ItemId;
use crate::vector::EmbeddingVector;
use crate::Embedding;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticWorldConfig {
    pub n_facets: usize,
    pub values_per_facet: usize,
    pub n_images: usize,
    pub salience_low: f64,
    pub salience_high: f64,
    /// Fraction of an image's facets drawn at high salience.
    pub dominant_fraction: f64,
    /// `mu`: weight of the facet-presence term in queries.
    pub query_blend: f64,
    /// `gamma`: multiplier on the prompted facet's salience.
    pub prompt_boost: f64,
    /// `eps`: scale of the per-image Gaussian noise.
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        Self {
            n_facets: 8,
            values_per_facet: 5,
            n_images: 2000,
            salience_low: 0.1,
            salience_high: 1.0,
            dominant_fraction: 0.25,
            query_blend: 3.0,
            prompt_boost: 8.0,
            noise_scale: 0.01,
            seed: 0,
        }
    }
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(m.to_string()));
        if self.n_facets < 2 {
            return bad("n_facets must be at least 2");
        }
        if self.values_per_facet < 3 {
            return bad("values_per_facet must be at least 3");
        }
        if self.n_images == 0 {
            return bad("n_images must be positive");
        }
        if !(self.salience_low >= 0.0 && self.salience_low < self.salience_high && self.salience_high.is_finite()) {
            return bad("need 0 <= salience_low < salience_high");
        }
        if !(self.dominant_fraction > 0.0 && self.dominant_fraction <= 1.0) {
            return bad("dominant_fraction must lie in (0, 1]");
        }
        if !(self.query_blend >= 0.0 && self.query_blend.is_finite()) {
            return bad("query_blend must be non-negative");
        }
        if !(self.prompt_boost >= 1.0 && self.prompt_boost.is_finite()) {
            return bad("prompt_boost must be at least 1");
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be non-negative");
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.n_facets * self.values_per_facet
    }

    /// Number of high-salience facets per image; never zero.
    pub fn dominant_per_image(&self) -> usize {
        ((self.dominant_fraction * self.n_facets as f64).round() as usize).clamp(1, self.n_facets)
    }
}

/// A facet of the synthetic world: value names and the query template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacetSpec {
    pub facet: Facet,
    pub values: Vec<String>,
    /// Contains `{value}`.
    pub template: String,
}

impl FacetSpec {
    pub fn query_text(&self, value: usize) -> String {
        self.template.replace("{value}", &self.values[value])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticImage {
    pub id: ItemId,
    /// Value index per facet.
    pub assignment: Vec<usize>,
    /// Salience per facet, each either the low or the high level.
    pub salience: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    config: SyntheticWorldConfig,
    facets: Vec<FacetSpec>,
    images: Vec<SyntheticImage>,
    index: HashMap<ItemId, usize>,
    queries: HashMap<String, (usize, usize)>,
}

impl SyntheticWorld {
    /// Assembles a world from parts; see `synth::generate_world` for the usual entry point.
    pub fn from_parts(config: SyntheticWorldConfig, facets: Vec<FacetSpec>, images: Vec<SyntheticImage>) -> Result<Self> {
        config.validate()?;
        if facets.len() != config.n_facets {
            return Err(Error::ConfigInvalid(format!("expected {} facets, got {}", config.n_facets, facets.len())));
        }
        for f in &facets {
            if f.values.len() != config.values_per_facet {
                return Err(Error::ConfigInvalid(format!("facet `{}` has {} values", f.facet.name, f.values.len())));
            }
        }
        let mut index = HashMap::with_capacity(images.len());
        for (i, img) in images.iter().enumerate() {
            if img.assignment.len() != facets.len() || img.salience.len() != facets.len() {
                return Err(Error::ConfigInvalid(format!("image `{}` does not cover every facet", img.id)));
            }
            if img.assignment.iter().any(|&v| v >= config.values_per_facet) {
                return Err(Error::ConfigInvalid(format!("image `{}` has an out-of-range value", img.id)));
            }
            if !img.salience.contains(&config.salience_high) {
                return Err(Error::ConfigInvalid(format!("image `{}` has no dominant facet", img.id)));
            }
            if index.insert(img.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(img.id.to_string()));
            }
        }
        let mut queries = HashMap::new();
        for (fi, f) in facets.iter().enumerate() {
            for v in 0..f.values.len() {
                queries.insert(f.query_text(v), (fi, v));
            }
        }
        Ok(Self { config, facets, images, index, queries })
    }

    pub fn config(&self) -> &SyntheticWorldConfig {
        &self.config
    }

    pub fn facets(&self) -> &[FacetSpec] {
        &self.facets
    }

    pub fn images(&self) -> &[SyntheticImage] {
        &self.images
    }

    pub fn dim(&self) -> usize {
        self.config.dim()
    }

    pub fn facet_index(&self, name: &str) -> Option<usize> {
        self.facets.iter().position(|f| f.facet.name == name)
    }

    pub fn image(&self, id: &str) -> Option<&SyntheticImage> {
        self.index.get(id).map(|&i| &self.images[i])
    }

    /// `(facet index, value index)` for a rendered query text.
    pub fn resolve_query(&self, text: &str) -> Option<(usize, usize)> {
        self.queries.get(text).copied()
    }

    fn block(&self, facet: usize, value: usize) -> usize {
        facet * self.config.values_per_facet + value
    }

    /// `eta(i)`: a standard-normal vector that depends only on the seed and the image's position.
    fn noise(&self, position: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(position as u64 + 1);
        (0..self.dim()).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    /// Unnormalized image embedding with facet `boosted` multiplied by the prompt boost.
    pub fn raw_image(&self, id: &str, boosted: Option<usize>) -> Result<Vec<f64>> {
        let &position = self.index.get(id).ok_or_else(|| Error::UnknownImage(id.to_string()))?;
        let img = &self.images[position];
        let mut raw = vec![0.0f64; self.dim()];
        for (f, (&v, &s)) in img.assignment.iter().zip(&img.salience).enumerate() {
            let weight = if Some(f) == boosted { self.config.prompt_boost * s } else { s };
            raw[self.block(f, v)] += weight;
        }
        if self.config.noise_scale > 0.0 {
            for (x, n) in raw.iter_mut().zip(self.noise(position)) {
                *x += self.config.noise_scale * n;
            }
        }
        Ok(raw)
    }

    pub fn raw_query(&self, facet: usize, value: usize) -> Result<Vec<f64>> {
        if facet >= self.facets.len() || value >= self.config.values_per_facet {
            return Err(Error::InvalidArgument(format!("no value {value} on facet {facet}")));
        }
        let mut raw = vec![0.0f64; self.dim()];
        let blend = self.config.query_blend / self.config.values_per_facet as f64;
        for v in 0..self.config.values_per_facet {
            raw[self.block(facet, v)] = blend;
        }
        raw[self.block(facet, value)] += 1.0;
        Ok(raw)
    }
}

/// [`EmbedderProvider`] over a [`SyntheticWorld`].
#[derive(Debug, Clone)]
pub struct SyntheticProvider {
    world: SyntheticWorld,
}

impl SyntheticProvider {
    pub fn new(world: SyntheticWorld) -> Self {
        Self { world }
    }

    pub fn world(&self) -> &SyntheticWorld {
        &self.world
    }

    fn facet_of(&self, name: &str) -> Result<usize> {
        self.world.facet_index(name).ok_or_else(|| Error::UnknownFacet(name.to_string()))
    }

    pub fn embed_query_value(&self, facet: &str, value: usize) -> Result<Embedding> {
        let f = self.facet_of(facet)?;
        EmbeddingVector::normalize_f64(&self.world.raw_query(f, value)?)
    }
}

impl EmbedderProvider for SyntheticProvider {
    fn provider_id(&self) -> String {
        format!("synthetic(seed={})", self.world.config.seed)
    }

    fn dim(&self) -> usize {
        self.world.dim()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities::ALL
    }

    fn embed_image_general(&self, image: &ItemId) -> Result<Embedding> {
        EmbeddingVector::normalize_f64(&self.world.raw_image(image.as_str(), None)?)
    }

    fn embed_image_prompted(&self, image: &ItemId, prompt: &PromptSpec) -> Result<Embedding> {
        let f = self.facet_of(&prompt.facet)?;
        EmbeddingVector::normalize_f64(&self.world.raw_image(image.as_str(), Some(f))?)
    }

    fn embed_query(&self, query: &QueryRequest<'_>) -> Result<Embedding> {
        let f = self.facet_of(query.facet)?;
        let value = match query.value {
            Some(v) => v,
            None => match self.world.resolve_query(query.text) {
                Some((qf, v)) if qf == f => v,
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "query text is not a `{}` query of this world: {:?}",
                        query.facet, query.text
                    )))
                }
            },
        };
        self.embed_query_value(query.facet, value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark::FacetKind;
    use crate::prompts::DEFAULT_WRAPPER;

    fn spec(name: &str, values: usize) -> FacetSpec {
        FacetSpec {
            facet: Facet { name: name.into(), kind: FacetKind::Categorical, ordinal_margin: 0 },
            values: (0..values).map(|v| format!("{name}{v}")).collect(),
            template: format!("Find me an everyday image with {name} {{value}}."),
        }
    }

    fn two_facet_world(eps: f64, boost: f64, saliences: [f64; 2], values: [usize; 2]) -> SyntheticProvider {
        let config = SyntheticWorldConfig {
            n_facets: 2,
            values_per_facet: 5,
            n_images: 1,
            noise_scale: eps,
            prompt_boost: boost,
            dominant_fraction: 0.5,
            ..Default::default()
        };
        let img = SyntheticImage { id: ItemId::new("img").unwrap(), assignment: values.to_vec(), salience: saliences.to_vec() };
        SyntheticProvider::new(SyntheticWorld::from_parts(config, vec![spec("a", 5), spec("b", 5)], vec![img]).unwrap())
    }

    fn prompt(facet: &str) -> PromptSpec {
        PromptSpec::new(format!("p-{facet}"), facet, "What is it?", DEFAULT_WRAPPER).unwrap()
    }

    fn assert_close(got: &Embedding, want: &[f64]) {
        for (g, w) in got.as_slice().iter().zip(want) {
            assert!((*g as f64 - w).abs() < 1e-7, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn general_two_facet_formula() {
        let p = two_facet_world(0.0, 8.0, [1.0, 0.1], [2, 4]);
        let a = p.embed_image_general(&ItemId::new("img").unwrap()).unwrap();
        let n = (1.0f64 + 0.01).sqrt();
        let mut want = vec![0.0; 10];
        want[2] = 1.0 / n;
        want[5 + 4] = 0.1 / n;
        assert_close(&a, &want);
    }

    #[test]
    fn prompted_boosts_low_salience_facet() {
        // other facet 1.0, prompted facet 0.1 * 8 = 0.8
        let p = two_facet_world(0.0, 8.0, [1.0, 0.1], [2, 4]);
        let b = p.embed_image_prompted(&ItemId::new("img").unwrap(), &prompt("b")).unwrap();
        let n = (1.0f64 + 0.64).sqrt();
        let mut want = vec![0.0; 10];
        want[2] = 1.0 / n;
        want[9] = 0.8 / n;
        assert_close(&b, &want);
    }

    #[test]
    fn unit_boost_equals_general() {
        let p = two_facet_world(0.05, 1.0, [1.0, 0.1], [0, 3]);
        let id = ItemId::new("img").unwrap();
        assert_eq!(p.embed_image_prompted(&id, &prompt("a")).unwrap(), p.embed_image_general(&id).unwrap());
    }

    #[test]
    fn unknown_facet_and_image() {
        let p = two_facet_world(0.0, 8.0, [1.0, 0.1], [0, 3]);
        let id = ItemId::new("img").unwrap();
        assert!(matches!(p.embed_image_prompted(&id, &prompt("zzz")), Err(Error::UnknownFacet(_))));
        assert!(matches!(p.embed_image_general(&ItemId::new("nope").unwrap()), Err(Error::UnknownImage(_))));
        assert!(matches!(p.embed_query_value("zzz", 0), Err(Error::UnknownFacet(_))));
    }

    #[test]
    fn query_formula() {
        let p = two_facet_world(0.0, 8.0, [1.0, 0.1], [0, 3]);
        let q = p.embed_query_value("b", 1).unwrap();
        // e(b,1) + 0.6 * u_b
        let n = (1.6f64 * 1.6 + 4.0 * 0.36).sqrt();
        let mut want = vec![0.0; 10];
        for v in 0..5 {
            want[5 + v] = 0.6 / n;
        }
        want[6] = 1.6 / n;
        assert_close(&q, &want);
    }

    #[test]
    fn query_without_blend_is_one_hot() {
        let mut p = two_facet_world(0.0, 8.0, [1.0, 0.1], [0, 3]);
        p.world.config.query_blend = 0.0;
        let q = p.embed_query_value("a", 4).unwrap();
        let mut want = vec![0.0; 10];
        want[4] = 1.0;
        assert_close(&q, &want);
    }

    #[test]
    fn query_resolved_from_text() {
        let p = two_facet_world(0.0, 8.0, [1.0, 0.1], [0, 3]);
        let case = ItemId::new("c").unwrap();
        let text = p.world.facets()[1].query_text(2);
        let q = p.embed_query(&QueryRequest { case_id: &case, text: &text, facet: "b", value: None }).unwrap();
        assert_eq!(q, p.embed_query_value("b", 2).unwrap());
        let bad = QueryRequest { case_id: &case, text: "unrelated", facet: "b", value: None };
        assert!(p.embed_query(&bad).is_err());
    }

    #[test]
    fn noise_is_deterministic_and_shared() {
        let p = two_facet_world(0.3, 8.0, [1.0, 0.1], [0, 3]);
        let id = ItemId::new("img").unwrap();
        assert_eq!(p.embed_image_general(&id).unwrap(), p.embed_image_general(&id).unwrap());
        let raw_a = p.world.raw_image("img", None).unwrap();
        let raw_b = p.world.raw_image("img", Some(0)).unwrap();
        // only the boosted one-hot entry differs
        let diffs: Vec<usize> = (0..10).filter(|&i| raw_a[i] != raw_b[i]).collect();
        assert_eq!(diffs, vec![0]);
    }

    #[test]
    fn config_validation() {
        assert!(SyntheticWorldConfig::default().validate().is_ok());
        let mut c = SyntheticWorldConfig { n_facets: 1, ..Default::default() };
        assert!(c.validate().is_err());
        c = SyntheticWorldConfig { salience_low: 2.0, ..Default::default() };
        assert!(c.validate().is_err());
        c = SyntheticWorldConfig { prompt_boost: 0.5, ..Default::default() };
        assert!(c.validate().is_err());
        c = SyntheticWorldConfig { dominant_fraction: 0.0, ..Default::default() };
        assert!(c.validate().is_err());
        assert_eq!(SyntheticWorldConfig::default().dominant_per_image(), 2);
        assert_eq!(SyntheticWorldConfig::default().dim(), 40);
    }
}
