//! Synthetic worlds and benchmarks with known ground truth.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::benchmark::{BenchmarkSet, Facet, FacetKind, TestCase, DEFAULT_NEGATIVES};
use crate::error::{Error, Result};
use crate::prompts::{PromptRegistry, PromptSpec, DEFAULT_WRAPPER};
use crate::providers::{FacetSpec, SyntheticImage, SyntheticWorld, SyntheticWorldConfig};
use crate::store::ItemId;

struct CatalogEntry {
    name: &'static str,
    ordinal_margin: Option<u32>,
    template: &'static str,
    values: [&'static str; 8],
    hard: bool,
}

const CATALOG: [CatalogEntry; 8] = [
    CatalogEntry {
        name: "animals",
        ordinal_margin: None,
        template: "Find me an everyday image in which animals such as {value} can be seen.",
        values: ["dog", "cat", "horse", "bird", "elephant", "giraffe", "zebra", "sheep"],
        hard: false,
    },
    CatalogEntry {
        name: "scenes",
        ordinal_margin: None,
        template: "Find me an everyday image that shows the scene of the {value}, a type of location.",
        values: ["beach", "kitchen", "street", "forest", "conference room", "stadium", "farm", "airport"],
        hard: false,
    },
    CatalogEntry {
        name: "objects",
        ordinal_margin: None,
        template: "Find me an everyday image with a {value} present among the objects.",
        values: ["laptop", "bicycle", "umbrella", "clock", "vase", "bench", "kite", "suitcase"],
        hard: false,
    },
    CatalogEntry {
        name: "count_of_people",
        ordinal_margin: Some(3),
        template: "Find me an everyday image with {value} people.",
        values: ["0", "1", "2", "3", "4", "5", "6", "7"],
        hard: true,
    },
    CatalogEntry {
        name: "materials",
        ordinal_margin: None,
        template: "Find me an everyday image showing some object or surface made of {value}.",
        values: ["wood", "stone", "brick", "metal", "glass", "fabric", "plastic", "paper"],
        hard: true,
    },
    CatalogEntry {
        name: "times",
        ordinal_margin: None,
        template: "Find me an everyday image taken at the {value} time of day.",
        values: ["morning", "noon", "afternoon", "evening", "night", "dawn", "dusk", "midnight"],
        hard: true,
    },
    CatalogEntry {
        name: "weathers",
        ordinal_margin: None,
        template: "Find me an everyday image where the weather is {value}.",
        values: ["sunny", "rainy", "snowy", "foggy", "cloudy", "stormy", "windy", "overcast"],
        hard: true,
    },
    CatalogEntry {
        name: "gestures",
        ordinal_margin: None,
        template: "Find me an everyday image where the people are making a {value} gesture.",
        values: ["standing", "jumping", "sitting", "waving", "running", "walking", "kneeling", "pointing"],
        hard: true,
    },
];

/// Value pairs that may not serve as each other's negatives.
const DEFAULT_CONFUSABLE: [(&str, &str, &str); 4] = [
    ("times", "evening", "night"),
    ("times", "evening", "dusk"),
    ("weathers", "cloudy", "overcast"),
    ("gestures", "standing", "walking"),
];

/// Facet specs for a world of the given shape: the built-in catalog first, then generic facets.
pub fn default_facet_specs(n_facets: usize, values_per_facet: usize) -> Vec<FacetSpec> {
    (0..n_facets)
        .map(|f| match CATALOG.get(f).filter(|_| values_per_facet <= 8) {
            Some(c) => FacetSpec {
                facet: match c.ordinal_margin {
                    Some(m) => Facet::ordinal(c.name, m),
                    None => Facet::categorical(c.name),
                },
                values: c.values[..values_per_facet].iter().map(|v| v.to_string()).collect(),
                template: c.template.to_string(),
            },
            None => {
                let name = format!("facet_{f:02}");
                FacetSpec {
                    template: format!("Find me an everyday image where {name} is {{value}}."),
                    values: (0..values_per_facet).map(|v| format!("{name}_v{v}")).collect(),
                    facet: Facet::categorical(name),
                }
            }
        })
        .collect()
}

/// Prompt registry covering every facet of `world`: built-in questions where known, a generic one otherwise.
pub fn registry_for_world(world: &SyntheticWorld) -> Result<PromptRegistry> {
    let builtin = PromptRegistry::gpt_default();
    let prompts = world
        .facets()
        .iter()
        .map(|spec| match builtin.for_facet(&spec.facet.name) {
            Some(p) => Ok(p.clone()),
            None => {
                let name = &spec.facet.name;
                PromptSpec::new(format!("gen-{name}"), name.clone(), format!("What is the {name} in this image?"), DEFAULT_WRAPPER)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    PromptRegistry::new(prompts, DEFAULT_WRAPPER)
}

/// Builds a world from `config`; the result depends only on `config` (including its seed).
pub fn generate_world(config: &SyntheticWorldConfig) -> Result<SyntheticWorld> {
    config.validate()?;
    let facets = default_facet_specs(config.n_facets, config.values_per_facet);
    let dominant = config.dominant_per_image();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let width = (config.n_images.max(2) - 1).to_string().len().max(5);
    let images = (0..config.n_images)
        .map(|i| {
            let assignment: Vec<usize> = (0..config.n_facets).map(|_| rng.random_range(0..config.values_per_facet)).collect();
            let mut salience = vec![config.salience_low; config.n_facets];
            for f in index::sample(&mut rng, config.n_facets, dominant) {
                salience[f] = config.salience_high;
            }
            Ok(SyntheticImage { id: ItemId::new(format!("img-{i:0width$}"))?, assignment, salience })
        })
        .collect::<Result<Vec<_>>>()?;
    SyntheticWorld::from_parts(config.clone(), facets, images)
}

/// Which salience level a positive must show its target facet at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SaliencePick {
    #[default]
    Any,
    Low,
    High,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Cases for facets not listed in `cases_per_facet`.
    pub cases_default: usize,
    pub cases_per_facet: BTreeMap<String, usize>,
    pub negatives_per_case: usize,
    /// Per facet, value pairs that must not be used as each other's negatives.
    pub confusable: BTreeMap<String, Vec<(String, String)>>,
    /// Per facet; facets not listed use `Any`.
    pub positive_salience: BTreeMap<String, SaliencePick>,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let mut confusable: BTreeMap<String, Vec<(String, String)>> = BTreeMap::new();
        for (facet, a, b) in DEFAULT_CONFUSABLE {
            confusable.entry(facet.into()).or_default().push((a.into(), b.into()));
        }
        let positive_salience = CATALOG
            .iter()
            .map(|c| (c.name.to_string(), if c.hard { SaliencePick::Low } else { SaliencePick::High }))
            .collect();
        Self {
            cases_default: 200,
            cases_per_facet: BTreeMap::new(),
            negatives_per_case: DEFAULT_NEGATIVES,
            confusable,
            positive_salience,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn cases_for(&self, facet: &str) -> usize {
        self.cases_per_facet.get(facet).copied().unwrap_or(self.cases_default)
    }

    pub fn validate(&self) -> Result<()> {
        if self.negatives_per_case == 0 {
            return Err(Error::ConfigInvalid("negatives_per_case must be positive".into()));
        }
        Ok(())
    }
}

/// Facets of `world` classified as hard under `config` (positives drawn at low salience).
pub fn hard_facets(world: &SyntheticWorld, config: &GeneratorConfig) -> Vec<String> {
    world
        .facets()
        .iter()
        .filter(|f| config.positive_salience.get(&f.facet.name) == Some(&SaliencePick::Low))
        .map(|f| f.facet.name.clone())
        .collect()
}

fn negative_allowed(spec: &FacetSpec, banned: &[(usize, usize)], pos: usize, cand: usize) -> bool {
    match spec.facet.kind {
        FacetKind::Ordinal => pos.abs_diff(cand) >= spec.facet.ordinal_margin as usize,
        FacetKind::Categorical => {
            pos != cand && !banned.iter().any(|&(a, b)| (a, b) == (pos, cand) || (b, a) == (pos, cand))
        }
    }
}

/// Draws test cases over `world`. Values with no admissible negative value are skipped;
/// a value whose admissible images are too few is an error.
pub fn generate_benchmark(world: &SyntheticWorld, config: &GeneratorConfig) -> Result<BenchmarkSet> {
    config.validate()?;
    if let Some(name) = config.cases_per_facet.keys().find(|n| world.facet_index(n).is_none()) {
        return Err(Error::UnknownFacet(name.clone()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let high = world.config().salience_high;
    let images = world.images();
    let mut cases = Vec::new();
    for (fi, spec) in world.facets().iter().enumerate() {
        let n_cases = config.cases_for(&spec.facet.name);
        if n_cases == 0 {
            continue;
        }
        let mut banned = Vec::new();
        for (a, b) in config.confusable.get(&spec.facet.name).into_iter().flatten() {
            let find = |v: &str| {
                spec.values.iter().position(|x| x == v).ok_or_else(|| {
                    Error::ConfigInvalid(format!("confusable value `{v}` is not a value of `{}`", spec.facet.name))
                })
            };
            match (find(a), find(b)) {
                (Ok(a), Ok(b)) => banned.push((a, b)),
                // pairs may name values truncated away by a small values_per_facet
                _ => log::debug!("skipping confusable pair ({a}, {b}) on {}", spec.facet.name),
            }
        }
        let pick = config.positive_salience.get(&spec.facet.name).copied().unwrap_or_default();
        let n_values = spec.values.len();
        let mut positives: Vec<Vec<usize>> = vec![Vec::new(); n_values];
        for (i, img) in images.iter().enumerate() {
            let is_high = img.salience[fi] == high;
            let ok = match pick {
                SaliencePick::Any => true,
                SaliencePick::High => is_high,
                SaliencePick::Low => !is_high,
            };
            if ok {
                positives[img.assignment[fi]].push(i);
            }
        }
        let feasible: Vec<usize> = (0..n_values)
            .filter(|&v| !positives[v].is_empty() && (0..n_values).any(|c| negative_allowed(spec, &banned, v, c)))
            .collect();
        if feasible.is_empty() {
            return Err(Error::InsufficientNegatives {
                facet: spec.facet.name.clone(),
                value: "*".into(),
                needed: config.negatives_per_case,
                available: 0,
            });
        }
        let eligible: Vec<Vec<usize>> = (0..n_values)
            .map(|v| {
                (0..images.len())
                    .filter(|&i| negative_allowed(spec, &banned, v, images[i].assignment[fi]))
                    .collect()
            })
            .collect();
        for n in 0..n_cases {
            let value = feasible[rng.random_range(0..feasible.len())];
            let pos = positives[value][rng.random_range(0..positives[value].len())];
            let pool = &eligible[value];
            if pool.len() < config.negatives_per_case {
                return Err(Error::InsufficientNegatives {
                    facet: spec.facet.name.clone(),
                    value: spec.values[value].clone(),
                    needed: config.negatives_per_case,
                    available: pool.len(),
                });
            }
            let negatives = index::sample(&mut rng, pool.len(), config.negatives_per_case)
                .into_iter()
                .map(|j| images[pool[j]].id.clone())
                .collect();
            cases.push(TestCase {
                case_id: ItemId::new(format!("{}-{n:04}", spec.facet.name))?,
                facet: spec.facet.name.clone(),
                query_text: spec.query_text(value),
                positive: images[pos].id.clone(),
                negatives,
            });
        }
    }
    let facets = world.facets().iter().map(|s| s.facet.clone()).collect();
    BenchmarkSet::new(facets, cases, config.negatives_per_case)
}
