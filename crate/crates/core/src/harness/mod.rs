//! End-to-end evaluation for the four retrieval modes, with cost accounting.

mod cost;

pub use cost::{cost_report, write_cost_csv, CostLedger, CostRow, CounterSnapshot, Phase, UnitCosts};

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approx::{fit_linear_map, sample_pairs_from_store, transform_query, LinearMap};
use crate::benchmark::{BenchmarkSet, EvalRecord, TestCase};
use crate::error::{Error, Result};
use crate::prompts::{select_prompt, PromptRegistry, PromptSpec, SelectionOutcome, Selector};
use crate::providers::{Capabilities, EmbedderProvider, QueryRequest, GENERAL_TAG};
use crate::search::{rank_from_scores, rank_of};
use crate::store::{EmbeddingStore, ItemId};
use crate::Embedding;
use cost::Counter;

/// Default number of selector requests in flight.
pub const DEFAULT_SELECTOR_CONCURRENCY: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Baseline,
    PromptedGt,
    PreprocessedSelected,
    LinearApprox,
}

impl EvalMode {
    pub const ALL: [EvalMode; 4] =
        [EvalMode::Baseline, EvalMode::PromptedGt, EvalMode::PreprocessedSelected, EvalMode::LinearApprox];

    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Baseline => "baseline",
            EvalMode::PromptedGt => "prompted_gt",
            EvalMode::PreprocessedSelected => "preprocessed_selected",
            EvalMode::LinearApprox => "linear_approx",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    /// Accepts the canonical names and the short CLI spellings.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(EvalMode::Baseline),
            "prompted" | "prompted_gt" => Ok(EvalMode::PromptedGt),
            "selected" | "preprocessed_selected" => Ok(EvalMode::PreprocessedSelected),
            "approx" | "linear_approx" => Ok(EvalMode::LinearApprox),
            other => Err(Error::InvalidArgument(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    /// Evaluate cases (and build stores) on the rayon pool.
    pub parallel: bool,
    /// Selector requests in flight for external selectors.
    pub selector_concurrency: usize,
    pub units: UnitCosts,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { parallel: true, selector_concurrency: DEFAULT_SELECTOR_CONCURRENCY, units: UnitCosts::default() }
    }
}

impl EvalOptions {
    pub fn serial() -> Self {
        Self { parallel: false, ..Self::default() }
    }
}

#[derive(Debug)]
pub struct RunOutput {
    pub mode: EvalMode,
    pub records: Vec<EvalRecord>,
    pub ledger: CostLedger,
    /// Per facet, share of queries whose selected prompt is the facet's own; selected mode only.
    pub selection_accuracy: Option<BTreeMap<String, f64>>,
}

/// Provider wrapper that charges every call to a ledger phase.
pub struct Metered<'a, P: ?Sized> {
    inner: &'a P,
    ledger: &'a CostLedger,
    phase: Phase,
}

impl<'a, P: EmbedderProvider + ?Sized> Metered<'a, P> {
    pub fn new(inner: &'a P, ledger: &'a CostLedger, phase: Phase) -> Self {
        Self { inner, ledger, phase }
    }
}

impl<P: EmbedderProvider + ?Sized> EmbedderProvider for Metered<'_, P> {
    fn provider_id(&self) -> String {
        self.inner.provider_id()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }

    fn embed_image_general(&self, image: &ItemId) -> Result<Embedding> {
        self.ledger.bump(self.phase, Counter::Image);
        self.inner.embed_image_general(image)
    }

    fn embed_image_prompted(&self, image: &ItemId, prompt: &PromptSpec) -> Result<Embedding> {
        self.ledger.bump(self.phase, Counter::Prompted);
        self.inner.embed_image_prompted(image, prompt)
    }

    fn embed_query(&self, query: &QueryRequest<'_>) -> Result<Embedding> {
        self.ledger.bump(self.phase, Counter::Text);
        self.inner.embed_query(query)
    }
}

fn par_map<T, U, F>(items: &[T], parallel: bool, f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync + Send,
{
    if parallel {
        items.par_iter().map(f).collect()
    } else {
        items.iter().map(f).collect()
    }
}

/// Embeds `ids` with `embed` into a store; insertion order follows `ids` either way.
pub fn build_store<F>(ids: &[ItemId], dim: usize, tag: &str, parallel: bool, embed: F) -> Result<EmbeddingStore>
where
    F: Fn(&ItemId) -> Result<Embedding> + Sync + Send,
{
    let rows = par_map(ids, parallel, &embed)?;
    let mut store = EmbeddingStore::new(dim, tag)?;
    for (id, row) in ids.iter().zip(&rows) {
        store.push(id.clone(), row)?;
    }
    Ok(store)
}

pub fn build_general_store<P: EmbedderProvider + ?Sized>(provider: &P, ids: &[ItemId], parallel: bool) -> Result<EmbeddingStore> {
    if !provider.capabilities().image_general {
        return Err(Error::Unsupported("general image embeddings"));
    }
    build_store(ids, provider.dim(), GENERAL_TAG, parallel, |id| provider.embed_image_general(id))
}

/// Store tagged with the prompt id.
pub fn build_prompted_store<P: EmbedderProvider + ?Sized>(
    provider: &P,
    ids: &[ItemId],
    prompt: &PromptSpec,
    parallel: bool,
) -> Result<EmbeddingStore> {
    if !provider.capabilities().image_prompted {
        return Err(Error::Unsupported("prompted image embeddings"));
    }
    build_store(ids, provider.dim(), &prompt.prompt_id, parallel, |id| provider.embed_image_prompted(id, prompt))
}

fn query_request(case: &TestCase) -> QueryRequest<'_> {
    QueryRequest { case_id: &case.case_id, text: &case.query_text, facet: &case.facet, value: None }
}

fn require(provider: &(impl EmbedderProvider + ?Sized), prompted: bool) -> Result<()> {
    let caps = provider.capabilities();
    if !caps.text_query {
        return Err(Error::Unsupported("text query embeddings"));
    }
    if !caps.image_general && !prompted {
        return Err(Error::Unsupported("general image embeddings"));
    }
    if prompted && !caps.image_prompted {
        return Err(Error::Unsupported("prompted image embeddings"));
    }
    Ok(())
}

fn record(case: &TestCase, store: &EmbeddingStore, q: &crate::vector::EmbeddingVector<impl crate::Scalar>, mode: EvalMode) -> Result<EvalRecord> {
    let r = rank_of(store, &case.candidates(), q, &case.positive)?;
    EvalRecord::new(case.case_id.clone(), r.rank, r.pool_size, mode.as_str())
}

/// General store once, one query embedding per case.
pub fn run_baseline<P: EmbedderProvider + ?Sized>(benchmark: &BenchmarkSet, provider: &P, opts: &EvalOptions) -> Result<RunOutput> {
    require(provider, false)?;
    let ids = benchmark.image_ids();
    let ledger = CostLedger::new(EvalMode::Baseline, ids.len(), benchmark.cases.len(), opts.units);
    let general = build_general_store(&Metered::new(provider, &ledger, Phase::Preprocess), &ids, opts.parallel)?;
    let metered = Metered::new(provider, &ledger, Phase::Query);
    let records = par_map(&benchmark.cases, opts.parallel, |case| {
        let q = metered.embed_query(&query_request(case))?;
        record(case, &general, &q, EvalMode::Baseline)
    })?;
    Ok(RunOutput { mode: EvalMode::Baseline, records, ledger, selection_accuracy: None })
}

fn facet_prompts<'r>(benchmark: &BenchmarkSet, registry: &'r PromptRegistry) -> Result<Vec<(String, &'r PromptSpec)>> {
    benchmark
        .facets
        .iter()
        .filter(|f| benchmark.cases_for(&f.name).next().is_some())
        .map(|f| {
            registry.for_facet(&f.name).map(|p| (f.name.clone(), p)).ok_or_else(|| Error::MissingPrompt(f.name.clone()))
        })
        .collect()
}

/// One prompted store per facet, built with the facet's own prompt over the facet's images.
pub fn run_prompted_gt<P: EmbedderProvider + ?Sized>(
    benchmark: &BenchmarkSet,
    provider: &P,
    registry: &PromptRegistry,
    opts: &EvalOptions,
) -> Result<RunOutput> {
    require(provider, true)?;
    let prompts = facet_prompts(benchmark, registry)?;
    let mut ledger = CostLedger::new(EvalMode::PromptedGt, benchmark.image_ids().len(), benchmark.cases.len(), opts.units);
    ledger.n_prompts = prompts.len() as u64;
    let mut stores = HashMap::new();
    {
        let pre = Metered::new(provider, &ledger, Phase::Preprocess);
        for (facet, prompt) in &prompts {
            let store = build_prompted_store(&pre, &benchmark.facet_pool(facet), prompt, opts.parallel)?;
            stores.insert(facet.clone(), store);
        }
    }
    let metered = Metered::new(provider, &ledger, Phase::Query);
    let records = par_map(&benchmark.cases, opts.parallel, |case| {
        let q = metered.embed_query(&query_request(case))?;
        record(case, &stores[&case.facet], &q, EvalMode::PromptedGt)
    })?;
    Ok(RunOutput { mode: EvalMode::PromptedGt, records, ledger, selection_accuracy: None })
}

/// Picks one prompt per case with `selector`; external selectors run with bounded concurrency.
pub fn select_for_cases(
    cases: &[TestCase],
    registry: &PromptRegistry,
    selector: &Selector<'_>,
    opts: &EvalOptions,
) -> Result<Vec<SelectionOutcome>> {
    let select = |case: &TestCase| select_prompt(&case.query_text, registry, selector);
    match selector {
        Selector::External { .. } if opts.parallel => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(opts.selector_concurrency.max(1))
                .build()
                .map_err(|e| Error::InvalidArgument(format!("cannot start selector pool: {e}")))?;
            pool.install(|| cases.par_iter().map(select).collect())
        }
        _ => par_map(cases, opts.parallel, select),
    }
}

/// Every registry prompt is applied to every image up front; each query picks one store.
pub fn run_preprocessed_selected<P: EmbedderProvider + ?Sized>(
    benchmark: &BenchmarkSet,
    provider: &P,
    registry: &PromptRegistry,
    selector: &Selector<'_>,
    opts: &EvalOptions,
) -> Result<RunOutput> {
    require(provider, true)?;
    if registry.is_empty() {
        return Err(Error::EmptyInput("prompt registry is empty"));
    }
    let ids = benchmark.image_ids();
    let mut ledger = CostLedger::new(EvalMode::PreprocessedSelected, ids.len(), benchmark.cases.len(), opts.units);
    ledger.n_prompts = registry.len() as u64;
    let mut stores = HashMap::new();
    {
        let pre = Metered::new(provider, &ledger, Phase::Preprocess);
        for prompt in registry.prompts() {
            stores.insert(prompt.prompt_id.clone(), build_prompted_store(&pre, &ids, prompt, opts.parallel)?);
        }
    }
    let selections = select_for_cases(&benchmark.cases, registry, selector, opts)?;
    for _ in &selections {
        ledger.bump(Phase::Query, Counter::Selector);
    }
    let metered = Metered::new(provider, &ledger, Phase::Query);
    let jobs: Vec<(&TestCase, &SelectionOutcome)> = benchmark.cases.iter().zip(&selections).collect();
    let records = par_map(&jobs, opts.parallel, |(case, sel)| {
        let q = metered.embed_query(&query_request(case))?;
        record(case, &stores[&sel.chosen], &q, EvalMode::PreprocessedSelected)
    })?;
    let mut hits: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (case, sel) in &jobs {
        let truth = registry.for_facet(&case.facet).map(|p| p.prompt_id.as_str());
        let e = hits.entry(case.facet.clone()).or_default();
        e.1 += 1;
        if truth == Some(sel.chosen.as_str()) {
            e.0 += 1;
        }
    }
    let accuracy = hits.into_iter().map(|(f, (h, n))| (f, h as f64 / n as f64)).collect();
    Ok(RunOutput { mode: EvalMode::PreprocessedSelected, records, ledger, selection_accuracy: Some(accuracy) })
}

/// Fits one map per facet from `k` sampled pool images and ranks transformed queries in the general store.
pub fn run_linear_approx<P: EmbedderProvider + ?Sized>(
    benchmark: &BenchmarkSet,
    provider: &P,
    registry: &PromptRegistry,
    k: usize,
    seed: u64,
    opts: &EvalOptions,
) -> Result<RunOutput> {
    require(provider, true)?;
    if !provider.capabilities().image_general {
        return Err(Error::Unsupported("general image embeddings"));
    }
    let prompts = facet_prompts(benchmark, registry)?;
    let ids = benchmark.image_ids();
    let mut ledger = CostLedger::new(EvalMode::LinearApprox, ids.len(), benchmark.cases.len(), opts.units);
    ledger.k_sample = k as u64;
    let general = build_general_store(&Metered::new(provider, &ledger, Phase::Preprocess), &ids, opts.parallel)?;
    let metered = Metered::new(provider, &ledger, Phase::Query);
    let mut maps: HashMap<String, LinearMap<f64>> = HashMap::new();
    for (facet, prompt) in &prompts {
        let pairs = sample_pairs_from_store::<f64, _>(&general, &metered, &benchmark.facet_pool(facet), prompt, k, seed)?;
        maps.insert(facet.clone(), fit_linear_map(&pairs));
        ledger.record_fit();
    }
    let records = par_map(&benchmark.cases, opts.parallel, |case| {
        let q = metered.embed_query(&query_request(case))?;
        let t = transform_query(&maps[&case.facet], &q)?;
        record(case, &general, &t, EvalMode::LinearApprox)
    })?;
    Ok(RunOutput { mode: EvalMode::LinearApprox, records, ledger, selection_accuracy: None })
}

/// Ranks each positive under uniform random scores; a chance-level reference.
pub fn run_random_scorer(benchmark: &BenchmarkSet, seed: u64) -> Result<Vec<EvalRecord>> {
    benchmark
        .cases
        .iter()
        .enumerate()
        .map(|(i, case)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let cands = case.candidates();
            let scores: Vec<f64> = cands.iter().map(|_| rng.random::<f64>()).collect();
            let r = rank_from_scores(cands.iter().map(|c| c.as_str()).zip(scores.iter().copied()), case.positive.as_str(), scores[0]);
            EvalRecord::new(case.case_id.clone(), r.rank, r.pool_size, "random")
        })
        .collect()
}

/// What is needed to rerun an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub mode: EvalMode,
    pub benchmark: Option<PathBuf>,
    pub provider: String,
    pub registry: Option<PathBuf>,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub k_sample: Option<usize>,
    pub ks: Vec<usize>,
    pub parallel: bool,
    pub units: UnitCosts,
    pub outputs: Vec<PathBuf>,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub crate_version: String,
}

impl RunManifest {
    pub fn new(mode: EvalMode, provider: impl Into<String>) -> Self {
        let timestamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or_default();
        Self {
            mode,
            benchmark: None,
            provider: provider.into(),
            registry: None,
            seed: 0,
            seeds: Vec::new(),
            k_sample: None,
            ks: Vec::new(),
            parallel: true,
            units: UnitCosts::default(),
            outputs: Vec::new(),
            timestamp,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}
