//! Test-time linear approximation of a promptable embedder.
//!
//! From K sampled images we take general embeddings `a_i` and prompted
//! embeddings `b_i`, fit `W = sum_i b_i a_i^T`, and move `W` to the query side:
//! `(W a) . q = a . (W^T q)`, so ranking the untouched general store with
//! `normalize(W^T q)` approximates ranking a prompted store with `q`.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchmark::{csv_err, recall_at_k, BenchmarkSet, EvalRecord};
use crate::error::{Error, Result};
use crate::prompts::{PromptRegistry, PromptSpec};
use crate::providers::{EmbedderProvider, QueryRequest};
use crate::scalar::{l2_norm, Scalar};
use crate::search::rank_of;
use crate::store::{EmbeddingStore, ItemId};
use crate::vector::{EmbeddingVector, UNIT_TOLERANCE};

/// Ridge term for the least-squares ablation fitter.
pub const LSQ_RIDGE: f64 = 1e-6;

/// Paired general/prompted embeddings of the same K images.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePairs<T: Scalar = f64> {
    general: Vec<EmbeddingVector<T>>,
    prompted: Vec<EmbeddingVector<T>>,
    image_ids: Vec<ItemId>,
    prompt_id: String,
    seed: u64,
}

impl<T: Scalar> SamplePairs<T> {
    pub fn new(
        general: Vec<EmbeddingVector<T>>,
        prompted: Vec<EmbeddingVector<T>>,
        image_ids: Vec<ItemId>,
        prompt_id: impl Into<String>,
        seed: u64,
    ) -> Result<Self> {
        if general.is_empty() {
            return Err(Error::EmptyPool);
        }
        if general.len() != prompted.len() || general.len() != image_ids.len() {
            return Err(Error::InvalidArgument(format!(
                "column counts differ: {} general, {} prompted, {} ids",
                general.len(),
                prompted.len(),
                image_ids.len()
            )));
        }
        let dim = general[0].dim();
        if let Some(bad) = general.iter().chain(&prompted).find(|v| v.dim() != dim) {
            return Err(Error::DimMismatch { expected: dim, actual: bad.dim() });
        }
        Ok(Self { general, prompted, image_ids, prompt_id: prompt_id.into(), seed })
    }

    /// Builds pairs from raw columns, rejecting any column that is not unit norm.
    pub fn from_columns(
        general: Vec<Vec<T>>,
        prompted: Vec<Vec<T>>,
        image_ids: Vec<ItemId>,
        prompt_id: impl Into<String>,
        seed: u64,
    ) -> Result<Self> {
        let wrap = |cols: Vec<Vec<T>>, which: &str| -> Result<Vec<EmbeddingVector<T>>> {
            cols.into_iter()
                .enumerate()
                .map(|(i, c)| {
                    EmbeddingVector::from_unit(c, UNIT_TOLERANCE).map_err(|e| match e {
                        Error::Norm { norm, tolerance, .. } => {
                            Error::Norm { id: format!("{which} column {i}"), norm, tolerance }
                        }
                        other => other,
                    })
                })
                .collect()
        };
        Self::new(wrap(general, "general")?, wrap(prompted, "prompted")?, image_ids, prompt_id, seed)
    }

    pub fn len(&self) -> usize {
        self.general.len()
    }

    pub fn is_empty(&self) -> bool {
        self.general.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.general[0].dim()
    }

    pub fn general(&self) -> &[EmbeddingVector<T>] {
        &self.general
    }

    pub fn prompted(&self) -> &[EmbeddingVector<T>] {
        &self.prompted
    }

    pub fn image_ids(&self) -> &[ItemId] {
        &self.image_ids
    }

    pub fn prompt_id(&self) -> &str {
        &self.prompt_id
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Draws `k` distinct pool members uniformly, clamping `k` to the pool size.
pub fn draw_sample(pool: &[ItemId], k: usize, seed: u64) -> Result<Vec<ItemId>> {
    if k == 0 {
        return Err(Error::InvalidArgument("sample size K must be at least 1".into()));
    }
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let take = if k > pool.len() {
        log::warn!("sample size {k} exceeds pool of {}; clamping", pool.len());
        pool.len()
    } else {
        k
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, pool.len(), take).into_iter().map(|i| pool[i].clone()).collect())
}

/// Samples K images and embeds each with and without `prompt`.
pub fn sample_pairs<T: Scalar, P: EmbedderProvider + ?Sized>(
    provider: &P,
    pool: &[ItemId],
    prompt: &PromptSpec,
    k: usize,
    seed: u64,
) -> Result<SamplePairs<T>> {
    let ids = draw_sample(pool, k, seed)?;
    let mut general = Vec::with_capacity(ids.len());
    let mut prompted = Vec::with_capacity(ids.len());
    for id in &ids {
        general.push(provider.embed_image_general(id)?.cast());
        prompted.push(provider.embed_image_prompted(id, prompt)?.cast());
    }
    SamplePairs::new(general, prompted, ids, prompt.prompt_id.clone(), seed)
}

/// Like [`sample_pairs`], but reads general embeddings from a prebuilt store.
pub fn sample_pairs_from_store<T: Scalar, P: EmbedderProvider + ?Sized>(
    general_store: &EmbeddingStore,
    provider: &P,
    pool: &[ItemId],
    prompt: &PromptSpec,
    k: usize,
    seed: u64,
) -> Result<SamplePairs<T>> {
    let ids = draw_sample(pool, k, seed)?;
    let mut general = Vec::with_capacity(ids.len());
    let mut prompted = Vec::with_capacity(ids.len());
    for id in &ids {
        general.push(general_store.get(id.as_str())?.cast());
        prompted.push(provider.embed_image_prompted(id, prompt)?.cast());
    }
    SamplePairs::new(general, prompted, ids, prompt.prompt_id.clone(), seed)
}

/// Square matrix `W`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct LinearMap<T: Scalar = f64> {
    dim: usize,
    entries: Vec<T>,
    k: usize,
    prompt_id: String,
    seed: u64,
}

impl<T: Scalar> LinearMap<T> {
    pub fn from_rows(dim: usize, entries: Vec<T>) -> Result<Self> {
        if dim == 0 || entries.len() != dim * dim {
            return Err(Error::DimMismatch { expected: dim * dim, actual: entries.len() });
        }
        if entries.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("linear map has non-finite entries".into()));
        }
        Ok(Self { dim, entries, k: 0, prompt_id: String::new(), seed: 0 })
    }

    pub fn identity(dim: usize) -> Self {
        let mut entries = vec![T::zero(); dim * dim];
        for i in 0..dim {
            entries[i * dim + i] = T::one();
        }
        Self { dim, entries, k: 0, prompt_id: String::new(), seed: 0 }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of sample pairs the map was fitted from (0 if constructed directly).
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn prompt_id(&self) -> &str {
        &self.prompt_id
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn entries(&self) -> &[T] {
        &self.entries
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.entries[row * self.dim + col]
    }

    pub fn scaled(&self, c: T) -> Self {
        Self { entries: self.entries.iter().map(|&x| x * c).collect(), ..self.clone() }
    }

    /// `W a`, accumulated in `f64`.
    pub fn apply<U: Scalar>(&self, a: &[U]) -> Vec<f64> {
        assert_eq!(a.len(), self.dim, "apply: dim mismatch");
        self.entries.chunks_exact(self.dim).map(|row| crate::scalar::dot(row, a)).collect()
    }

    /// `W^T q`, accumulated in `f64`.
    pub fn apply_transpose<U: Scalar>(&self, q: &[U]) -> Vec<f64> {
        assert_eq!(q.len(), self.dim, "apply_transpose: dim mismatch");
        let mut out = vec![0.0f64; self.dim];
        for (row, &qr) in self.entries.chunks_exact(self.dim).zip(q) {
            let qr = qr.widen();
            for (o, &w) in out.iter_mut().zip(row) {
                *o += w.widen() * qr;
            }
        }
        out
    }
}

/// `W = B A^T`: the sum of outer products `b_i a_i^T`, no rescaling.
pub fn fit_linear_map<T: Scalar>(pairs: &SamplePairs<T>) -> LinearMap<T> {
    let d = pairs.dim();
    let mut acc = vec![0.0f64; d * d];
    for (a, b) in pairs.general.iter().zip(&pairs.prompted) {
        let a = a.as_slice();
        for (r, &br) in b.as_slice().iter().enumerate() {
            let br = br.widen();
            let row = &mut acc[r * d..(r + 1) * d];
            for (w, &ac) in row.iter_mut().zip(a) {
                *w += br * ac.widen();
            }
        }
    }
    LinearMap {
        dim: d,
        entries: acc.into_iter().map(T::narrow).collect(),
        k: pairs.len(),
        prompt_id: pairs.prompt_id.clone(),
        seed: pairs.seed,
    }
}

/// Ridge least squares, `W = B A^T (A A^T + ridge I)^-1`. Used for ablations only.
pub fn fit_linear_map_lsq<T: Scalar>(pairs: &SamplePairs<T>, ridge: f64) -> Result<LinearMap<T>> {
    let d = pairs.dim();
    let k = pairs.len();
    let a = DMatrix::from_fn(d, k, |r, c| pairs.general[c].as_slice()[r].widen());
    let b = DMatrix::from_fn(d, k, |r, c| pairs.prompted[c].as_slice()[r].widen());
    let gram = &a * a.transpose() + DMatrix::identity(d, d) * ridge;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("sample Gram matrix is not positive definite".into()))?;
    // gram is symmetric: W gram = B A^T  <=>  gram W^T = A B^T
    let wt = chol.solve(&(&a * b.transpose()));
    let entries = (0..d).flat_map(|r| (0..d).map(move |c| (r, c))).map(|(r, c)| T::narrow(wt[(c, r)])).collect();
    Ok(LinearMap { dim: d, entries, k, prompt_id: pairs.prompt_id.clone(), seed: pairs.seed })
}

/// `normalize(W^T q)`; a vanishing result is an error.
pub fn transform_query<T: Scalar, U: Scalar>(map: &LinearMap<T>, q: &EmbeddingVector<U>) -> Result<EmbeddingVector<T>> {
    if q.dim() != map.dim {
        return Err(Error::DimMismatch { expected: map.dim, actual: q.dim() });
    }
    EmbeddingVector::normalize_f64(&map.apply_transpose(q.as_slice()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub facet: String,
    pub k_sample: usize,
    pub seed: u64,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAggregate {
    pub facet: String,
    pub k_sample: usize,
    pub n_seeds: usize,
    pub mean_recall_at_1: f64,
    pub stderr_recall_at_1: f64,
    pub mean_recall_at_5: f64,
    pub stderr_recall_at_5: f64,
}

#[derive(Serialize)]
struct AggregateCsvRow<'a> {
    facet: &'a str,
    k_sample: usize,
    seed: &'static str,
    recall_at_1: f64,
    recall_at_5: f64,
}

/// Mean and standard error (sample std / sqrt(n)); stderr is 0 for one run.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// One aggregate per (facet, K), in first-appearance order.
    pub fn aggregate(&self) -> Vec<SweepAggregate> {
        let mut groups: Vec<((&str, usize), Vec<&SweepRow>)> = Vec::new();
        for row in &self.rows {
            let key = (row.facet.as_str(), row.k_sample);
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, v)) => v.push(row),
                None => groups.push((key, vec![row])),
            }
        }
        groups
            .into_iter()
            .map(|((facet, k_sample), rows)| {
                let r1: Vec<f64> = rows.iter().map(|r| r.recall_at_1).collect();
                let r5: Vec<f64> = rows.iter().map(|r| r.recall_at_5).collect();
                let (m1, s1) = mean_stderr(&r1);
                let (m5, s5) = mean_stderr(&r5);
                SweepAggregate {
                    facet: facet.to_string(),
                    k_sample,
                    n_seeds: rows.len(),
                    mean_recall_at_1: m1,
                    stderr_recall_at_1: s1,
                    mean_recall_at_5: m5,
                    stderr_recall_at_5: s5,
                }
            })
            .collect()
    }

    pub fn mean_recall_at_5(&self, facet: &str, k_sample: usize) -> Option<f64> {
        self.aggregate().into_iter().find(|a| a.facet == facet && a.k_sample == k_sample).map(|a| a.mean_recall_at_5)
    }

    /// Columns `facet,k_sample,seed,recall_at_1,recall_at_5`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        for row in &self.rows {
            w.serialize(row).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Same columns; each (facet, K) contributes a `mean` row and a `stderr` row in the seed column.
    pub fn write_aggregate_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        for agg in self.aggregate() {
            for (seed, r1, r5) in [
                ("mean", agg.mean_recall_at_1, agg.mean_recall_at_5),
                ("stderr", agg.stderr_recall_at_1, agg.stderr_recall_at_5),
            ] {
                w.serialize(AggregateCsvRow { facet: &agg.facet, k_sample: agg.k_sample, seed, recall_at_1: r1, recall_at_5: r5 })
                    .map_err(|e| csv_err(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

struct FacetWork<'a> {
    facet: &'a str,
    prompt: &'a PromptSpec,
    pool: Vec<ItemId>,
    cases: Vec<(&'a crate::benchmark::TestCase, EmbeddingVector<f32>)>,
}

/// Recall@1/@5 of linear approximation for every (facet, K, seed) cell.
///
/// Each cell fits a fresh map from the facet's candidate-pool union and ranks
/// transformed queries against the general store.
pub fn k_sweep<P: EmbedderProvider + ?Sized>(
    provider: &P,
    benchmark: &BenchmarkSet,
    registry: &PromptRegistry,
    general: &EmbeddingStore,
    ks: &[usize],
    seeds: &[u64],
    parallel: bool,
) -> Result<SweepTable> {
    if ks.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one K".into()));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one seed".into()));
    }
    if ks.windows(2).any(|w| w[0] >= w[1]) || ks[0] == 0 {
        return Err(Error::InvalidArgument("K values must be positive and strictly ascending".into()));
    }
    let mut work = Vec::new();
    for facet in &benchmark.facets {
        let cases: Vec<_> = benchmark.cases_for(&facet.name).collect();
        if cases.is_empty() {
            continue;
        }
        let prompt = registry.for_facet(&facet.name).ok_or_else(|| Error::MissingPrompt(facet.name.clone()))?;
        let cases = cases
            .into_iter()
            .map(|c| {
                let q = provider.embed_query(&QueryRequest {
                    case_id: &c.case_id,
                    text: &c.query_text,
                    facet: &c.facet,
                    value: None,
                })?;
                Ok((c, q))
            })
            .collect::<Result<Vec<_>>>()?;
        work.push(FacetWork { facet: &facet.name, prompt, pool: benchmark.facet_pool(&facet.name), cases });
    }
    let cells: Vec<(usize, usize, u64)> = (0..work.len())
        .flat_map(|f| ks.iter().flat_map(move |&k| seeds.iter().map(move |&s| (f, k, s))))
        .collect();
    let run_cell = |&(f, k, seed): &(usize, usize, u64)| -> Result<SweepRow> {
        let w = &work[f];
        let pairs = sample_pairs_from_store::<f64, P>(general, provider, &w.pool, w.prompt, k, seed)?;
        let map = fit_linear_map(&pairs);
        let mut records = Vec::with_capacity(w.cases.len());
        for (case, q) in &w.cases {
            let t = transform_query(&map, q)?;
            let r = rank_of(general, &case.candidates(), &t, &case.positive)?;
            records.push(EvalRecord::new(case.case_id.clone(), r.rank, r.pool_size, "linear_approx")?);
        }
        Ok(SweepRow {
            facet: w.facet.to_string(),
            k_sample: k,
            seed,
            recall_at_1: recall_at_k(&records, 1)?,
            recall_at_5: recall_at_k(&records, 5)?,
        })
    };
    let rows = if parallel {
        cells.par_iter().map(run_cell).collect::<Result<Vec<_>>>()?
    } else {
        cells.iter().map(run_cell).collect::<Result<Vec<_>>>()?
    };
    Ok(SweepTable { rows })
}

/// Per-facet mean recall@5 by K, for quick trend checks.
pub fn trend_by_facet(table: &SweepTable) -> BTreeMap<String, Vec<(usize, f64)>> {
    let mut out: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    for agg in table.aggregate() {
        out.entry(agg.facet).or_default().push((agg.k_sample, agg.mean_recall_at_5));
    }
    out
}

/// Relative spread of a score vector against a reference, after the best positive rescaling.
pub fn max_relative_deviation(scores: &[f64], reference: &[f64]) -> f64 {
    let scale = l2_norm(reference) / l2_norm(scores).max(f64::MIN_POSITIVE);
    let denom = reference.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    scores.iter().zip(reference).map(|(s, r)| (s * scale - r).abs() / denom).fold(0.0, f64::max)
}
