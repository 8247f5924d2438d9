//! Embedding-cost accounting in abstract units.

use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::EvalMode;
use crate::benchmark::csv_err;
use crate::error::{Error, Result};

/// `v` per image embedding, `t` per text embedding (contrastive embedders), `F` per forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnitCosts {
    pub v: f64,
    pub t: f64,
    #[serde(rename = "f")]
    pub f: f64,
}

impl Default for UnitCosts {
    fn default() -> Self {
        Self { v: 1.0, t: 1.0, f: 1.0 }
    }
}

impl UnitCosts {
    pub fn validate(&self) -> Result<()> {
        if [self.v, self.t, self.f].iter().all(|x| x.is_finite() && *x >= 0.0) {
            Ok(())
        } else {
            Err(Error::ConfigInvalid("unit costs must be finite and non-negative".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Preprocess,
    Query,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Preprocess => "preprocess",
            Phase::Query => "query",
        })
    }
}

#[derive(Debug, Default)]
struct PhaseCounters {
    image_embed_calls: AtomicU64,
    prompted_embed_calls: AtomicU64,
    text_embed_calls: AtomicU64,
    selector_calls: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CounterSnapshot {
    pub image_embed_calls: u64,
    pub prompted_embed_calls: u64,
    pub text_embed_calls: u64,
    pub selector_calls: u64,
}

impl CounterSnapshot {
    fn plus(self, o: Self) -> Self {
        Self {
            image_embed_calls: self.image_embed_calls + o.image_embed_calls,
            prompted_embed_calls: self.prompted_embed_calls + o.prompted_embed_calls,
            text_embed_calls: self.text_embed_calls + o.text_embed_calls,
            selector_calls: self.selector_calls + o.selector_calls,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Counter {
    Image,
    Prompted,
    Text,
    Selector,
}

/// Call counters for one run. Counters only grow; totals are derived on demand.
#[derive(Debug)]
pub struct CostLedger {
    pub mode: EvalMode,
    /// Images in the benchmark.
    pub n_images: u64,
    /// Queries (test cases).
    pub n_queries: u64,
    /// Requested sample size; 0 outside linear approximation.
    pub k_sample: u64,
    /// Prompted stores built during pre-processing.
    pub n_prompts: u64,
    pub units: UnitCosts,
    preprocess: PhaseCounters,
    query: PhaseCounters,
    fits: AtomicU64,
}

impl CostLedger {
    pub fn new(mode: EvalMode, n_images: usize, n_queries: usize, units: UnitCosts) -> Self {
        Self {
            mode,
            n_images: n_images as u64,
            n_queries: n_queries as u64,
            k_sample: 0,
            n_prompts: 0,
            units,
            preprocess: PhaseCounters::default(),
            query: PhaseCounters::default(),
            fits: AtomicU64::new(0),
        }
    }

    fn phase(&self, phase: Phase) -> &PhaseCounters {
        match phase {
            Phase::Preprocess => &self.preprocess,
            Phase::Query => &self.query,
        }
    }

    pub(crate) fn bump(&self, phase: Phase, counter: Counter) {
        let p = self.phase(phase);
        let c = match counter {
            Counter::Image => &p.image_embed_calls,
            Counter::Prompted => &p.prompted_embed_calls,
            Counter::Text => &p.text_embed_calls,
            Counter::Selector => &p.selector_calls,
        };
        c.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn record_fit(&self) {
        self.fits.fetch_add(1, Ordering::Relaxed);
    }

    /// Linear maps fitted during the run.
    pub fn fits(&self) -> u64 {
        self.fits.load(Ordering::Relaxed)
    }

    pub fn snapshot(&self, phase: Phase) -> CounterSnapshot {
        let p = self.phase(phase);
        CounterSnapshot {
            image_embed_calls: p.image_embed_calls.load(Ordering::Relaxed),
            prompted_embed_calls: p.prompted_embed_calls.load(Ordering::Relaxed),
            text_embed_calls: p.text_embed_calls.load(Ordering::Relaxed),
            selector_calls: p.selector_calls.load(Ordering::Relaxed),
        }
    }

    pub fn totals(&self) -> CounterSnapshot {
        self.snapshot(Phase::Preprocess).plus(self.snapshot(Phase::Query))
    }

    /// Text queries cost `t` for the baseline's contrastive accounting and `F` otherwise.
    fn text_unit(&self) -> f64 {
        if self.mode == EvalMode::Baseline {
            self.units.t
        } else {
            self.units.f
        }
    }

    /// Cost of a phase's counted calls under the configured unit costs.
    pub fn counter_cost(&self, phase: Phase) -> f64 {
        let c = self.snapshot(phase);
        c.image_embed_calls as f64 * self.units.v
            + c.prompted_embed_calls as f64 * self.units.f
            + c.text_embed_calls as f64 * self.text_unit()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub mode: String,
    pub phase: String,
    pub formula: String,
    /// Formula evaluated with the configured unit costs.
    pub unit_total: f64,
    /// The same quantity recomputed from the run's call counters.
    pub counter_total: f64,
}

/// Formula, formula value and counter-derived value for each cost line of the ledger's mode.
pub fn cost_report(ledger: &CostLedger) -> Vec<CostRow> {
    let u = ledger.units;
    let n = ledger.n_images as f64;
    let m = ledger.n_queries as f64;
    let k = ledger.k_sample as f64;
    let pre = ledger.counter_cost(Phase::Preprocess);
    let query = ledger.counter_cost(Phase::Query);
    let per_m = |x: f64| if m > 0.0 { x / m } else { 0.0 };
    let mode = ledger.mode.to_string();
    let row = |phase: &str, formula: &str, unit_total: f64, counter_total: f64| CostRow {
        mode: mode.clone(),
        phase: phase.into(),
        formula: formula.into(),
        unit_total,
        counter_total,
    };
    match ledger.mode {
        EvalMode::Baseline => vec![
            row("preprocess", "N*v", n * u.v, pre),
            row("per_query", "t", u.t, per_m(query)),
            row("total", "N*v + M*t", n * u.v + m * u.t, pre + query),
        ],
        EvalMode::PromptedGt => {
            let stores = ledger.snapshot(Phase::Preprocess).prompted_embed_calls as f64;
            vec![
                row("preprocess", "sum_f(N_f)*F", stores * u.f, pre),
                row("per_query", "F", u.f, per_m(query)),
                // prompts known only at query time would re-embed every image per query
                row("per_query_naive", "N*F + F", n * u.f + u.f, per_m(pre + query)),
                row("total_naive", "N*v + M*(N*F + F)", n * u.v + m * (n * u.f + u.f), pre + query),
            ]
        }
        EvalMode::PreprocessedSelected => {
            let p = ledger.n_prompts as f64;
            vec![
                row("preprocess", "P*N*F", p * n * u.f, pre),
                row("per_query", "F", u.f, per_m(query)),
                row("selector_calls", "M", m, ledger.totals().selector_calls as f64),
                row("total", "P*N*F + M*F", p * n * u.f + m * u.f, pre + query),
            ]
        }
        EvalMode::LinearApprox => {
            let q = ledger.snapshot(Phase::Query);
            let fits = ledger.fits() as f64;
            let samples_per_fit = if fits > 0.0 { q.prompted_embed_calls as f64 / fits } else { 0.0 };
            let per_query_actual = samples_per_fit * u.f + per_m(q.text_embed_calls as f64) * u.f;
            vec![
                row("preprocess", "N*v", n * u.v, pre),
                row("per_query", "K*F + F", k * u.f + u.f, per_query_actual),
                row("per_query_amortized", "(S*K*F + M*F)/M", per_m(fits * k * u.f + m * u.f), per_m(query)),
                row("total", "N*v + S*K*F + M*F", n * u.v + fits * k * u.f + m * u.f, pre + query),
            ]
        }
    }
}

/// Columns `mode,phase,formula,unit_total,counter_total`.
pub fn write_cost_csv(rows: &[CostRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bump_n(l: &CostLedger, phase: Phase, c: Counter, n: usize) {
        for _ in 0..n {
            l.bump(phase, c);
        }
    }

    fn find<'a>(rows: &'a [CostRow], phase: &str) -> &'a CostRow {
        rows.iter().find(|r| r.phase == phase).unwrap()
    }

    #[test]
    fn baseline_formula() {
        let l = CostLedger::new(EvalMode::Baseline, 1000, 50, UnitCosts::default());
        bump_n(&l, Phase::Preprocess, Counter::Image, 1000);
        bump_n(&l, Phase::Query, Counter::Text, 50);
        let rows = cost_report(&l);
        let total = find(&rows, "total");
        assert_eq!((total.unit_total, total.counter_total), (1050.0, 1050.0));
    }

    #[test]
    fn naive_prompted_per_query() {
        let l = CostLedger::new(EvalMode::PromptedGt, 100, 1, UnitCosts::default());
        assert_eq!(find(&cost_report(&l), "per_query_naive").unit_total, 101.0);
    }

    #[test]
    fn weighted_units() {
        let units = UnitCosts { v: 2.0, t: 0.5, f: 3.0 };
        let l = CostLedger::new(EvalMode::Baseline, 10, 4, units);
        bump_n(&l, Phase::Preprocess, Counter::Image, 10);
        bump_n(&l, Phase::Query, Counter::Text, 4);
        let total = find(&cost_report(&l), "total").clone();
        assert_eq!(total.unit_total, 22.0);
        assert_eq!(total.counter_total, 22.0);
        assert!(UnitCosts { v: -1.0, ..units }.validate().is_err());
    }

    #[test]
    fn linear_per_query() {
        let mut l = CostLedger::new(EvalMode::LinearApprox, 500, 20, UnitCosts::default());
        l.k_sample = 100;
        l.record_fit();
        bump_n(&l, Phase::Query, Counter::Prompted, 100);
        bump_n(&l, Phase::Query, Counter::Text, 20);
        let r = find(&cost_report(&l), "per_query").clone();
        assert_eq!((r.unit_total, r.counter_total), (101.0, 101.0));
    }
}
