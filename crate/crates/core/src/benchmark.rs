//! Attribute-focused retrieval test cases, their JSONL encoding, and Recall@K reporting.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::ItemId;

pub const DEFAULT_NEGATIVES: usize = 99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FacetKind {
    Categorical,
    Ordinal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Facet {
    pub name: String,
    pub kind: FacetKind,
    #[serde(default)]
    pub ordinal_margin: u32,
}

impl Facet {
    pub fn categorical(name: impl Into<String>) -> Self {
        Self { name: name.into(), kind: FacetKind::Categorical, ordinal_margin: 0 }
    }

    pub fn ordinal(name: impl Into<String>, margin: u32) -> Self {
        Self { name: name.into(), kind: FacetKind::Ordinal, ordinal_margin: margin }
    }

    fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::InvariantViolation("facet name is empty".into()));
        }
        if self.kind == FacetKind::Categorical && self.ordinal_margin != 0 {
            return Err(Error::InvariantViolation(format!(
                "categorical facet `{}` has non-zero ordinal margin",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub case_id: ItemId,
    pub facet: String,
    pub query_text: String,
    pub positive: ItemId,
    pub negatives: Vec<ItemId>,
}

impl TestCase {
    /// Positive first, then negatives in file order.
    pub fn candidates(&self) -> Vec<ItemId> {
        std::iter::once(self.positive.clone()).chain(self.negatives.iter().cloned()).collect()
    }

    pub fn pool_size(&self) -> usize {
        self.negatives.len() + 1
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    facets: Vec<Facet>,
    negatives_per_case: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSet {
    pub facets: Vec<Facet>,
    pub cases: Vec<TestCase>,
    pub negatives_per_case: usize,
}

impl BenchmarkSet {
    pub fn new(facets: Vec<Facet>, cases: Vec<TestCase>, negatives_per_case: usize) -> Result<Self> {
        let set = Self { facets, cases, negatives_per_case };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.negatives_per_case == 0 {
            return Err(Error::InvariantViolation("negatives_per_case must be positive".into()));
        }
        let mut names = HashSet::new();
        for f in &self.facets {
            f.validate()?;
            if !names.insert(f.name.as_str()) {
                return Err(Error::InvariantViolation(format!("facet `{}` declared twice", f.name)));
            }
        }
        let mut case_ids = HashSet::new();
        for case in &self.cases {
            if !case_ids.insert(case.case_id.as_str()) {
                return Err(Error::InvariantViolation(format!("duplicate case_id `{}`", case.case_id)));
            }
            if !names.contains(case.facet.as_str()) {
                return Err(Error::InvariantViolation(format!(
                    "case `{}` uses undeclared facet `{}`",
                    case.case_id, case.facet
                )));
            }
            if case.negatives.len() != self.negatives_per_case {
                return Err(Error::InvariantViolation(format!(
                    "case `{}` has {} negatives, expected {}",
                    case.case_id,
                    case.negatives.len(),
                    self.negatives_per_case
                )));
            }
            let mut seen = HashSet::with_capacity(case.pool_size());
            seen.insert(case.positive.as_str());
            for n in &case.negatives {
                if !seen.insert(n.as_str()) {
                    let what = if n == &case.positive { "positive appears among negatives" } else { "repeated negative" };
                    return Err(Error::InvariantViolation(format!("case `{}`: {what} `{n}`", case.case_id)));
                }
            }
        }
        Ok(())
    }

    pub fn facet(&self, name: &str) -> Option<&Facet> {
        self.facets.iter().find(|f| f.name == name)
    }

    pub fn case(&self, case_id: &str) -> Option<&TestCase> {
        self.cases.iter().find(|c| c.case_id.as_str() == case_id)
    }

    pub fn cases_for<'a>(&'a self, facet: &'a str) -> impl Iterator<Item = &'a TestCase> + 'a {
        self.cases.iter().filter(move |c| c.facet == facet)
    }

    /// Every image id referenced by any case, sorted.
    pub fn image_ids(&self) -> Vec<ItemId> {
        collect_sorted(self.cases.iter())
    }

    /// Union of the candidate pools of one facet's cases, sorted.
    pub fn facet_pool(&self, facet: &str) -> Vec<ItemId> {
        collect_sorted(self.cases_for(facet))
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let header = Header { facets: self.facets.clone(), negatives_per_case: self.negatives_per_case };
        out.push_str(&serde_json::to_string(&header).expect("header serializes"));
        out.push('\n');
        for case in &self.cases {
            out.push_str(&serde_json::to_string(case).expect("case serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.validate()?;
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(BufReader::new(file), path)
    }

    pub fn from_reader(reader: impl BufRead, origin: &Path) -> Result<Self> {
        let mut lines = reader.lines().enumerate().filter_map(|(n, line)| match line {
            Ok(l) if l.trim().is_empty() => None,
            other => Some((n + 1, other)),
        });
        let (_, header) = lines.next().ok_or_else(|| Error::format(origin, "missing header line"))?;
        let header = header.map_err(|e| Error::io(origin, e))?;
        let header: Header = serde_json::from_str(&header)
            .map_err(|e| Error::format(origin, format!("line 1: bad header: {e}")))?;
        let mut cases = Vec::new();
        for (n, line) in lines {
            let line = line.map_err(|e| Error::io(origin, e))?;
            let case: TestCase = serde_json::from_str(&line)
                .map_err(|e| Error::format(origin, format!("line {n}: {e}")))?;
            cases.push(case);
        }
        Self::new(header.facets, cases, header.negatives_per_case)
    }
}

fn collect_sorted<'a>(cases: impl Iterator<Item = &'a TestCase>) -> Vec<ItemId> {
    let mut ids: Vec<ItemId> = cases
        .flat_map(|c| std::iter::once(&c.positive).chain(&c.negatives))
        .cloned()
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    ids.sort();
    ids
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub case_id: ItemId,
    pub rank: usize,
    pub pool_size: usize,
    pub mode: String,
}

impl EvalRecord {
    pub fn new(case_id: ItemId, rank: usize, pool_size: usize, mode: impl Into<String>) -> Result<Self> {
        if rank == 0 || rank > pool_size {
            return Err(Error::InvalidArgument(format!("rank {rank} outside 1..={pool_size}")));
        }
        Ok(Self { case_id, rank, pool_size, mode: mode.into() })
    }
}

/// Fraction of records whose positive ranked within the top `k`.
pub fn recall_at_k<'a>(records: impl IntoIterator<Item = &'a EvalRecord>, k: usize) -> Result<f64> {
    let (hits, total) = records
        .into_iter()
        .fold((0usize, 0usize), |(h, t), r| (h + usize::from(r.rank <= k), t + 1));
    if total == 0 {
        return Err(Error::EmptyInput("recall_at_k needs at least one record"));
    }
    Ok(hits as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacetRecall {
    pub facet: String,
    pub k: usize,
    pub recall: f64,
    pub n_cases: usize,
    pub mode: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageRecall {
    pub k: usize,
    /// Unweighted mean over facets.
    pub macro_recall: f64,
    /// Mean over cases.
    pub weighted_recall: f64,
    pub n_cases: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacetReport {
    pub mode: String,
    pub rows: Vec<FacetRecall>,
    pub averages: Vec<AverageRecall>,
}

impl FacetReport {
    pub fn recall(&self, facet: &str, k: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.facet == facet && r.k == k).map(|r| r.recall)
    }

    pub fn average(&self, k: usize) -> Option<&AverageRecall> {
        self.averages.iter().find(|a| a.k == k)
    }

    /// Columns `facet,k,recall,n_cases,mode`; averages follow as `avg_macro` and `avg_weighted` rows.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_merged_csv(std::slice::from_ref(self), path)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Several reports in one CSV, each in the single-report layout.
pub fn write_merged_csv(reports: &[FacetReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for report in reports {
        for row in &report.rows {
            w.serialize(row).map_err(|e| csv_err(path, e))?;
        }
        for avg in &report.averages {
            for (label, recall) in [("avg_macro", avg.macro_recall), ("avg_weighted", avg.weighted_recall)] {
                w.serialize(FacetRecall {
                    facet: label.into(),
                    k: avg.k,
                    recall,
                    n_cases: avg.n_cases,
                    mode: report.mode.clone(),
                })
                .map_err(|e| csv_err(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}

/// Per-facet recall at each `k`, plus macro and case-weighted averages.
///
/// Facets are reported in benchmark declaration order; facets without records are skipped.
pub fn per_facet_report(records: &[EvalRecord], benchmark: &BenchmarkSet, ks: &[usize]) -> Result<FacetReport> {
    if records.is_empty() {
        return Err(Error::EmptyInput("per_facet_report needs at least one record"));
    }
    let facet_of: HashMap<&str, &str> =
        benchmark.cases.iter().map(|c| (c.case_id.as_str(), c.facet.as_str())).collect();
    let mut grouped: BTreeMap<&str, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        let facet = facet_of.get(r.case_id.as_str()).ok_or_else(|| Error::UnknownCase(r.case_id.to_string()))?;
        grouped.entry(facet).or_default().push(r);
    }
    let mode = records[0].mode.clone();
    let mut rows = Vec::new();
    let mut averages = Vec::new();
    for &k in ks {
        let mut facet_recalls = Vec::new();
        for facet in &benchmark.facets {
            let Some(group) = grouped.get(facet.name.as_str()) else { continue };
            let recall = recall_at_k(group.iter().copied(), k)?;
            facet_recalls.push(recall);
            rows.push(FacetRecall { facet: facet.name.clone(), k, recall, n_cases: group.len(), mode: mode.clone() });
        }
        averages.push(AverageRecall {
            k,
            macro_recall: facet_recalls.iter().sum::<f64>() / facet_recalls.len() as f64,
            weighted_recall: recall_at_k(records, k)?,
            n_cases: records.len(),
        });
    }
    Ok(FacetReport { mode, rows, averages })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(s: &str) -> ItemId {
        ItemId::new(s).unwrap()
    }

    fn case(case_id: &str, facet: &str, negatives: usize) -> TestCase {
        TestCase {
            case_id: id(case_id),
            facet: facet.into(),
            query_text: format!("Find me an everyday image for {case_id}."),
            positive: id(&format!("{case_id}-pos")),
            negatives: (0..negatives).map(|i| id(&format!("{case_id}-neg{i:02}"))).collect(),
        }
    }

    fn record(case_id: &str, rank: usize) -> EvalRecord {
        EvalRecord::new(id(case_id), rank, 100, "test").unwrap()
    }

    #[test]
    fn single_case_file_loads() {
        let set = BenchmarkSet::new(vec![Facet::categorical("scenes")], vec![case("c1", "scenes", 99)], 99).unwrap();
        let back = BenchmarkSet::from_reader(set.to_jsonl().as_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back.cases.len(), 1);
        assert_eq!(back, set);
    }

    #[test]
    fn positive_in_negatives_rejected() {
        let mut c = case("c1", "scenes", 99);
        c.negatives[5] = c.positive.clone();
        let err = BenchmarkSet::new(vec![Facet::categorical("scenes")], vec![c], 99).unwrap_err();
        assert!(matches!(err, Error::InvariantViolation(_)));
    }

    #[test]
    fn wrong_count_duplicates_and_unknown_facets_rejected() {
        let facets = vec![Facet::categorical("scenes")];
        assert!(BenchmarkSet::new(facets.clone(), vec![case("c1", "scenes", 98)], 99).is_err());
        assert!(BenchmarkSet::new(facets.clone(), vec![case("c1", "times", 99)], 99).is_err());
        assert!(BenchmarkSet::new(facets.clone(), vec![case("c1", "scenes", 99), case("c1", "scenes", 99)], 99).is_err());
        let mut rep = case("c2", "scenes", 99);
        rep.negatives[1] = rep.negatives[0].clone();
        assert!(BenchmarkSet::new(facets, vec![rep], 99).is_err());
        assert!(BenchmarkSet::new(vec![Facet { name: "x".into(), kind: FacetKind::Categorical, ordinal_margin: 2 }], vec![], 99).is_err());
    }

    #[test]
    fn malformed_lines_are_format_errors() {
        let text = "{\"facets\":[],\"negatives_per_case\":99}\n{not json}\n";
        assert!(matches!(BenchmarkSet::from_reader(text.as_bytes(), Path::new("m")), Err(Error::Format { .. })));
        assert!(matches!(BenchmarkSet::from_reader("".as_bytes(), Path::new("m")), Err(Error::Format { .. })));
    }

    #[test]
    fn header_layout() {
        let set = BenchmarkSet::new(vec![Facet::ordinal("count_of_people", 3)], vec![], 99).unwrap();
        let first = set.to_jsonl().lines().next().unwrap().to_string();
        assert_eq!(
            first,
            r#"{"facets":[{"name":"count_of_people","kind":"ordinal","ordinal_margin":3}],"negatives_per_case":99}"#
        );
    }

    #[test]
    fn recall_examples() {
        let all_ones: Vec<_> = (0..4).map(|i| record(&format!("c{i}"), 1)).collect();
        assert_eq!(recall_at_k(&all_ones, 1).unwrap(), 1.0);
        let mixed: Vec<_> = [1, 3, 6, 2].iter().enumerate().map(|(i, r)| record(&format!("c{i}"), *r)).collect();
        assert_eq!(recall_at_k(&mixed, 5).unwrap(), 0.75);
        assert!(matches!(recall_at_k(&[], 1), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn rank_outside_pool_rejected() {
        assert!(EvalRecord::new(id("c"), 0, 100, "m").is_err());
        assert!(EvalRecord::new(id("c"), 101, 100, "m").is_err());
    }

    #[test]
    fn single_facet_report_equals_recall() {
        let set = BenchmarkSet::new(vec![Facet::categorical("a")], vec![case("c0", "a", 3), case("c1", "a", 3)], 3).unwrap();
        let recs = vec![record("c0", 1), record("c1", 4)];
        let rep = per_facet_report(&recs, &set, &[1]).unwrap();
        assert_eq!(rep.recall("a", 1), Some(recall_at_k(&recs, 1).unwrap()));
        assert_eq!(rep.average(1).unwrap().macro_recall, 0.5);
    }

    #[test]
    fn two_facets_macro_average() {
        let set = BenchmarkSet::new(
            vec![Facet::categorical("a"), Facet::categorical("b")],
            vec![case("c0", "a", 3), case("c1", "b", 3), case("c2", "b", 3)],
            3,
        )
        .unwrap();
        let recs = vec![record("c0", 1), record("c1", 2), record("c2", 3)];
        let rep = per_facet_report(&recs, &set, &[1]).unwrap();
        assert_eq!(rep.average(1).unwrap().macro_recall, 0.5);
        assert!((rep.average(1).unwrap().weighted_recall - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn unknown_case_in_report() {
        let set = BenchmarkSet::new(vec![Facet::categorical("a")], vec![case("c0", "a", 3)], 3).unwrap();
        assert!(matches!(per_facet_report(&[record("zz", 1)], &set, &[1]), Err(Error::UnknownCase(_))));
    }

    #[test]
    fn pools() {
        let set = BenchmarkSet::new(
            vec![Facet::categorical("a"), Facet::categorical("b")],
            vec![case("c0", "a", 2), case("c1", "b", 2)],
            2,
        )
        .unwrap();
        assert_eq!(set.image_ids().len(), 6);
        let pool = set.facet_pool("a");
        assert_eq!(pool.len(), 3);
        assert!(pool.windows(2).all(|w| w[0] < w[1]));
    }
}
