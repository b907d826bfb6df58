//! Recall@k evaluation, aggregation per dataset and task, and the
//! wrong-modality / wrong-domain / other error taxonomy.

mod report;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{select_instruction, Corpus, QueryInstance};
use crate::encoders::FeatureLookup;
use crate::index::{build_flat, EmbeddingStore, IndexError, RetrievalResult, Searcher};
use crate::model::{embed_query, ModelError, ModelParams};

pub use report::{parse_report_csv, render_report, report_rows, write_report, ReportFormat, ReportRow};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("corpus has no queries to evaluate")]
    EmptyCorpus,
    #[error("unknown report format {0:?} (expected text, csv or json)")]
    UnknownFormat(String),
    #[error("invalid metric spec: {0}")]
    InvalidSpec(String),
    #[error("malformed report: {0}")]
    MalformedReport(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Cutoffs for one dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMetric {
    pub k_primary: usize,
    pub k_list: Vec<usize>,
}

impl DatasetMetric {
    pub fn standard() -> Self {
        Self { k_primary: 5, k_list: vec![1, 5, 10] }
    }

    pub fn fashion() -> Self {
        Self { k_primary: 10, k_list: vec![10, 20, 50] }
    }

    pub fn k_max(&self) -> usize {
        self.k_list.iter().copied().chain([self.k_primary]).max().unwrap_or(1)
    }

    fn validate(&self) -> Result<(), EvalError> {
        if self.k_primary == 0 || self.k_list.is_empty() || self.k_list.contains(&0) {
            return Err(EvalError::InvalidSpec("k values must be positive".into()));
        }
        if self.k_list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EvalError::InvalidSpec("k_list must be sorted ascending without repeats".into()));
        }
        Ok(())
    }
}

/// Per-dataset cutoffs: explicit overrides, then the fashion default for
/// dataset names mentioning "fashion", then the standard default.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricSpec {
    pub default: DatasetMetric,
    pub fashion: DatasetMetric,
    pub overrides: BTreeMap<String, DatasetMetric>,
}

impl Default for MetricSpec {
    fn default() -> Self {
        Self { default: DatasetMetric::standard(), fashion: DatasetMetric::fashion(), overrides: BTreeMap::new() }
    }
}

pub fn is_fashion_dataset(name: &str) -> bool {
    name.to_ascii_lowercase().contains("fashion")
}

impl MetricSpec {
    pub fn for_dataset(&self, dataset: &str) -> &DatasetMetric {
        if let Some(m) = self.overrides.get(dataset) {
            return m;
        }
        if is_fashion_dataset(dataset) {
            &self.fashion
        } else {
            &self.default
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        self.default.validate()?;
        self.fashion.validate()?;
        self.overrides.values().try_for_each(DatasetMetric::validate)
    }
}

/// 1 iff any of the first `min(k, len)` retrieved ids is a positive.
pub fn recall_at_k(result: &RetrievalResult, positives: &HashSet<&str>, k: usize) -> u8 {
    u8::from(result.entries.iter().take(k).any(|h| positives.contains(h.did.as_str())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstructionPolicy {
    With,
    Without,
}

/// Where each query is searched: the single heterogeneous pool, or its
/// dataset's own candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolScope {
    Global,
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub qid: String,
    pub dataset: String,
    pub task: String,
    pub hits: BTreeMap<usize, u8>,
    pub top: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecall {
    pub task: String,
    pub n_queries: usize,
    pub k_primary: usize,
    pub recall: BTreeMap<usize, f64>,
}

impl DatasetRecall {
    pub fn primary(&self) -> f64 {
        self.recall[&self.k_primary]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecall {
    pub n_queries: usize,
    /// Mean hit@k_primary, each query at its dataset's primary cutoff.
    pub primary: f64,
    /// Pooled recall for cutoffs measured by every dataset of the task.
    pub recall: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scope: PoolScope,
    pub policy: InstructionPolicy,
    pub per_query: Vec<QueryOutcome>,
    pub per_dataset: BTreeMap<String, DatasetRecall>,
    pub per_task: BTreeMap<String, TaskRecall>,
    /// Unweighted mean of per-dataset primary recall.
    pub average: f64,
}

/// Model, raw features and instruction-selection seed used to embed queries.
#[derive(Clone, Copy)]
pub struct QueryEncoder<'a, F: FeatureLookup + Sync + ?Sized> {
    pub params: &'a ModelParams,
    pub features: &'a F,
    pub instruction_seed: u64,
}

fn search_query<F: FeatureLookup + Sync + ?Sized>(
    q: &QueryInstance,
    enc: &QueryEncoder<'_, F>,
    policy: InstructionPolicy,
    index: &dyn Searcher,
    metric: &DatasetMetric,
) -> Result<QueryOutcome, EvalError> {
    let inst = match policy {
        InstructionPolicy::With => Some(select_instruction(q, enc.instruction_seed)),
        InstructionPolicy::Without => None,
    };
    let emb = embed_query(enc.params, q, enc.features, inst)?;
    let result = index.search(&emb, metric.k_max())?;
    let positives: HashSet<&str> = q.positives.iter().map(String::as_str).collect();
    let hits = metric
        .k_list
        .iter()
        .chain([&metric.k_primary])
        .map(|&k| (k, recall_at_k(&result, &positives, k)))
        .collect();
    Ok(QueryOutcome {
        qid: q.qid.clone(),
        dataset: q.dataset.clone(),
        task: q.task.short_name().to_string(),
        hits,
        top: result.entries.into_iter().map(|h| (h.did, h.score)).collect(),
    })
}

/// Evaluates every query against one index (global pool).
pub fn evaluate<F: FeatureLookup + Sync + ?Sized>(
    corpus: &Corpus,
    index: &dyn Searcher,
    enc: &QueryEncoder<'_, F>,
    spec: &MetricSpec,
    policy: InstructionPolicy,
) -> Result<EvalReport, EvalError> {
    spec.validate()?;
    if corpus.queries.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let per_query = corpus
        .queries
        .par_iter()
        .map(|q| search_query(q, enc, policy, index, spec.for_dataset(&q.dataset)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(aggregate(PoolScope::Global, policy, per_query, spec))
}

/// Evaluates each dataset's queries against a flat index over that
/// dataset's local pool, sliced from the global store.
pub fn evaluate_local<F: FeatureLookup + Sync + ?Sized>(
    corpus: &Corpus,
    global: &EmbeddingStore,
    enc: &QueryEncoder<'_, F>,
    spec: &MetricSpec,
    policy: InstructionPolicy,
) -> Result<EvalReport, EvalError> {
    spec.validate()?;
    if corpus.queries.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut per_query = Vec::with_capacity(corpus.queries.len());
    for dataset in corpus.datasets() {
        let pool = corpus.local_pool(&dataset);
        let store = global.subset(pool.candidates().iter().map(|c| c.did.as_str()))?;
        let index = build_flat(Arc::new(store), enc.params.weights);
        let metric = spec.for_dataset(&dataset);
        let outcomes = corpus
            .queries
            .par_iter()
            .filter(|q| q.dataset == dataset)
            .map(|q| search_query(q, enc, policy, &index, metric))
            .collect::<Result<Vec<_>, _>>()?;
        per_query.extend(outcomes);
    }
    // restore corpus order
    let order: std::collections::HashMap<&str, usize> =
        corpus.queries.iter().enumerate().map(|(i, q)| (q.qid.as_str(), i)).collect();
    per_query.sort_by_key(|o| order[o.qid.as_str()]);
    Ok(aggregate(PoolScope::Local, policy, per_query, spec))
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn aggregate(scope: PoolScope, policy: InstructionPolicy, per_query: Vec<QueryOutcome>, spec: &MetricSpec) -> EvalReport {
    let mut per_dataset = BTreeMap::new();
    let mut by_dataset: BTreeMap<&str, Vec<&QueryOutcome>> = BTreeMap::new();
    for o in &per_query {
        by_dataset.entry(o.dataset.as_str()).or_default().push(o);
    }
    for (dataset, outcomes) in &by_dataset {
        let metric = spec.for_dataset(dataset);
        let recall = metric
            .k_list
            .iter()
            .chain([&metric.k_primary])
            .map(|&k| (k, mean(outcomes.iter().map(|o| f64::from(o.hits[&k])))))
            .collect();
        let task = outcomes[0].task.clone();
        per_dataset.insert(
            dataset.to_string(),
            DatasetRecall { task, n_queries: outcomes.len(), k_primary: metric.k_primary, recall },
        );
    }
    let mut per_task = BTreeMap::new();
    let mut by_task: BTreeMap<&str, Vec<&QueryOutcome>> = BTreeMap::new();
    for o in &per_query {
        by_task.entry(o.task.as_str()).or_default().push(o);
    }
    for (task, outcomes) in by_task {
        let common: BTreeSet<usize> = outcomes
            .iter()
            .map(|o| o.hits.keys().copied().collect::<BTreeSet<_>>())
            .reduce(|a, b| a.intersection(&b).copied().collect())
            .unwrap_or_default();
        let recall = common.iter().map(|&k| (k, mean(outcomes.iter().map(|o| f64::from(o.hits[&k]))))).collect();
        let primary = mean(outcomes.iter().map(|o| f64::from(o.hits[&spec.for_dataset(&o.dataset).k_primary])));
        per_task.insert(task.to_string(), TaskRecall { n_queries: outcomes.len(), primary, recall });
    }
    let average = mean(per_dataset.values().map(DatasetRecall::primary));
    EvalReport { scope, policy, per_query, per_dataset, per_task, average }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub failed: usize,
    pub wrong_modality: f64,
    pub wrong_domain: f64,
    pub other: f64,
}

impl ErrorBreakdown {
    fn from_counts(modality: usize, domain: usize, other: usize) -> Self {
        let failed = modality + domain + other;
        if failed == 0 {
            return Self::default();
        }
        let f = failed as f64;
        Self { failed, wrong_modality: modality as f64 / f, wrong_domain: domain as f64 / f, other: other as f64 / f }
    }
}

/// Classifies the rank-1 candidate of each query that missed at its
/// dataset's primary cutoff.
pub fn classify_errors(corpus: &Corpus, report: &EvalReport, spec: &MetricSpec) -> ErrorBreakdown {
    let by_qid: std::collections::HashMap<&str, &QueryInstance> =
        corpus.queries.iter().map(|q| (q.qid.as_str(), q)).collect();
    let (mut modality, mut domain, mut other) = (0, 0, 0);
    for o in &report.per_query {
        let k = spec.for_dataset(&o.dataset).k_primary;
        if o.hits.get(&k).copied().unwrap_or(0) == 1 {
            continue;
        }
        let Some(q) = by_qid.get(o.qid.as_str()) else { continue };
        let top = o.top.first().and_then(|(did, _)| corpus.pool.get(did));
        let intended = corpus.pool.get(&q.positives[0]).map(|c| &c.domain);
        match top {
            Some(c) if c.modality != q.task.target_modality() => modality += 1,
            Some(c) if Some(&c.domain) != intended => domain += 1,
            _ => other += 1,
        }
    }
    ErrorBreakdown::from_counts(modality, domain, other)
}

/// A saved evaluation: the report plus its error breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub report: EvalReport,
    pub errors: ErrorBreakdown,
}

impl EvalRun {
    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        let text = serde_json::to_string(self).map_err(|e| EvalError::MalformedReport(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| EvalError::MalformedReport(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Candidate, Domain, Instruction, Modality, Pool, TaskKind};
    use crate::index::Hit;

    fn result(ids: &[&str]) -> RetrievalResult {
        RetrievalResult {
            entries: ids.iter().enumerate().map(|(i, d)| Hit { did: d.to_string(), score: -(i as f64) }).collect(),
        }
    }

    #[test]
    fn recall_fixtures() {
        let r = result(&["a", "b", "p", "c", "d", "q"]);
        let pos: HashSet<&str> = ["p"].into();
        assert_eq!(recall_at_k(&r, &pos, 5), 1);
        let pos6: HashSet<&str> = ["q"].into();
        assert_eq!(recall_at_k(&r, &pos6, 5), 0);
        assert_eq!(recall_at_k(&r, &pos6, 6), 1);
        let multi: HashSet<&str> = ["a", "zz", "yy"].into();
        assert_eq!(recall_at_k(&r, &multi, 1), 1);
        // k beyond the list length
        assert_eq!(recall_at_k(&result(&["p"]), &pos, 100), 1);
    }

    #[test]
    fn fashion_datasets_default_to_r10() {
        let spec = MetricSpec::default();
        assert_eq!(spec.for_dataset("Fashion200K").k_primary, 10);
        assert_eq!(spec.for_dataset("FashionIQ").k_list, vec![10, 20, 50]);
        assert_eq!(spec.for_dataset("WebQA").k_primary, 5);
        assert_eq!(spec.for_dataset("mscoco").k_list, vec![1, 5, 10]);
    }

    #[test]
    fn spec_validation() {
        let mut spec = MetricSpec::default();
        spec.default.k_list = vec![5, 1];
        assert!(matches!(spec.validate(), Err(EvalError::InvalidSpec(_))));
        spec.default.k_list = vec![0, 1];
        assert!(spec.validate().is_err());
    }

    fn cand(did: &str, modality: Modality, domain: &str) -> Candidate {
        Candidate {
            did: did.into(),
            modality,
            domain: Domain::new(domain).unwrap(),
            text: modality.has_text().then(|| did.to_string()),
            image_ref: modality.has_image().then(|| did.to_string()),
            dataset: None,
        }
    }

    fn query(qid: &str, task: TaskKind, positives: &[&str]) -> QueryInstance {
        let modality = task.query_modality();
        QueryInstance {
            qid: qid.into(),
            task,
            dataset: "d".into(),
            modality,
            text: modality.has_text().then(|| "t".to_string()),
            image_ref: modality.has_image().then(|| "i".to_string()),
            instructions: vec![Instruction::new("find", task, "x", Domain::new("wiki").unwrap())],
            positives: positives.iter().map(|s| s.to_string()).collect(),
            negatives: vec![],
        }
    }

    fn outcome(qid: &str, hit: u8, top: &str) -> QueryOutcome {
        QueryOutcome {
            qid: qid.into(),
            dataset: "d".into(),
            task: "x".into(),
            hits: [(1, hit), (5, hit), (10, hit)].into(),
            top: vec![(top.to_string(), 1.0)],
        }
    }

    #[test]
    fn error_taxonomy() {
        let pool = Pool::new(vec![
            cand("pos_it", Modality::ImageText, "wiki"),
            cand("txt", Modality::Text, "wiki"),
            cand("it_fashion", Modality::ImageText, "fashion"),
            cand("it_wiki", Modality::ImageText, "wiki"),
        ])
        .unwrap();
        let queries = vec![
            query("q1", TaskKind::T2IT, &["pos_it"]),
            query("q2", TaskKind::T2IT, &["pos_it"]),
            query("q3", TaskKind::T2IT, &["pos_it"]),
            query("q4", TaskKind::T2IT, &["pos_it"]),
        ];
        let corpus = Corpus::new(queries, pool).unwrap();
        let report = EvalReport {
            scope: PoolScope::Global,
            policy: InstructionPolicy::Without,
            per_query: vec![
                outcome("q1", 0, "txt"),
                outcome("q2", 0, "it_fashion"),
                outcome("q3", 0, "it_wiki"),
                outcome("q4", 1, "pos_it"),
            ],
            per_dataset: BTreeMap::new(),
            per_task: BTreeMap::new(),
            average: 0.0,
        };
        let b = classify_errors(&corpus, &report, &MetricSpec::default());
        assert_eq!(b.failed, 3);
        assert!((b.wrong_modality - 1.0 / 3.0).abs() < 1e-12);
        assert!((b.wrong_domain - 1.0 / 3.0).abs() < 1e-12);
        assert!((b.other - 1.0 / 3.0).abs() < 1e-12);
        assert!((b.wrong_modality + b.wrong_domain + b.other - 1.0).abs() < 1e-9);

        let none = EvalReport { per_query: vec![outcome("q4", 1, "pos_it")], ..report };
        assert_eq!(classify_errors(&corpus, &none, &MetricSpec::default()), ErrorBreakdown::default());
    }

    #[test]
    fn aggregate_means() {
        let mut outs = Vec::new();
        for (i, hit) in [1u8, 0, 1, 1].iter().enumerate() {
            let mut o = outcome(&format!("q{i}"), *hit, "x");
            o.dataset = if i < 2 { "a".into() } else { "b".into() };
            outs.push(o);
        }
        let r = aggregate(PoolScope::Global, InstructionPolicy::With, outs, &MetricSpec::default());
        assert_eq!(r.per_dataset["a"].primary(), 0.5);
        assert_eq!(r.per_dataset["b"].primary(), 1.0);
        assert_eq!(r.average, 0.75);
        assert_eq!(r.per_task["x"].primary, 0.75);
        assert_eq!(r.per_task["x"].recall[&10], 0.75);
    }
}
