//! Declarative experiment plans: zero-shot, multi-task and
//! instruction-tuned conditions over one corpus, paired across seeds, plus
//! the held-out dataset protocol.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::info;

use crate::data::{fnv1a64, parse_corpus, Corpus, DataError};
use crate::encoders::FeatureLookup;
use crate::eval::{
    classify_errors, evaluate, evaluate_local, render_report, report_rows, ErrorBreakdown, EvalError, EvalReport, EvalRun,
    InstructionPolicy, MetricSpec, QueryEncoder, ReportFormat, ReportRow,
};
use crate::index::{build_clustered, build_flat, read_embeddings, IndexError, Searcher, DEFAULT_MAX_ITERS};
use crate::model::{embed_pool, FusionMode, ModelError, ModelParams};
use crate::synthgen::{generate, split_held_out, HeldOut, SynthConfig, SynthError};
use crate::train::{train, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("cannot parse plan: {0}")]
    PlanSyntax(#[from] toml::de::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Corpus files on disk; relative paths resolve against the plan file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusFiles {
    pub queries: PathBuf,
    pub candidates: PathBuf,
    /// Feature-mode embedding file of raw image features.
    pub features: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    pub name: String,
    #[serde(default)]
    pub use_instructions: bool,
    /// `false` evaluates the untrained (zero-shot) model.
    #[serde(default = "yes")]
    pub train: bool,
    /// Datasets (or task short names) to train on; all when absent.
    #[serde(default)]
    pub train_tasks: Option<Vec<String>>,
    #[serde(default = "score_mode")]
    pub mode: FusionMode,
}

fn yes() -> bool {
    true
}

fn score_mode() -> FusionMode {
    FusionMode::ScoreFusion
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub temperature_init: f64,
    pub freeze_weights: bool,
    pub hard_negatives: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            temperature_init: t.temperature_init,
            freeze_weights: t.freeze_weights,
            hard_negatives: t.hard_negatives,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexKind {
    Flat,
    Clustered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexSettings {
    pub kind: IndexKind,
    pub n_lists: usize,
    /// Defaults to every list (exact).
    pub n_probe: Option<usize>,
}

impl Default for IndexSettings {
    fn default() -> Self {
        Self { kind: IndexKind::Flat, n_lists: 16, n_probe: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub name: String,
    #[serde(default)]
    pub corpus: Option<CorpusFiles>,
    /// Synthetic corpus regenerated per seed (its own seed is replaced).
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    pub conditions: Vec<Condition>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub metrics: MetricSpec,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub index: IndexSettings,
    /// Condition names for the delta table: treatment − baseline.
    #[serde(default)]
    pub baseline: Option<String>,
    #[serde(default)]
    pub treatment: Option<String>,
    /// Also evaluate against dataset-local pools.
    #[serde(default)]
    pub local_pool: bool,
    #[serde(default)]
    pub held_out: Option<HeldOut>,
    /// Seed used to pick instructions at evaluation time.
    #[serde(default)]
    pub eval_instruction_seed: u64,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl ExperimentPlan {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let plan: Self = toml::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }

    /// Reads a plan and resolves corpus paths relative to its directory.
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let mut plan = Self::from_toml(&std::fs::read_to_string(path)?)?;
        if let (Some(files), Some(dir)) = (plan.corpus.as_mut(), path.parent()) {
            for p in [&mut files.queries, &mut files.candidates, &mut files.features] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(plan)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::InvalidPlan(m));
        if self.corpus.is_some() == self.synth.is_some() {
            return bad("exactly one of [corpus] and [synth] is required".into());
        }
        if self.conditions.is_empty() {
            return bad("at least one condition is required".into());
        }
        let mut names = std::collections::HashSet::new();
        for c in &self.conditions {
            if !names.insert(c.name.as_str()) {
                return bad(format!("duplicate condition name {:?}", c.name));
            }
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        for name in [&self.baseline, &self.treatment].into_iter().flatten() {
            if !names.contains(name.as_str()) {
                return bad(format!("unknown condition {name:?}"));
            }
        }
        if self.baseline.is_some() != self.treatment.is_some() {
            return bad("baseline and treatment go together".into());
        }
        if self.train.batch_size < 2 {
            return bad("train.batch_size must be at least 2".into());
        }
        self.metrics.validate()?;
        Ok(())
    }

    /// SHA-256 of the plan's canonical JSON form.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("plan serializes")))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        write!(s, "{b:02x}").unwrap();
        s
    })
}

/// Per-seed corpus and raw features.
pub struct LoadedCorpus {
    pub corpus: Corpus,
    pub features: Box<dyn FeatureLookup + Send + Sync>,
    pub dim: usize,
}

pub fn load_corpus(plan: &ExperimentPlan, seed: u64) -> Result<LoadedCorpus, ExperimentError> {
    if let Some(cfg) = &plan.synth {
        let s = generate(&SynthConfig { seed, ..cfg.clone() })?;
        return Ok(LoadedCorpus { corpus: s.corpus, dim: cfg.dim, features: Box::new(s.features) });
    }
    let files = plan.corpus.as_ref().expect("validated plan");
    let corpus = parse_corpus(&files.queries, &files.candidates)?;
    let features = read_embeddings(&files.features)?;
    Ok(LoadedCorpus { corpus, dim: features.dim(), features: Box::new(features) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub name: String,
    pub seed: u64,
    pub final_loss: Option<f64>,
    pub weights: [f64; 4],
    pub global: EvalReport,
    pub global_errors: ErrorBreakdown,
    pub local: Option<EvalReport>,
    pub local_errors: Option<ErrorBreakdown>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub conditions: Vec<ConditionResult>,
    /// Treatment − baseline over the global-pool report.
    pub deltas: Option<Vec<ReportRow>>,
}

impl SeedRun {
    pub fn condition(&self, name: &str) -> Option<&ConditionResult> {
        self.conditions.iter().find(|c| c.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub plan: String,
    pub plan_hash: String,
    pub runs: Vec<SeedRun>,
}

fn train_config(plan: &ExperimentPlan, cond: &Condition, seed: u64) -> TrainConfig {
    let t = &plan.train;
    TrainConfig {
        batch_size: t.batch_size,
        epochs: t.epochs,
        learning_rate: t.learning_rate,
        temperature_init: t.temperature_init,
        seed,
        use_instructions: cond.use_instructions,
        mode: cond.mode,
        freeze_weights: t.freeze_weights,
        hard_negatives: t.hard_negatives,
    }
}

fn restrict(corpus: &Corpus, names: &[String]) -> Result<Corpus, ExperimentError> {
    let (_, chosen) = split_held_out(corpus, &HeldOut::Names(names.to_vec()), 0).or_else(|e| match e {
        // naming every dataset is allowed here
        SynthError::NothingHeldIn => Ok((corpus.clone(), corpus.clone())),
        other => Err(other),
    })?;
    Ok(chosen)
}

/// Trains (or not) one condition and returns its model and final loss.
pub fn fit_condition(
    plan: &ExperimentPlan,
    cond: &Condition,
    train_corpus: &Corpus,
    features: &(dyn FeatureLookup + Send + Sync),
    dim: usize,
    seed: u64,
) -> Result<(ModelParams, Option<f64>), ExperimentError> {
    let config = train_config(plan, cond, seed);
    if !cond.train {
        return Ok((ModelParams::init(dim, cond.mode, seed), None));
    }
    let corpus = match &cond.train_tasks {
        Some(names) => restrict(train_corpus, names)?,
        None => train_corpus.clone(),
    };
    let outcome = train(&corpus, features, dim, &config)?;
    let final_loss = outcome.loss_curve.last().map(|r| r.loss);
    Ok((outcome.params, final_loss))
}

/// Flat or clustered searcher over `store`, per the index settings.
pub fn build_index(
    settings: &IndexSettings,
    params: &ModelParams,
    store: Arc<crate::index::EmbeddingStore>,
    seed: u64,
) -> Result<Box<dyn Searcher>, ExperimentError> {
    Ok(match settings.kind {
        IndexKind::Flat => Box::new(build_flat(store, params.weights)),
        IndexKind::Clustered => {
            let n_lists = settings.n_lists.min(store.len()).max(1);
            let idx = build_clustered(store, params.weights, n_lists, seed, DEFAULT_MAX_ITERS)?;
            Box::new(idx.with_n_probe(settings.n_probe.unwrap_or(n_lists).min(n_lists))?)
        }
    })
}

/// How a model is evaluated: searcher layout, metrics, instruction use and
/// whether dataset-local pools are scored too.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub index: IndexSettings,
    pub metrics: MetricSpec,
    pub policy: InstructionPolicy,
    pub instruction_seed: u64,
    pub local_pool: bool,
}

/// Embeds the pool with `params`, indexes it and evaluates `corpus` on the
/// global pool and, if asked, on the local pools.
pub fn evaluate_model(
    corpus: &Corpus,
    params: &ModelParams,
    features: &(dyn FeatureLookup + Send + Sync),
    settings: &EvalSettings,
    seed: u64,
) -> Result<(EvalRun, Option<EvalRun>), ExperimentError> {
    let store = Arc::new(embed_pool(params, &corpus.pool, features)?);
    let index = build_index(&settings.index, params, Arc::clone(&store), seed)?;
    let enc = QueryEncoder { params, features, instruction_seed: settings.instruction_seed };
    let report = evaluate(corpus, index.as_ref(), &enc, &settings.metrics, settings.policy)?;
    let errors = classify_errors(corpus, &report, &settings.metrics);
    let local = if settings.local_pool {
        let report = evaluate_local(corpus, &store, &enc, &settings.metrics, settings.policy)?;
        let errors = classify_errors(corpus, &report, &settings.metrics);
        Some(EvalRun { report, errors })
    } else {
        None
    };
    Ok((EvalRun { report, errors }, local))
}

/// [`evaluate_model`] with the plan's settings and the condition's
/// instruction policy.
pub fn evaluate_condition(
    plan: &ExperimentPlan,
    cond: &Condition,
    params: &ModelParams,
    eval_corpus: &Corpus,
    features: &(dyn FeatureLookup + Send + Sync),
    seed: u64,
) -> Result<(EvalRun, Option<EvalRun>), ExperimentError> {
    let settings = EvalSettings {
        index: plan.index.clone(),
        metrics: plan.metrics.clone(),
        policy: if cond.use_instructions { InstructionPolicy::With } else { InstructionPolicy::Without },
        instruction_seed: plan.eval_instruction_seed,
        local_pool: plan.local_pool,
    };
    evaluate_model(eval_corpus, params, features, &settings, seed)
}

fn run_condition(
    plan: &ExperimentPlan,
    cond: &Condition,
    train_corpus: &Corpus,
    eval_corpus: &Corpus,
    loaded: &LoadedCorpus,
    seed: u64,
) -> Result<ConditionResult, ExperimentError> {
    let (params, final_loss) = fit_condition(plan, cond, train_corpus, loaded.features.as_ref(), loaded.dim, seed)?;
    let (global, local) = evaluate_condition(plan, cond, &params, eval_corpus, loaded.features.as_ref(), seed)?;
    let EvalRun { report: global, errors: global_errors } = global;
    info!(condition = %cond.name, seed, average = global.average, wrong_modality = global_errors.wrong_modality, "condition done");
    let w = params.weights;
    let (local, local_errors) = local.map_or((None, None), |r| (Some(r.report), Some(r.errors)));
    Ok(ConditionResult {
        name: cond.name.clone(),
        seed,
        final_loss,
        weights: [w.w1, w.w2, w.w3, w.w4],
        global,
        global_errors,
        local,
        local_errors,
    })
}

fn deltas(plan: &ExperimentPlan, conditions: &[ConditionResult]) -> Option<Vec<ReportRow>> {
    let (b, t) = (plan.baseline.as_ref()?, plan.treatment.as_ref()?);
    let find = |n: &str| conditions.iter().find(|c| c.name == n);
    let (b, t) = (find(b)?, find(t)?);
    Some(report_rows(&t.global, &t.global_errors, Some((&b.global, &b.global_errors))))
}

/// Runs every condition for every seed.
pub fn run_plan(plan: &ExperimentPlan) -> Result<ComparisonReport, ExperimentError> {
    plan.validate()?;
    let mut runs = Vec::new();
    for &seed in &plan.seeds {
        let loaded = load_corpus(plan, seed)?;
        let conditions = plan
            .conditions
            .iter()
            .map(|c| run_condition(plan, c, &loaded.corpus, &loaded.corpus, &loaded, seed))
            .collect::<Result<Vec<_>, _>>()?;
        let deltas = deltas(plan, &conditions);
        runs.push(SeedRun { seed, conditions, deltas });
    }
    Ok(ComparisonReport { plan: plan.name.clone(), plan_hash: plan.hash(), runs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOutResult {
    pub name: String,
    pub seed: u64,
    /// Unweighted mean primary recall over the held-out datasets.
    pub held_out_recall: f64,
    pub report: EvalReport,
    pub errors: ErrorBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOutReport {
    pub plan: String,
    pub plan_hash: String,
    pub held_out: HeldOut,
    pub runs: Vec<Vec<HeldOutResult>>,
}

/// Trains each condition on the held-in datasets only and evaluates the
/// held-out datasets against the full pool.
pub fn run_held_out(plan: &ExperimentPlan, held_out: &HeldOut) -> Result<HeldOutReport, ExperimentError> {
    plan.validate()?;
    let mut runs = Vec::new();
    for &seed in &plan.seeds {
        let loaded = load_corpus(plan, seed)?;
        let (held_in, held) = split_held_out(&loaded.corpus, held_out, seed)?;
        let mut results = Vec::new();
        for cond in &plan.conditions {
            let (params, _) = fit_condition(plan, cond, &held_in, loaded.features.as_ref(), loaded.dim, seed)?;
            let (EvalRun { report, errors }, _) = evaluate_condition(
                &ExperimentPlan { local_pool: false, ..plan.clone() },
                cond,
                &params,
                &held,
                loaded.features.as_ref(),
                seed,
            )?;
            info!(condition = %cond.name, seed, recall = report.average, "held-out condition done");
            results.push(HeldOutResult { name: cond.name.clone(), seed, held_out_recall: report.average, report, errors });
        }
        runs.push(results);
    }
    Ok(HeldOutReport { plan: plan.name.clone(), plan_hash: plan.hash(), held_out: held_out.clone(), runs })
}

/// Compact per-seed, per-condition table of the headline numbers.
pub fn render_summary(report: &ComparisonReport) -> String {
    let mut out = String::from("seed  condition             average  wrong_modality  wrong_domain  other   failed\n");
    for run in &report.runs {
        for c in &run.conditions {
            let e = &c.global_errors;
            writeln!(
                out,
                "{:<4}  {:<20}  {:>7.4}  {:>14.4}  {:>12.4}  {:>6.4}  {:>6}",
                run.seed, c.name, c.global.average, e.wrong_modality, e.wrong_domain, e.other, e.failed
            )
            .unwrap();
        }
    }
    out
}

pub fn render_held_out_summary(report: &HeldOutReport) -> String {
    let mut out = String::from("seed  condition             held_out_recall\n");
    for run in &report.runs {
        for r in run {
            writeln!(out, "{:<4}  {:<20}  {:>15.4}", r.seed, r.name, r.held_out_recall).unwrap();
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub plan: String,
    pub plan_hash: String,
    pub seeds: Vec<u64>,
    /// File name → SHA-256 of its contents.
    pub artifacts: BTreeMap<String, String>,
}

fn write_artifact(dir: &Path, name: &str, contents: &str, artifacts: &mut BTreeMap<String, String>) -> std::io::Result<()> {
    std::fs::write(dir.join(name), contents)?;
    artifacts.insert(name.to_string(), hex(&Sha256::digest(contents.as_bytes())));
    Ok(())
}

/// Writes per-condition reports, delta tables, a summary and a manifest.
pub fn write_run_dir(dir: &Path, plan: &ExperimentPlan, report: &ComparisonReport) -> Result<Manifest, ExperimentError> {
    std::fs::create_dir_all(dir)?;
    let mut artifacts = BTreeMap::new();
    for run in &report.runs {
        for c in &run.conditions {
            let stem = format!("seed{}-{}", run.seed, c.name);
            for (fmt, ext) in [(ReportFormat::Text, "txt"), (ReportFormat::Csv, "csv")] {
                let body = render_report(&c.global, &c.global_errors, None, fmt);
                write_artifact(dir, &format!("{stem}-global.{ext}"), &body, &mut artifacts)?;
            }
            if let (Some(l), Some(e)) = (&c.local, &c.local_errors) {
                write_artifact(dir, &format!("{stem}-local.csv"), &render_report(l, e, None, ReportFormat::Csv), &mut artifacts)?;
            }
        }
        if let (Some(b), Some(t)) = (&plan.baseline, &plan.treatment) {
            let (bc, tc) = (run.condition(b).expect("validated"), run.condition(t).expect("validated"));
            for (fmt, ext) in [(ReportFormat::Text, "txt"), (ReportFormat::Csv, "csv")] {
                let body = render_report(&tc.global, &tc.global_errors, Some((&bc.global, &bc.global_errors)), fmt);
                write_artifact(dir, &format!("seed{}-delta.{ext}", run.seed), &body, &mut artifacts)?;
            }
        }
    }
    write_artifact(dir, "summary.txt", &render_summary(report), &mut artifacts)?;
    let report_json = serde_json::to_string(report)?;
    write_artifact(dir, "report.json", &report_json, &mut artifacts)?;
    let manifest = Manifest { plan: plan.name.clone(), plan_hash: plan.hash(), seeds: plan.seeds.clone(), artifacts };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn write_held_out_dir(dir: &Path, plan: &ExperimentPlan, report: &HeldOutReport) -> Result<Manifest, ExperimentError> {
    std::fs::create_dir_all(dir)?;
    let mut artifacts = BTreeMap::new();
    write_artifact(dir, "held_out_summary.txt", &render_held_out_summary(report), &mut artifacts)?;
    write_artifact(dir, "held_out.json", &serde_json::to_string(report)?, &mut artifacts)?;
    let manifest = Manifest { plan: plan.name.clone(), plan_hash: plan.hash(), seeds: plan.seeds.clone(), artifacts };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Stable 64-bit digest of a value's JSON form.
pub fn digest<T: Serialize>(value: &T) -> u64 {
    fnv1a64(&serde_json::to_vec(value).expect("value serializes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_plan() -> ExperimentPlan {
        ExperimentPlan::from_toml(
            r#"
name = "tiny"
seeds = [1]
baseline = "a"
treatment = "b"

[synth]
queries_per_task = 24
pool_per_task = 24
topics_per_task = 6
dim = 16

[train]
epochs = 1
batch_size = 8

[[conditions]]
name = "a"
use_instructions = true

[[conditions]]
name = "b"
use_instructions = true
"#,
        )
        .unwrap()
    }

    #[test]
    fn identical_conditions_have_zero_deltas() {
        let report = run_plan(&tiny_plan()).unwrap();
        let deltas = report.runs[0].deltas.as_ref().unwrap();
        assert!(!deltas.is_empty());
        assert!(deltas.iter().all(|r| r.delta == Some(0.0)));
    }

    #[test]
    fn plan_validation() {
        let mut p = tiny_plan();
        p.conditions.push(p.conditions[0].clone());
        assert!(matches!(p.validate(), Err(ExperimentError::InvalidPlan(_))));
        let mut p = tiny_plan();
        p.treatment = Some("nope".into());
        assert!(p.validate().is_err());
        assert!(ExperimentPlan::from_toml("name = 1").is_err());
        assert!(ExperimentPlan::from_toml("name = \"x\"\nbogus = 1\nconditions = []").is_err());
    }

    #[test]
    fn held_out_rejects_degenerate_split() {
        let p = tiny_plan();
        let all = HeldOut::Names(vec!["t2i".into(), "t2t".into(), "i2t".into(), "i2i".into()]);
        assert!(matches!(run_held_out(&p, &all), Err(ExperimentError::Synth(SynthError::NothingHeldIn))));
    }
}
