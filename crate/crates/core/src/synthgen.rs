//! Seeded synthetic corpora with planted topic, domain and modality
//! structure.
//!
//! Every dataset covers one task. Its topics are spread over the domains;
//! each topic owns a few words from its domain's vocabulary, so topics of
//! one domain overlap. A topic's image center is a fixed random linear map
//! of the hashed bag of its words, which makes cross-modal alignment
//! learnable by the linear toy encoders. All images share a common offset
//! direction. For every topic the pool also holds same-topic candidates of
//! a wrong modality.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Zipf};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    fnv1a64, parse_corpus, write_corpus, Candidate, Corpus, DataError, Domain, Instruction, Modality, Pool,
    QueryInstance, TaskKind,
};
use crate::encoders::hash_features;
use crate::index::{read_embeddings, write_embeddings, EmbeddingStore, IndexError};
use crate::linalg::{normalize_in_place, Matrix};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    ConfigInvalid(String),
    #[error("held-out set is empty or matches nothing")]
    EmptyHeldOut,
    #[error("held-out set covers every query; nothing left to train on")]
    NothingHeldIn,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_domains: usize,
    pub tasks: Vec<TaskKind>,
    pub queries_per_task: usize,
    /// Target-modality candidates per dataset.
    pub pool_per_task: usize,
    pub dim: usize,
    /// Norm of the per-image Gaussian noise around its topic center.
    pub cluster_spread: f64,
    /// Probability that a text token comes from the topic vocabulary rather
    /// than the shared background vocabulary.
    pub cross_modal_link_strength: f64,
    pub seed: u64,
    pub topics_per_task: usize,
    /// Wrong-modality same-topic candidates, as a fraction of `pool_per_task`.
    /// Any positive ratio plants at least one per topic.
    pub distractor_ratio: f64,
    pub words_per_topic: usize,
    pub domain_vocab: usize,
    pub background_vocab: usize,
    /// Zipf exponent of background word frequencies (0 = uniform).
    pub background_zipf: f64,
    pub text_length: usize,
    /// Weight of the shared image offset direction.
    pub image_offset: f64,
    /// Same-topic wrong-modality distractors annotated as hard negatives
    /// of each query.
    pub negatives_per_query: usize,
    /// Per-task query counts keyed by task short name, overriding
    /// `queries_per_task`; a task with zero queries is left out entirely.
    pub queries_override: BTreeMap<String, usize>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_domains: 4,
            tasks: vec![TaskKind::T2I, TaskKind::T2T, TaskKind::I2T, TaskKind::I2I],
            queries_per_task: 500,
            pool_per_task: 400,
            dim: 128,
            cluster_spread: 1.0,
            cross_modal_link_strength: 0.5,
            seed: 0,
            topics_per_task: 24,
            distractor_ratio: 0.1,
            words_per_topic: 8,
            domain_vocab: 16,
            background_vocab: 400,
            background_zipf: 1.0,
            text_length: 8,
            image_offset: 0.5,
            negatives_per_query: 1,
            queries_override: BTreeMap::new(),
        }
    }
}

impl SynthConfig {
    pub fn queries_for(&self, task: TaskKind) -> usize {
        self.queries_override.get(task.short_name()).copied().unwrap_or(self.queries_per_task)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::ConfigInvalid(m.to_string()));
        if self.n_domains == 0 || self.dim == 0 || self.topics_per_task == 0 || self.text_length == 0 {
            return bad("counts must be positive");
        }
        if self.tasks.is_empty() {
            return bad("at least one task is required");
        }
        let unique: HashSet<_> = self.tasks.iter().collect();
        if unique.len() != self.tasks.len() {
            return bad("tasks must be distinct");
        }
        if let Some(k) = self.queries_override.keys().find(|k| k.parse::<TaskKind>().is_err()) {
            return Err(SynthError::ConfigInvalid(format!("unknown task {k:?} in queries_override")));
        }
        if self.pool_per_task < self.topics_per_task {
            return bad("pool_per_task must give every topic at least one candidate");
        }
        if !(self.cluster_spread > 0.0 && self.cluster_spread.is_finite()) {
            return bad("cluster_spread must be positive");
        }
        if !(0.0..=1.0).contains(&self.cross_modal_link_strength) {
            return bad("cross_modal_link_strength must lie in [0, 1]");
        }
        if !(self.distractor_ratio >= 0.0 && self.distractor_ratio.is_finite()) {
            return bad("distractor_ratio must be non-negative");
        }
        if !(self.background_zipf >= 0.0 && self.background_zipf.is_finite()) {
            return bad("background_zipf must be non-negative");
        }
        if self.words_per_topic == 0 || self.domain_vocab < self.words_per_topic || self.background_vocab == 0 {
            return bad("vocabularies too small");
        }
        Ok(())
    }
}

pub fn dataset_name(task: TaskKind) -> String {
    format!("synth-{}", task.short_name())
}

pub fn domain_label(i: usize) -> String {
    match i {
        0..4 => Domain::CANONICAL[i].to_string(),
        _ => format!("synth{i}"),
    }
}

/// Ground-truth topic of every query and candidate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    pub queries: BTreeMap<String, u32>,
    pub candidates: BTreeMap<String, u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LabelLine {
    id: String,
    kind: String,
    topic: u32,
}

impl Labels {
    pub fn write<W: Write>(&self, mut out: W) -> Result<(), SynthError> {
        for (kind, map) in [("query", &self.queries), ("candidate", &self.candidates)] {
            for (id, &topic) in map {
                serde_json::to_writer(&mut out, &LabelLine { id: id.clone(), kind: kind.into(), topic })?;
                out.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self, SynthError> {
        let mut labels = Labels::default();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let l: LabelLine = serde_json::from_str(&line)?;
            match l.kind.as_str() {
                "query" => labels.queries.insert(l.id, l.topic),
                _ => labels.candidates.insert(l.id, l.topic),
            };
        }
        Ok(labels)
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub corpus: Corpus,
    /// Raw image features keyed by image reference (feature-mode store).
    pub features: EmbeddingStore,
    pub labels: Labels,
}

/// File names inside a synth output directory.
pub const QUERIES_FILE: &str = "queries.jsonl";
pub const CANDIDATES_FILE: &str = "candidates.jsonl";
pub const FEATURES_FILE: &str = "features.unir";
pub const LABELS_FILE: &str = "labels.jsonl";

#[derive(Debug, Clone)]
pub struct SynthPaths {
    pub queries: PathBuf,
    pub candidates: PathBuf,
    pub features: PathBuf,
    pub labels: PathBuf,
}

impl SynthPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            queries: dir.join(QUERIES_FILE),
            candidates: dir.join(CANDIDATES_FILE),
            features: dir.join(FEATURES_FILE),
            labels: dir.join(LABELS_FILE),
        }
    }
}

impl SynthCorpus {
    pub fn write(&self, dir: &Path) -> Result<SynthPaths, SynthError> {
        std::fs::create_dir_all(dir)?;
        let paths = SynthPaths::in_dir(dir);
        write_corpus(&self.corpus, &paths.queries, &paths.candidates)?;
        write_embeddings(&self.features, &paths.features)?;
        let mut out = std::io::BufWriter::new(std::fs::File::create(&paths.labels)?);
        self.labels.write(&mut out)?;
        out.flush()?;
        Ok(paths)
    }

    /// Loads a directory written by [`SynthCorpus::write`] (the config is
    /// not stored; the default is returned in its place).
    pub fn read(dir: &Path) -> Result<Self, SynthError> {
        let paths = SynthPaths::in_dir(dir);
        let corpus = parse_corpus(&paths.queries, &paths.candidates)?;
        let features = read_embeddings(&paths.features)?;
        let labels = Labels::read(std::io::BufReader::new(std::fs::File::open(&paths.labels)?))?;
        Ok(Self { config: SynthConfig::default(), corpus, features, labels })
    }
}

fn sub_rng(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(label.as_bytes()))
}

fn target_phrase(m: Modality) -> [&'static str; 4] {
    match m {
        Modality::Image => ["show me a photo of", "find an image depicting", "retrieve a picture showing", "identify the image of"],
        Modality::Text => ["retrieve a passage describing", "find a caption about", "give me a description of", "fetch text that explains"],
        Modality::ImageText => [
            "find an illustrated article on",
            "retrieve a captioned photo of",
            "show a picture with text about",
            "locate an image and caption for",
        ],
    }
}

fn source_phrase(m: Modality) -> [&'static str; 4] {
    match m {
        Modality::Image => ["this image", "the photo", "this picture", "the given snapshot"],
        Modality::Text => ["this query", "the sentence", "this request", "the given words"],
        Modality::ImageText => ["this image and question", "the photo and text", "this picture and note", "the given image with text"],
    }
}

/// Four templated paraphrases combining target-modality wording, source
/// wording and, in two of them, the domain.
pub fn instruction_texts(task: TaskKind, domain: &str) -> Vec<String> {
    let (t, q) = (target_phrase(task.target_modality()), source_phrase(task.query_modality()));
    vec![
        format!("{} {}", t[0], q[0]),
        format!("{} {} from {}", t[1], q[1], domain),
        format!("{} {}", t[2], q[2]),
        format!("{} {} in {}", t[3], q[3], domain),
    ]
}

fn distractor_modality(task: TaskKind) -> Modality {
    let (q, t) = (task.query_modality(), task.target_modality());
    if q != t {
        q
    } else if t == Modality::Text {
        Modality::Image
    } else {
        Modality::Text
    }
}

struct Topic {
    id: u32,
    domain: usize,
    words: Vec<String>,
    center: Vec<f64>,
}

struct World<'a> {
    cfg: &'a SynthConfig,
    background: Vec<String>,
    zipf: Zipf<f64>,
    offset: Vec<f64>,
    normal: Normal<f64>,
}

impl World<'_> {
    fn text(&self, topic: &Topic, domains: &[String], rng: &mut ChaCha8Rng) -> String {
        let mut tokens = Vec::with_capacity(self.cfg.text_length + 1);
        for _ in 0..self.cfg.text_length {
            let w = if rng.random_bool(self.cfg.cross_modal_link_strength) {
                topic.words.choose(rng).expect("non-empty vocabulary")
            } else {
                &self.background[self.zipf.sample(rng) as usize - 1]
            };
            tokens.push(w.as_str());
        }
        let at = rng.random_range(0..=tokens.len());
        tokens.insert(at, &domains[topic.domain]);
        tokens.join(" ")
    }

    fn image(&self, topic: &Topic, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let per_coord = self.cfg.cluster_spread / (self.cfg.dim as f64).sqrt();
        topic
            .center
            .iter()
            .zip(&self.offset)
            .map(|(c, o)| (c + self.cfg.image_offset * o + per_coord * self.normal.sample(rng)) as f32)
            .collect()
    }
}

fn gaussian_unit(dim: usize, normal: &Normal<f64>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
    normalize_in_place(&mut v);
    v
}

pub fn generate(config: &SynthConfig) -> Result<SynthCorpus, SynthError> {
    config.validate()?;
    let dim = config.dim;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut world_rng = sub_rng(config.seed, "world");
    let domains: Vec<String> = (0..config.n_domains).map(domain_label).collect();
    let domain_vocab: Vec<Vec<String>> =
        (0..config.n_domains).map(|d| (0..config.domain_vocab).map(|j| format!("d{d}w{j}")).collect()).collect();
    let background = (0..config.background_vocab).map(|j| format!("bg{j}")).collect();
    let mixing = Matrix::from_vec(
        dim,
        dim,
        (0..dim * dim).map(|_| normal.sample(&mut world_rng) / (dim as f64).sqrt()).collect(),
    );
    let offset = gaussian_unit(dim, &normal, &mut world_rng);
    let zipf = Zipf::new(config.background_vocab as f64, config.background_zipf).expect("validated zipf parameters");
    let world = World { cfg: config, background, zipf, offset, normal };

    let mut queries = Vec::new();
    let mut candidates = Vec::new();
    let mut features = EmbeddingStore::new_feature(dim);
    let mut labels = Labels::default();
    let mut next_topic = 0u32;

    for &task in &config.tasks {
        let n_queries = config.queries_for(task);
        if n_queries == 0 {
            continue;
        }
        let dataset = dataset_name(task);
        let tag = task.short_name();
        let mut rng = sub_rng(config.seed, &dataset);
        let topics: Vec<Topic> = (0..config.topics_per_task)
            .map(|t| {
                let domain = t % config.n_domains;
                let words: Vec<String> =
                    domain_vocab[domain].choose_multiple(&mut rng, config.words_per_topic).cloned().collect();
                let latent = hash_features(&words.join(" "), dim);
                let mut center = mixing.matvec(&latent);
                normalize_in_place(&mut center);
                let id = next_topic;
                next_topic += 1;
                Topic { id, domain, words, center }
            })
            .collect();

        let mut emit_candidate = |modality: Modality, topic: &Topic, n: usize, rng: &mut ChaCha8Rng| -> Result<String, SynthError> {
            let did = format!("{tag}-c{n:05}");
            let text = modality.has_text().then(|| world.text(topic, &domains, rng));
            let image_ref = if modality.has_image() {
                let r = format!("img:{did}");
                features.push_row(&r, &world.image(topic, rng))?;
                Some(r)
            } else {
                None
            };
            candidates.push(Candidate {
                did: did.clone(),
                modality,
                domain: Domain::new(domains[topic.domain].as_str())?,
                text,
                image_ref,
                dataset: Some(dataset.clone()),
            });
            labels.candidates.insert(did.clone(), topic.id);
            Ok(did)
        };

        let target = task.target_modality();
        let mut n_distractors = (config.pool_per_task as f64 * config.distractor_ratio).round() as usize;
        if config.distractor_ratio > 0.0 {
            n_distractors = n_distractors.max(topics.len());
        }
        let mut by_topic: Vec<Vec<String>> = vec![Vec::new(); topics.len()];
        let mut n = 0;
        for i in 0..config.pool_per_task {
            let t = i % topics.len();
            by_topic[t].push(emit_candidate(target, &topics[t], n, &mut rng)?);
            n += 1;
        }
        let wrong = distractor_modality(task);
        let mut distractors: Vec<Vec<String>> = vec![Vec::new(); topics.len()];
        for i in 0..n_distractors {
            let t = i % topics.len();
            distractors[t].push(emit_candidate(wrong, &topics[t], n, &mut rng)?);
            n += 1;
        }

        let instruction_sets: Vec<Vec<Instruction>> = domains
            .iter()
            .map(|d| {
                let domain = Domain::new(d.as_str())?;
                Ok(instruction_texts(task, d)
                    .into_iter()
                    .map(|text| Instruction::new(text, task, format!("retrieve {} for {}", target.as_str(), task.query_modality().as_str()), domain.clone()))
                    .collect())
            })
            .collect::<Result<_, DataError>>()?;

        let qmod = task.query_modality();
        for i in 0..n_queries {
            let t = rng.random_range(0..topics.len());
            let topic = &topics[t];
            let qid = format!("{tag}-q{i:05}");
            let text = qmod.has_text().then(|| world.text(topic, &domains, &mut rng));
            let image_ref = if qmod.has_image() {
                let r = format!("img:{qid}");
                features.push_row(&r, &world.image(topic, &mut rng))?;
                Some(r)
            } else {
                None
            };
            let negatives: Vec<String> = distractors[t]
                .choose_multiple(&mut rng, config.negatives_per_query)
                .cloned()
                .collect();
            let mut instructions = instruction_sets[topic.domain].clone();
            instructions.shuffle(&mut rng);
            queries.push(QueryInstance {
                qid: qid.clone(),
                task,
                dataset: dataset.clone(),
                modality: qmod,
                text,
                image_ref,
                instructions,
                positives: by_topic[t].clone(),
                negatives,
            });
            labels.queries.insert(qid, topic.id);
        }
    }
    let corpus = Corpus::new(queries, Pool::new(candidates)?)?;
    Ok(SynthCorpus { config: config.clone(), corpus, features, labels })
}

/// Which queries to hold out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeldOut {
    /// Dataset names or task short names.
    Names(Vec<String>),
    /// This many datasets chosen with the split seed.
    Random(usize),
}

/// Splits queries into held-in and held-out corpora; both keep the full
/// candidate pool.
pub fn split_held_out(corpus: &Corpus, held_out: &HeldOut, seed: u64) -> Result<(Corpus, Corpus), SynthError> {
    let datasets = corpus.datasets();
    let chosen: Vec<String> = match held_out {
        HeldOut::Names(names) => datasets
            .iter()
            .filter(|d| {
                names.iter().any(|n| {
                    n == *d
                        || corpus
                            .queries
                            .iter()
                            .any(|q| &q.dataset == *d && q.task.short_name() == n.to_ascii_lowercase())
                })
            })
            .cloned()
            .collect(),
        HeldOut::Random(n) => {
            let mut rng = sub_rng(seed, "held-out");
            let mut picked: Vec<String> = datasets.choose_multiple(&mut rng, *n).cloned().collect();
            picked.sort_by_key(|d| datasets.iter().position(|x| x == d));
            picked
        }
    };
    if chosen.is_empty() {
        return Err(SynthError::EmptyHeldOut);
    }
    if chosen.len() == datasets.len() {
        return Err(SynthError::NothingHeldIn);
    }
    let held_in: Vec<String> = datasets.into_iter().filter(|d| !chosen.contains(d)).collect();
    Ok((corpus.with_datasets(&held_in), corpus.with_datasets(&chosen)))
}

/// Permutes positive lists among queries of the same dataset: a control
/// where any model should score near chance.
pub fn shuffle_labels(corpus: &Corpus, seed: u64) -> Corpus {
    let mut rng = sub_rng(seed, "shuffle");
    let mut out = corpus.clone();
    for dataset in corpus.datasets() {
        let idx: Vec<usize> = (0..out.queries.len()).filter(|&i| out.queries[i].dataset == dataset).collect();
        let mut lists: Vec<Vec<String>> = idx.iter().map(|&i| out.queries[i].positives.clone()).collect();
        lists.shuffle(&mut rng);
        for (&i, l) in idx.iter().zip(lists) {
            out.queries[i].positives = l;
        }
    }
    out
}
