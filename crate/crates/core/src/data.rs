//! Unified multimodal retrieval data model: queries with instructions,
//! heterogeneous candidate pools, and the line-delimited JSON corpus files.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("malformed record at {file}:{line}: {reason}")]
    MalformedRecord { file: String, line: usize, reason: String },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("query {qid:?} references unknown candidate {did:?}")]
    DanglingReference { qid: String, did: String },
    #[error("modality mismatch for {0:?}")]
    ModalityMismatch(String),
    #[error("invalid domain {0:?}: must be non-empty lowercase ascii")]
    InvalidDomain(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DataError {
    /// Stable machine-readable tag.
    pub fn code(&self) -> &'static str {
        match self {
            DataError::MalformedRecord { .. } => "MALFORMED_RECORD",
            DataError::DuplicateId(_) => "DUPLICATE_ID",
            DataError::DanglingReference { .. } => "DANGLING_REF",
            DataError::ModalityMismatch(_) => "MODALITY_MISMATCH",
            DataError::InvalidDomain(_) => "INVALID_DOMAIN",
            DataError::Io(_) => "IO",
        }
    }
}

/// Modality of a query or candidate payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Text,
    Image,
    ImageText,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Image, Modality::ImageText];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::ImageText => "image,text",
        }
    }

    pub fn has_text(self) -> bool {
        matches!(self, Modality::Text | Modality::ImageText)
    }

    pub fn has_image(self) -> bool {
        matches!(self, Modality::Image | Modality::ImageText)
    }

    /// Checks that the payloads present match this modality exactly.
    pub fn matches_payload(self, text: Option<&str>, image: Option<&str>) -> bool {
        self.has_text() == text.is_some() && self.has_image() == image.is_some()
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(Modality::Text),
            "image" => Ok(Modality::Image),
            "image,text" => Ok(Modality::ImageText),
            other => Err(format!("unknown modality {other:?}")),
        }
    }
}

impl Serialize for Modality {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Modality {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The eight query → candidate retrieval tasks, numbered 1..=8 in the file
/// format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    T2I,
    T2T,
    T2IT,
    I2T,
    I2I,
    IT2T,
    IT2I,
    IT2IT,
}

impl TaskKind {
    pub const ALL: [TaskKind; 8] = [
        TaskKind::T2I,
        TaskKind::T2T,
        TaskKind::T2IT,
        TaskKind::I2T,
        TaskKind::I2I,
        TaskKind::IT2T,
        TaskKind::IT2I,
        TaskKind::IT2IT,
    ];

    pub fn query_modality(self) -> Modality {
        use TaskKind::*;
        match self {
            T2I | T2T | T2IT => Modality::Text,
            I2T | I2I => Modality::Image,
            IT2T | IT2I | IT2IT => Modality::ImageText,
        }
    }

    pub fn target_modality(self) -> Modality {
        use TaskKind::*;
        match self {
            T2I | I2I | IT2I => Modality::Image,
            T2T | I2T | IT2T => Modality::Text,
            T2IT | IT2IT => Modality::ImageText,
        }
    }

    /// Task number as used in the queries file (1..=8).
    pub fn number(self) -> u8 {
        Self::ALL.iter().position(|&t| t == self).unwrap() as u8 + 1
    }

    pub fn from_number(n: u8) -> Option<Self> {
        Self::ALL.get(usize::from(n).checked_sub(1)?).copied()
    }

    pub fn short_name(self) -> &'static str {
        use TaskKind::*;
        match self {
            T2I => "t2i",
            T2T => "t2t",
            T2IT => "t2it",
            I2T => "i2t",
            I2I => "i2i",
            IT2T => "it2t",
            IT2I => "it2i",
            IT2IT => "it2it",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = self.query_modality();
        let c = self.target_modality();
        let sym = |m: Modality| match m {
            Modality::Text => "qt",
            Modality::Image => "qi",
            Modality::ImageText => "(qi,qt)",
        };
        let csym = |m: Modality| match m {
            Modality::Text => "ct",
            Modality::Image => "ci",
            Modality::ImageText => "(ci,ct)",
        };
        write!(f, "{}. {}->{}", self.number(), sym(q), csym(c))
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Ok(n) = s.parse::<u8>() {
            return Self::from_number(n).ok_or_else(|| format!("task number {n} out of range 1..=8"));
        }
        let lower = s.to_ascii_lowercase();
        Self::ALL
            .iter()
            .copied()
            .find(|t| t.short_name() == lower)
            .ok_or_else(|| format!("unknown task {s:?}"))
    }
}

impl Serialize for TaskKind {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.number())
    }
}

impl<'de> Deserialize<'de> for TaskKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let n = u8::deserialize(d)?;
        TaskKind::from_number(n).ok_or_else(|| serde::de::Error::custom(format!("task {n} out of range 1..=8")))
    }
}

/// Lowercase ASCII domain label ("news", "misc", "fashion", "wiki", or any
/// synthetic domain).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct Domain(String);

impl Domain {
    pub const CANONICAL: [&'static str; 4] = ["news", "misc", "fashion", "wiki"];

    pub fn new(label: impl Into<String>) -> Result<Self, DataError> {
        let label = label.into();
        let ok = !label.is_empty()
            && label.is_ascii()
            && !label.chars().any(|c| c.is_ascii_uppercase() || c.is_whitespace());
        if ok {
            Ok(Self(label))
        } else {
            Err(DataError::InvalidDomain(label))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_canonical(&self) -> bool {
        Self::CANONICAL.contains(&self.0.as_str())
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for Domain {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Domain::new(s).map_err(serde::de::Error::custom)
    }
}

/// A task instruction annotated with intent, domain and modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct Instruction {
    pub text: String,
    pub task: TaskKind,
    pub intent: String,
    pub domain: Domain,
    pub query_modality: Modality,
    pub target_modality: Modality,
}

impl Instruction {
    pub fn new(text: impl Into<String>, task: TaskKind, intent: impl Into<String>, domain: Domain) -> Self {
        Self {
            text: text.into(),
            task,
            intent: intent.into(),
            domain,
            query_modality: task.query_modality(),
            target_modality: task.target_modality(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub did: String,
    pub modality: Modality,
    pub domain: Domain,
    pub text: Option<String>,
    pub image_ref: Option<String>,
    /// Source dataset, when the candidates file carries one.
    pub dataset: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryInstance {
    pub qid: String,
    pub task: TaskKind,
    pub dataset: String,
    pub modality: Modality,
    pub text: Option<String>,
    pub image_ref: Option<String>,
    pub instructions: Vec<Instruction>,
    pub positives: Vec<String>,
    pub negatives: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PoolStats {
    pub total: usize,
    pub by_modality: BTreeMap<String, usize>,
    pub by_domain: BTreeMap<String, usize>,
}

impl PoolStats {
    pub fn modality(&self, m: Modality) -> usize {
        self.by_modality.get(m.as_str()).copied().unwrap_or(0)
    }

    pub fn domain(&self, d: &str) -> usize {
        self.by_domain.get(d).copied().unwrap_or(0)
    }
}

/// Heterogeneous candidate pool with an id index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Pool {
    candidates: Vec<Candidate>,
    by_id: HashMap<String, usize>,
    stats: PoolStats,
}

impl Pool {
    pub fn new(candidates: Vec<Candidate>) -> Result<Self, DataError> {
        let mut by_id = HashMap::with_capacity(candidates.len());
        for (i, c) in candidates.iter().enumerate() {
            if !c.modality.matches_payload(c.text.as_deref(), c.image_ref.as_deref()) {
                return Err(DataError::ModalityMismatch(c.did.clone()));
            }
            if by_id.insert(c.did.clone(), i).is_some() {
                return Err(DataError::DuplicateId(c.did.clone()));
            }
        }
        let stats = compute_stats(&candidates);
        Ok(Self { candidates, by_id, stats })
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn index_of(&self, did: &str) -> Option<usize> {
        self.by_id.get(did).copied()
    }

    pub fn get(&self, did: &str) -> Option<&Candidate> {
        self.index_of(did).map(|i| &self.candidates[i])
    }

    pub fn stats(&self) -> &PoolStats {
        &self.stats
    }

    /// Sub-pool keeping the candidates accepted by `keep`, in pool order.
    pub fn filtered(&self, mut keep: impl FnMut(&Candidate) -> bool) -> Pool {
        let kept: Vec<Candidate> = self.candidates.iter().filter(|c| keep(c)).cloned().collect();
        Pool::new(kept).expect("subset of a valid pool is valid")
    }
}

fn compute_stats(candidates: &[Candidate]) -> PoolStats {
    let mut stats = PoolStats { total: candidates.len(), ..Default::default() };
    for c in candidates {
        *stats.by_modality.entry(c.modality.as_str().to_string()).or_default() += 1;
        *stats.by_domain.entry(c.domain.as_str().to_string()).or_default() += 1;
    }
    stats
}

/// Per-modality and per-domain counts for a pool.
pub fn pool_stats(pool: &Pool) -> PoolStats {
    pool.stats.clone()
}

/// A fully linked corpus: queries whose references all resolve in the pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub queries: Vec<QueryInstance>,
    pub pool: Pool,
}

impl Corpus {
    /// Validates cross references and query invariants.
    pub fn new(queries: Vec<QueryInstance>, pool: Pool) -> Result<Self, DataError> {
        let mut seen = HashSet::with_capacity(queries.len());
        for q in &queries {
            if !seen.insert(q.qid.as_str()) {
                return Err(DataError::DuplicateId(q.qid.clone()));
            }
            validate_query(q)?;
            for did in q.positives.iter().chain(&q.negatives) {
                if pool.index_of(did).is_none() {
                    return Err(DataError::DanglingReference { qid: q.qid.clone(), did: did.clone() });
                }
            }
        }
        Ok(Self { queries, pool })
    }

    /// Dataset names in first-appearance order.
    pub fn datasets(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.queries
            .iter()
            .filter(|q| seen.insert(q.dataset.as_str()))
            .map(|q| q.dataset.clone())
            .collect()
    }

    /// Non-fatal observations, e.g. instruction counts other than four.
    pub fn lints(&self) -> Vec<String> {
        self.queries
            .iter()
            .filter(|q| q.instructions.len() != 4)
            .map(|q| format!("query {:?} has {} instructions (expected 4)", q.qid, q.instructions.len()))
            .collect()
    }

    /// Queries of the given datasets with the full pool kept intact.
    pub fn with_datasets(&self, datasets: &[String]) -> Corpus {
        let queries = self.queries.iter().filter(|q| datasets.contains(&q.dataset)).cloned().collect();
        Corpus { queries, pool: self.pool.clone() }
    }

    /// Candidate pool local to one dataset: candidates tagged with that
    /// dataset, or, when the pool carries no dataset tags, every candidate
    /// referenced by the dataset's queries.
    pub fn local_pool(&self, dataset: &str) -> Pool {
        if self.pool.candidates().iter().any(|c| c.dataset.is_some()) {
            return self.pool.filtered(|c| c.dataset.as_deref() == Some(dataset));
        }
        let referenced: HashSet<&str> = self
            .queries
            .iter()
            .filter(|q| q.dataset == dataset)
            .flat_map(|q| q.positives.iter().chain(&q.negatives))
            .map(String::as_str)
            .collect();
        self.pool.filtered(|c| referenced.contains(c.did.as_str()))
    }
}

fn validate_query(q: &QueryInstance) -> Result<(), DataError> {
    if q.modality != q.task.query_modality() {
        return Err(DataError::ModalityMismatch(q.qid.clone()));
    }
    if !q.modality.matches_payload(q.text.as_deref(), q.image_ref.as_deref()) {
        return Err(DataError::ModalityMismatch(q.qid.clone()));
    }
    for inst in &q.instructions {
        if inst.task != q.task
            || inst.query_modality != inst.task.query_modality()
            || inst.target_modality != inst.task.target_modality()
        {
            return Err(DataError::ModalityMismatch(q.qid.clone()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CandidateRecord {
    did: String,
    modality: Modality,
    domain: Domain,
    txt: Option<String>,
    img: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dataset: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct InstructionRecord {
    text: String,
    intent: String,
    domain: Domain,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct QueryRecord {
    qid: String,
    task: TaskKind,
    dataset: String,
    modality: Modality,
    txt: Option<String>,
    img: Option<String>,
    instructions: Vec<InstructionRecord>,
    pos: Vec<String>,
    #[serde(default)]
    neg: Vec<String>,
}

fn malformed(file: &str, line: usize, reason: impl Into<String>) -> DataError {
    DataError::MalformedRecord { file: file.to_string(), line, reason: reason.into() }
}

/// Parses a candidates stream (one JSON record per non-blank line).
pub fn parse_candidates<R: BufRead>(reader: R, source: &str) -> Result<Pool, DataError> {
    let mut candidates = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CandidateRecord = serde_json::from_str(&line).map_err(|e| malformed(source, i + 1, e.to_string()))?;
        candidates.push(Candidate {
            did: rec.did,
            modality: rec.modality,
            domain: rec.domain,
            text: rec.txt,
            image_ref: rec.img,
            dataset: rec.dataset,
        });
    }
    Pool::new(candidates)
}

/// Parses a queries stream. Positives must be non-empty; instruction lists
/// must hold at least one entry.
pub fn parse_queries<R: BufRead>(reader: R, source: &str) -> Result<Vec<QueryInstance>, DataError> {
    let mut queries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: QueryRecord = serde_json::from_str(&line).map_err(|e| malformed(source, i + 1, e.to_string()))?;
        if rec.pos.is_empty() {
            return Err(malformed(source, i + 1, "query needs at least one positive candidate"));
        }
        if rec.instructions.is_empty() {
            return Err(malformed(source, i + 1, "query needs at least one instruction"));
        }
        if let Some(bad) = rec.instructions.iter().find(|inst| inst.text.trim().is_empty()) {
            return Err(malformed(source, i + 1, format!("empty instruction text (intent {:?})", bad.intent)));
        }
        let task = rec.task;
        queries.push(QueryInstance {
            qid: rec.qid,
            task,
            dataset: rec.dataset,
            modality: rec.modality,
            text: rec.txt,
            image_ref: rec.img,
            instructions: rec
                .instructions
                .into_iter()
                .map(|r| Instruction::new(r.text, task, r.intent, r.domain))
                .collect(),
            positives: rec.pos,
            negatives: rec.neg,
        });
    }
    Ok(queries)
}

/// Reads and validates a corpus from a queries file and a candidates file.
pub fn parse_corpus(queries_path: &Path, candidates_path: &Path) -> Result<Corpus, DataError> {
    let pool = parse_candidates(BufReader::new(File::open(candidates_path)?), &candidates_path.display().to_string())?;
    let queries = parse_queries(BufReader::new(File::open(queries_path)?), &queries_path.display().to_string())?;
    Corpus::new(queries, pool)
}

pub fn write_candidates<W: Write>(pool: &Pool, mut out: W) -> Result<(), DataError> {
    for c in pool.candidates() {
        let rec = CandidateRecord {
            did: c.did.clone(),
            modality: c.modality,
            domain: c.domain.clone(),
            txt: c.text.clone(),
            img: c.image_ref.clone(),
            dataset: c.dataset.clone(),
        };
        serde_json::to_writer(&mut out, &rec).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_queries<W: Write>(queries: &[QueryInstance], mut out: W) -> Result<(), DataError> {
    for q in queries {
        let rec = QueryRecord {
            qid: q.qid.clone(),
            task: q.task,
            dataset: q.dataset.clone(),
            modality: q.modality,
            txt: q.text.clone(),
            img: q.image_ref.clone(),
            instructions: q
                .instructions
                .iter()
                .map(|i| InstructionRecord { text: i.text.clone(), intent: i.intent.clone(), domain: i.domain.clone() })
                .collect(),
            pos: q.positives.clone(),
            neg: q.negatives.clone(),
        };
        serde_json::to_writer(&mut out, &rec).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_corpus(corpus: &Corpus, queries_path: &Path, candidates_path: &Path) -> Result<(), DataError> {
    let mut q = BufWriter::new(File::create(queries_path)?);
    write_queries(&corpus.queries, &mut q)?;
    q.flush()?;
    let mut c = BufWriter::new(File::create(candidates_path)?);
    write_candidates(&corpus.pool, &mut c)?;
    c.flush()?;
    Ok(())
}

/// FNV-1a 64-bit hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Picks one of the query's instructions uniformly, deterministically in
/// `(qid, seed)`.
pub fn select_instruction(q: &QueryInstance, seed: u64) -> &Instruction {
    debug_assert!(!q.instructions.is_empty());
    if q.instructions.len() == 1 {
        return &q.instructions[0];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(q.qid.as_bytes()) ^ seed.rotate_left(17));
    &q.instructions[rng.random_range(0..q.instructions.len())]
}

/// task → dataset → instruction strings, stored as JSON keyed by task number.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InstructionCatalog {
    pub tasks: BTreeMap<u8, BTreeMap<String, Vec<String>>>,
}

impl InstructionCatalog {
    pub fn insert(&mut self, task: TaskKind, dataset: &str, instructions: Vec<String>) {
        self.tasks.entry(task.number()).or_default().insert(dataset.to_string(), instructions);
    }

    pub fn get(&self, task: TaskKind, dataset: &str) -> Option<&[String]> {
        self.tasks.get(&task.number())?.get(dataset).map(Vec::as_slice)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path)?;
        let cat: Self = serde_json::from_str(&text).map_err(|e| malformed(&path.display().to_string(), e.line(), e.to_string()))?;
        for &n in cat.tasks.keys() {
            if TaskKind::from_number(n).is_none() {
                return Err(malformed(&path.display().to_string(), 0, format!("task {n} out of range")));
            }
        }
        Ok(cat)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::from)?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const FIXTURE_CANDIDATES: &str = r#"{"did":"c1","modality":"text","domain":"wiki","txt":"a paragraph","img":null}
{"did":"c2","modality":"image","domain":"news","txt":null,"img":"img/c2.jpg"}
{"did":"c3","modality":"image,text","domain":"wiki","txt":"captioned","img":"img/c3.jpg"}
{"did":"c4","modality":"image","domain":"fashion","txt":null,"img":"img/c4.jpg"}
{"did":"c5","modality":"text","domain":"misc","txt":"another","img":null}
"#;

    pub(crate) const FIXTURE_QUERIES: &str = r#"{"qid":"q1","task":1,"dataset":"d1","modality":"text","txt":"a dog","img":null,"instructions":[{"text":"find an image","intent":"match","domain":"news"}],"pos":["c2"],"neg":[]}
{"qid":"q2","task":2,"dataset":"d2","modality":"text","txt":"who is","img":null,"instructions":[{"text":"find a paragraph","intent":"answer","domain":"wiki"}],"pos":["c1"],"neg":["c5"]}
{"qid":"q3","task":8,"dataset":"d3","modality":"image,text","txt":"what is this","img":"img/q3.jpg","instructions":[{"text":"find a wiki pair","intent":"answer","domain":"wiki"}],"pos":["c3"],"neg":[]}
"#;

    fn fixture() -> Corpus {
        let pool = parse_candidates(FIXTURE_CANDIDATES.as_bytes(), "c").unwrap();
        let queries = parse_queries(FIXTURE_QUERIES.as_bytes(), "q").unwrap();
        Corpus::new(queries, pool).unwrap()
    }

    #[test]
    fn task_table_matches_the_eight_rows() {
        use Modality::*;
        let expected = [
            (Text, Image),
            (Text, Text),
            (Text, ImageText),
            (Image, Text),
            (Image, Image),
            (ImageText, Text),
            (ImageText, Image),
            (ImageText, ImageText),
        ];
        assert_eq!(TaskKind::ALL.len(), 8);
        for (i, t) in TaskKind::ALL.iter().enumerate() {
            assert_eq!(t.number() as usize, i + 1);
            assert_eq!((t.query_modality(), t.target_modality()), expected[i], "task {t}");
            assert_eq!(TaskKind::from_number(t.number()), Some(*t));
        }
        assert_eq!(TaskKind::from_number(0), None);
        assert_eq!(TaskKind::from_number(9), None);
    }

    #[test]
    fn fixture_parses_and_counts() {
        let corpus = fixture();
        assert_eq!(corpus.queries.len(), 3);
        let stats = pool_stats(&corpus.pool);
        assert_eq!(stats.total, 5);
        assert_eq!(stats.by_modality.values().sum::<usize>(), 5);
        assert_eq!(stats.by_domain.values().sum::<usize>(), 5);
        assert_eq!(stats.modality(Modality::Text), 2);
        assert_eq!(stats.modality(Modality::Image), 2);
        assert_eq!(stats.modality(Modality::ImageText), 1);
        assert_eq!(stats.domain("wiki"), 2);
    }

    #[test]
    fn duplicate_did_is_rejected() {
        let text = "{\"did\":\"c1\",\"modality\":\"text\",\"domain\":\"wiki\",\"txt\":\"a\",\"img\":null}\n\
                    {\"did\":\"c1\",\"modality\":\"text\",\"domain\":\"wiki\",\"txt\":\"b\",\"img\":null}\n";
        match parse_candidates(text.as_bytes(), "c") {
            Err(DataError::DuplicateId(id)) => assert_eq!(id, "c1"),
            other => panic!("expected DuplicateId, got {other:?}"),
        }
    }

    #[test]
    fn empty_positives_are_malformed() {
        let text = r#"{"qid":"q1","task":1,"dataset":"d","modality":"text","txt":"x","img":null,"instructions":[{"text":"i","intent":"m","domain":"news"}],"pos":[],"neg":[]}"#;
        match parse_queries(text.as_bytes(), "q") {
            Err(DataError::MalformedRecord { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected MalformedRecord, got {other:?}"),
        }
    }

    #[test]
    fn dangling_reference_is_reported() {
        let pool = parse_candidates(FIXTURE_CANDIDATES.as_bytes(), "c").unwrap();
        let text = FIXTURE_QUERIES.replace("\"pos\":[\"c2\"]", "\"pos\":[\"c99\"]");
        let queries = parse_queries(text.as_bytes(), "q").unwrap();
        match Corpus::new(queries, pool) {
            Err(DataError::DanglingReference { qid, did }) => {
                assert_eq!(qid, "q1");
                assert_eq!(did, "c99");
            }
            other => panic!("expected DanglingReference, got {other:?}"),
        }
    }

    #[test]
    fn modality_mismatches_are_rejected() {
        let bad_payload = r#"{"did":"c1","modality":"image,text","domain":"wiki","txt":"only text","img":null}"#;
        assert!(matches!(parse_candidates(bad_payload.as_bytes(), "c"), Err(DataError::ModalityMismatch(_))));

        let pool = parse_candidates(FIXTURE_CANDIDATES.as_bytes(), "c").unwrap();
        // task 4 expects an image query
        let text = FIXTURE_QUERIES.lines().next().unwrap().replace("\"task\":1", "\"task\":4");
        let queries = parse_queries(text.as_bytes(), "q").unwrap();
        assert!(matches!(Corpus::new(queries, pool), Err(DataError::ModalityMismatch(id)) if id == "q1"));
    }

    #[test]
    fn bad_json_and_bad_domain_report_line_numbers() {
        let text = format!("{}\nnot json\n", FIXTURE_CANDIDATES.lines().next().unwrap());
        assert!(matches!(
            parse_candidates(text.as_bytes(), "c"),
            Err(DataError::MalformedRecord { line: 2, .. })
        ));
        let upper = r#"{"did":"c1","modality":"text","domain":"Wiki","txt":"a","img":null}"#;
        assert!(matches!(parse_candidates(upper.as_bytes(), "c"), Err(DataError::MalformedRecord { line: 1, .. })));
    }

    #[test]
    fn round_trip_through_files() {
        let corpus = fixture();
        let dir = tempfile::tempdir().unwrap();
        let q = dir.path().join("q.jsonl");
        let c = dir.path().join("c.jsonl");
        write_corpus(&corpus, &q, &c).unwrap();
        let back = parse_corpus(&q, &c).unwrap();
        assert_eq!(back, corpus);
    }

    #[test]
    fn lints_flag_instruction_counts() {
        let corpus = fixture();
        assert_eq!(corpus.lints().len(), 3);
    }

    #[test]
    fn empty_pool_has_zero_stats() {
        let pool = Pool::new(vec![]).unwrap();
        let s = pool_stats(&pool);
        assert_eq!(s.total, 0);
        assert!(s.by_modality.is_empty() && s.by_domain.is_empty());
    }

    #[test]
    fn three_text_two_image_stats() {
        let mk = |i: usize, m: Modality| Candidate {
            did: format!("c{i}"),
            modality: m,
            domain: Domain::new("misc").unwrap(),
            text: m.has_text().then(|| "t".to_string()),
            image_ref: m.has_image().then(|| format!("img{i}")),
            dataset: None,
        };
        let pool = Pool::new(vec![
            mk(0, Modality::Text),
            mk(1, Modality::Text),
            mk(2, Modality::Text),
            mk(3, Modality::Image),
            mk(4, Modality::Image),
        ])
        .unwrap();
        let s = pool_stats(&pool);
        assert_eq!(s.modality(Modality::Text), 3);
        assert_eq!(s.modality(Modality::Image), 2);
        assert_eq!(s.modality(Modality::ImageText), 0);
    }

    fn query_with(n: usize) -> QueryInstance {
        let d = Domain::new("misc").unwrap();
        QueryInstance {
            qid: "q-uniform".into(),
            task: TaskKind::T2I,
            dataset: "d".into(),
            modality: Modality::Text,
            text: Some("x".into()),
            image_ref: None,
            instructions: (0..n).map(|i| Instruction::new(format!("inst {i}"), TaskKind::T2I, "m", d.clone())).collect(),
            positives: vec!["c".into()],
            negatives: vec![],
        }
    }

    #[test]
    fn singleton_instruction_always_selected() {
        let q = query_with(1);
        for seed in 0..50 {
            assert_eq!(select_instruction(&q, seed).text, "inst 0");
        }
    }

    #[test]
    fn selection_is_deterministic() {
        let q = query_with(4);
        let a = select_instruction(&q, 1234).text.clone();
        for _ in 0..10 {
            assert_eq!(select_instruction(&q, 1234).text, a);
        }
    }

    #[test]
    fn selection_is_uniform_over_seeds() {
        let q = query_with(4);
        let draws = 100_000u64;
        let mut counts = [0usize; 4];
        for seed in 0..draws {
            let t = &select_instruction(&q, seed).text;
            counts[t[5..].parse::<usize>().unwrap()] += 1;
        }
        let expected = draws as f64 / 4.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 3 degrees of freedom, p = 0.001 critical value
        assert!(chi2 < 16.27, "chi2 {chi2} counts {counts:?}");
        for c in counts {
            let frac = c as f64 / draws as f64;
            assert!((frac - 0.25).abs() <= 0.02, "fraction {frac}");
        }
    }

    #[test]
    fn catalog_round_trip() {
        let mut cat = InstructionCatalog::default();
        cat.insert(TaskKind::T2I, "d1", vec!["a".into(), "b".into(), "c".into(), "d".into()]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cat.json");
        cat.save(&p).unwrap();
        let back = InstructionCatalog::load(&p).unwrap();
        assert_eq!(back, cat);
        assert_eq!(back.get(TaskKind::T2I, "d1").unwrap().len(), 4);
        assert!(back.get(TaskKind::T2T, "d1").is_none());
    }

    #[test]
    fn local_pool_uses_references_without_tags() {
        let corpus = fixture();
        let local = corpus.local_pool("d2");
        let ids: Vec<&str> = local.candidates().iter().map(|c| c.did.as_str()).collect();
        assert_eq!(ids, vec!["c1", "c5"]);
    }
}
