//! Interaction logs: canonical types, ingestion, and student-level fold splitting.
//!
//! The canonical interchange is JSONL with one [`Interaction`] per line. Fields
//! that are not part of the schema are kept in [`Interaction::metadata`] and
//! written back on save, so `load ∘ save` is the identity.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("invalid column mapping: {0}")]
    Mapping(String),
    #[error("invalid split request: {0}")]
    Split(String),
    #[error("invalid log: {0}")]
    Invalid(String),
}

/// Source language of a submission.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    Java,
    Python,
    #[default]
    Other,
}

impl std::str::FromStr for Language {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "java" => Ok(Language::Java),
            "python" => Ok(Language::Python),
            "other" => Ok(Language::Other),
            other => Err(format!("unknown language `{other}`")),
        }
    }
}

/// One student-question event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub student_id: String,
    pub kc_id: String,
    pub question_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kc_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_text: Option<String>,
    #[serde(default)]
    pub answer_code: String,
    #[serde(serialize_with = "ser_bit", deserialize_with = "de_bit")]
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<i64>,
    #[serde(default)]
    pub language: Language,
    /// Fields not covered by the schema, preserved verbatim.
    #[serde(flatten)]
    pub metadata: BTreeMap<String, Value>,
}

fn ser_bit<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_u8(u8::from(*v))
}

fn de_bit<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
    let v = Value::deserialize(d)?;
    match v.as_i64() {
        Some(0) => Ok(false),
        Some(1) => Ok(true),
        _ => Err(serde::de::Error::custom("correct must be 0 or 1")),
    }
}

impl Interaction {
    pub fn new(
        student_id: impl Into<String>,
        question_id: impl Into<String>,
        kc_id: impl Into<String>,
        correct: bool,
    ) -> Self {
        Self {
            student_id: student_id.into(),
            kc_id: kc_id.into(),
            question_id: question_id.into(),
            kc_text: None,
            question_text: None,
            answer_code: String::new(),
            correct,
            timestamp: None,
            language: Language::Other,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_texts(mut self, kc_text: impl Into<String>, question_text: impl Into<String>) -> Self {
        self.kc_text = Some(kc_text.into());
        self.question_text = Some(question_text.into());
        self
    }

    pub fn with_code(mut self, code: impl Into<String>) -> Self {
        self.answer_code = code.into();
        self
    }

    pub fn with_timestamp(mut self, ts: i64) -> Self {
        self.timestamp = Some(ts);
        self
    }

    pub fn is_enriched(&self) -> bool {
        self.kc_text.as_deref().is_some_and(|s| !s.trim().is_empty())
            && self.question_text.as_deref().is_some_and(|s| !s.trim().is_empty())
    }

    fn validate(&self) -> Result<(), String> {
        if self.student_id.is_empty() {
            return Err("student_id must be nonempty".into());
        }
        if self.question_id.is_empty() {
            return Err("question_id must be nonempty".into());
        }
        Ok(())
    }
}

/// Interactions grouped per student, each student's list in chronological order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InteractionLog {
    students: IndexMap<String, Vec<Interaction>>,
    kc_vocabulary: BTreeSet<String>,
    question_vocabulary: BTreeSet<String>,
}

impl InteractionLog {
    /// Groups, orders, and validates a flat interaction stream.
    ///
    /// Students keep their order of first appearance. Within a student,
    /// interactions are stably sorted by timestamp when every one of them has a
    /// timestamp; otherwise the input order is the sequence order.
    pub fn from_interactions<I>(interactions: I) -> Result<Self, DataError>
    where
        I: IntoIterator<Item = Interaction>,
    {
        let mut students: IndexMap<String, Vec<Interaction>> = IndexMap::new();
        for (idx, it) in interactions.into_iter().enumerate() {
            it.validate()
                .map_err(|message| DataError::Record { line: idx + 1, message })?;
            students.entry(it.student_id.clone()).or_default().push(it);
        }
        for seq in students.values_mut() {
            if seq.iter().all(|i| i.timestamp.is_some()) {
                seq.sort_by_key(|i| i.timestamp);
            }
        }
        Self::from_grouped(students)
    }

    fn from_grouped(students: IndexMap<String, Vec<Interaction>>) -> Result<Self, DataError> {
        let mut seen = HashSet::new();
        let mut kc_vocabulary = BTreeSet::new();
        let mut question_vocabulary = BTreeSet::new();
        for seq in students.values() {
            for it in seq {
                if let Some(ts) = it.timestamp {
                    let key = (it.student_id.as_str(), ts, it.question_id.as_str(), it.answer_code.as_str());
                    if !seen.insert(key) {
                        return Err(DataError::Invalid(format!(
                            "duplicate interaction for student `{}` question `{}` at {}",
                            it.student_id, it.question_id, ts
                        )));
                    }
                }
                kc_vocabulary.insert(it.kc_id.clone());
                question_vocabulary.insert(it.question_id.clone());
            }
        }
        Ok(Self { students, kc_vocabulary, question_vocabulary })
    }

    pub fn num_students(&self) -> usize {
        self.students.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.students.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.students.is_empty()
    }

    pub fn student_ids(&self) -> impl Iterator<Item = &str> {
        self.students.keys().map(String::as_str)
    }

    pub fn student(&self, id: &str) -> Option<&[Interaction]> {
        self.students.get(id).map(Vec::as_slice)
    }

    /// Per-student sequences in log order.
    pub fn sequences(&self) -> impl Iterator<Item = (&str, &[Interaction])> {
        self.students.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// All interactions, student by student.
    pub fn iter(&self) -> impl Iterator<Item = &Interaction> {
        self.students.values().flatten()
    }

    pub fn kc_vocabulary(&self) -> &BTreeSet<String> {
        &self.kc_vocabulary
    }

    pub fn question_vocabulary(&self) -> &BTreeSet<String> {
        &self.question_vocabulary
    }

    /// Restriction of the log to the given students, in this log's order.
    pub fn subset(&self, ids: &BTreeSet<String>) -> InteractionLog {
        let students: IndexMap<_, _> = self
            .students
            .iter()
            .filter(|(k, _)| ids.contains(*k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        // Subsets of a valid log are valid.
        Self::from_grouped(students).expect("subset of a valid log")
    }

    /// Applies `f` to every interaction and rebuilds the vocabularies.
    pub fn map_interactions<F>(&self, mut f: F) -> Result<InteractionLog, DataError>
    where
        F: FnMut(&Interaction) -> Interaction,
    {
        let students = self
            .students
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().map(&mut f).collect()))
            .collect();
        Self::from_grouped(students)
    }
}

/// Supported input formats for [`load_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    CanonicalJsonl,
    CsedmCsv,
}

impl std::str::FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "canonical_jsonl" | "jsonl" => Ok(Self::CanonicalJsonl),
            "csedm_csv" | "csv" => Ok(Self::CsedmCsv),
            other => Err(format!("unknown dataset format `{other}`")),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<InteractionLog, DataError> {
    match format {
        DatasetFormat::CanonicalJsonl => load_jsonl(path),
        DatasetFormat::CsedmCsv => load_csedm_csv(path, &CsvMapping::default()),
    }
}

pub fn load_jsonl(path: &Path) -> Result<InteractionLog, DataError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    read_jsonl(BufReader::new(file))
}

pub fn read_jsonl<R: BufRead>(reader: R) -> Result<InteractionLog, DataError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DataError::Record { line: idx + 1, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let it: Interaction = serde_json::from_str(&line)
            .map_err(|e| DataError::Record { line: idx + 1, message: e.to_string() })?;
        it.validate().map_err(|message| DataError::Record { line: idx + 1, message })?;
        out.push(it);
    }
    InteractionLog::from_interactions(out)
}

pub fn to_jsonl(log: &InteractionLog) -> String {
    let mut s = String::new();
    for it in log.iter() {
        s.push_str(&serde_json::to_string(it).expect("interaction serializes"));
        s.push('\n');
    }
    s
}

pub fn save_dataset(log: &InteractionLog, path: &Path) -> Result<(), DataError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(to_jsonl(log).as_bytes()).map_err(io_err(path))
}

/// Column mapping for CSEDM-style CSV exports.
///
/// Columns not named here land in each interaction's metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvMapping {
    pub student_id: String,
    pub question_id: String,
    pub kc_id: String,
    pub answer_code: String,
    pub correct: String,
    pub timestamp: Option<String>,
    pub kc_text: Option<String>,
    pub question_text: Option<String>,
    /// A score at or above this value counts as correct.
    pub correct_threshold: f64,
    pub language: Language,
}

impl Default for CsvMapping {
    fn default() -> Self {
        Self {
            student_id: "SubjectID".into(),
            question_id: "ProblemID".into(),
            kc_id: "AssignmentID".into(),
            answer_code: "Code".into(),
            correct: "Score".into(),
            timestamp: Some("ServerTimestamp".into()),
            kc_text: None,
            question_text: None,
            correct_threshold: 1.0,
            language: Language::Java,
        }
    }
}

impl CsvMapping {
    /// Reads a mapping from a `.json`, `.yaml`, or `.yml` file.
    pub fn from_file(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let is_yaml = matches!(path.extension().and_then(|e| e.to_str()), Some("yaml" | "yml"));
        if is_yaml {
            serde_yaml::from_str(&text).map_err(|e| DataError::Mapping(e.to_string()))
        } else {
            serde_json::from_str(&text).map_err(|e| DataError::Mapping(e.to_string()))
        }
    }
}

pub fn load_csedm_csv(path: &Path, mapping: &CsvMapping) -> Result<InteractionLog, DataError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    read_csedm_csv(file, mapping)
}

pub fn read_csedm_csv<R: std::io::Read>(reader: R, mapping: &CsvMapping) -> Result<InteractionLog, DataError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| DataError::Record { line: 1, message: e.to_string() })?
        .clone();
    let col = |name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let optional = |name: &Option<String>| -> Result<Option<usize>, DataError> {
        name.as_deref().map(col).transpose()
    };

    let c_student = col(&mapping.student_id)?;
    let c_question = col(&mapping.question_id)?;
    let c_kc = col(&mapping.kc_id)?;
    let c_code = col(&mapping.answer_code)?;
    let c_correct = col(&mapping.correct)?;
    let c_ts = optional(&mapping.timestamp)?;
    let c_kc_text = optional(&mapping.kc_text)?;
    let c_q_text = optional(&mapping.question_text)?;
    let mapped: BTreeSet<usize> = [Some(c_student), Some(c_question), Some(c_kc), Some(c_code), Some(c_correct), c_ts, c_kc_text, c_q_text]
        .into_iter()
        .flatten()
        .collect();

    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| DataError::Record {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |i: usize| record.get(i).unwrap_or("").to_string();
        let score: f64 = field(c_correct).trim().parse().map_err(|_| DataError::Record {
            line,
            message: format!("column `{}` is not numeric: `{}`", mapping.correct, field(c_correct)),
        })?;
        let timestamp = match c_ts {
            Some(i) if !field(i).trim().is_empty() => Some(
                parse_timestamp(field(i).trim())
                    .ok_or_else(|| DataError::Record { line, message: format!("unparseable timestamp `{}`", field(i)) })?,
            ),
            _ => None,
        };
        let non_empty = |i: Option<usize>| i.map(field).filter(|s| !s.trim().is_empty());
        let metadata = headers
            .iter()
            .enumerate()
            .filter(|(i, _)| !mapped.contains(i))
            .map(|(i, h)| (h.to_string(), Value::String(field(i))))
            .collect();
        let it = Interaction {
            student_id: field(c_student),
            kc_id: field(c_kc),
            question_id: field(c_question),
            kc_text: non_empty(c_kc_text),
            question_text: non_empty(c_q_text),
            answer_code: field(c_code),
            correct: score >= mapping.correct_threshold,
            timestamp,
            language: mapping.language,
            metadata,
        };
        it.validate().map_err(|message| DataError::Record { line, message })?;
        out.push(it);
    }
    InteractionLog::from_interactions(out)
}

/// Epoch milliseconds from an integer string or an ISO-8601 / RFC 3339 timestamp.
fn parse_timestamp(s: &str) -> Option<i64> {
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp_millis());
    }
    ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"]
        .iter()
        .find_map(|fmt| chrono::NaiveDateTime::parse_from_str(s, fmt).ok())
        .map(|dt| dt.and_utc().timestamp_millis())
}

/// One cross-validation fold. The three student sets are pairwise disjoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_students: BTreeSet<String>,
    pub validation_students: BTreeSet<String>,
    pub test_students: BTreeSet<String>,
}

/// The three interaction streams of one fold.
#[derive(Debug, Clone)]
pub struct FoldData {
    pub train: InteractionLog,
    pub validation: InteractionLog,
    pub test: InteractionLog,
}

impl FoldSplit {
    pub fn partition(&self, log: &InteractionLog) -> FoldData {
        FoldData {
            train: log.subset(&self.train_students),
            validation: log.subset(&self.validation_students),
            test: log.subset(&self.test_students),
        }
    }
}

/// Splits students (never single interactions) into `k` folds.
///
/// Test sets partition the student population; each fold's validation set is
/// carved from its remaining students at `validation_fraction` (rounded, at
/// least one student whenever the fraction is positive).
pub fn split_kfold(
    log: &InteractionLog,
    k: usize,
    seed: u64,
    validation_fraction: f64,
) -> Result<Vec<FoldSplit>, DataError> {
    if k < 2 {
        return Err(DataError::Split(format!("k must be at least 2, got {k}")));
    }
    if !(0.0..1.0).contains(&validation_fraction) {
        return Err(DataError::Split(format!("validation_fraction must be in [0, 1), got {validation_fraction}")));
    }
    let n = log.num_students();
    if n < k {
        return Err(DataError::Split(format!("{n} students cannot fill {k} folds")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut students: Vec<String> = log.student_ids().map(str::to_string).collect();
    students.shuffle(&mut rng);

    let mut folds = Vec::with_capacity(k);
    for fold in 0..k {
        let test: BTreeSet<String> = students.iter().skip(fold).step_by(k).cloned().collect();
        let mut rest: Vec<String> = students.iter().filter(|s| !test.contains(*s)).cloned().collect();
        let mut n_val = (validation_fraction * rest.len() as f64).round() as usize;
        if validation_fraction > 0.0 {
            n_val = n_val.max(1);
        }
        n_val = n_val.min(rest.len().saturating_sub(1));
        rest.shuffle(&mut rng);
        let validation: BTreeSet<String> = rest[..n_val].iter().cloned().collect();
        let train: BTreeSet<String> = rest[n_val..].iter().cloned().collect();
        folds.push(FoldSplit {
            fold_index: fold,
            train_students: train,
            validation_students: validation,
            test_students: test,
        });
    }
    Ok(folds)
}
