//! Question and knowledge-concept text generation for logs that only carry
//! identifiers and student code.
//!
//! Question text is generated from a representative answer of each question,
//! then a KC label is generated from that question text. Every raw LLM output
//! is stored in a content-addressed [`EnrichmentCache`], so reruns are
//! reproducible and make no network calls for work already done.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{DataError, Interaction, InteractionLog};
use crate::llm::{complete_with_retry, LlmClient, LlmClientConfig, LlmError};
use crate::template::{PromptTemplate, TemplateError};

/// Upper bound on generated question length, in characters.
pub const MAX_QUESTION_CHARS: usize = 200;
/// Upper bound on KC label length, in words after normalization.
pub const MAX_KC_WORDS: usize = 8;

/// Metadata key set on interactions whose question text was cut to fit.
pub const TRUNCATED_KEY: &str = "question_truncated";

#[derive(Debug, Error)]
pub enum EnrichError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("llm returned an empty {0}")]
    EmptyOutput(&'static str),
    #[error("cache error: {0}")]
    Cache(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("enrichment failed for {} question(s); {} completed; checkpoint: {checkpoint:?}", failed.len(), completed.len())]
    Partial {
        completed: Vec<String>,
        failed: Vec<(String, String)>,
        checkpoint: Option<PathBuf>,
    },
}

/// The prompt templates used for question and KC generation.
#[derive(Debug, Clone)]
pub struct EnrichmentTemplates {
    pub question: PromptTemplate,
    pub question_reprompt: PromptTemplate,
    pub kc: PromptTemplate,
}

impl Default for EnrichmentTemplates {
    fn default() -> Self {
        Self {
            question: PromptTemplate::new("question.v1", trim_asset(include_str!("../templates/enrichment/question.txt"))),
            question_reprompt: PromptTemplate::new(
                "question_reprompt.v1",
                trim_asset(include_str!("../templates/enrichment/question_reprompt.txt")),
            ),
            kc: PromptTemplate::new("kc.v1", trim_asset(include_str!("../templates/enrichment/kc.txt"))),
        }
    }
}

fn trim_asset(s: &str) -> &str {
    s.strip_suffix('\n').unwrap_or(s)
}

impl EnrichmentTemplates {
    /// Loads `question.txt`, `kc.txt`, and optionally `question_reprompt.txt`
    /// from `dir`. Template ids are the file stems suffixed with a content hash,
    /// so edited templates never reuse stale cache entries.
    pub fn from_dir(dir: &Path) -> Result<Self, EnrichError> {
        let load = |name: &str| -> Result<Option<PromptTemplate>, EnrichError> {
            let path = dir.join(format!("{name}.txt"));
            if !path.exists() {
                return Ok(None);
            }
            let body = fs::read_to_string(&path).map_err(|e| EnrichError::Precondition(format!("{}: {e}", path.display())))?;
            let body = trim_asset(&body).to_string();
            let tag = &hex::encode(Sha256::digest(body.as_bytes()))[..12];
            Ok(Some(PromptTemplate::new(format!("{name}.{tag}"), body)))
        };
        let defaults = Self::default();
        let question = load("question")?.ok_or_else(|| EnrichError::Precondition(format!("{}/question.txt missing", dir.display())))?;
        let kc = load("kc")?.ok_or_else(|| EnrichError::Precondition(format!("{}/kc.txt missing", dir.display())))?;
        let question_reprompt = load("question_reprompt")?.unwrap_or(defaults.question_reprompt);
        Ok(Self { question, question_reprompt, kc })
    }
}

/// Content-addressed store of raw LLM outputs.
///
/// Keys hash `(template_id, model_name, input_text)`. Entries are write-once:
/// inserting an existing key is a no-op. With a backing directory each entry
/// is a file named by its hex key whose body is the generated text.
#[derive(Debug, Default)]
pub struct EnrichmentCache {
    dir: Option<PathBuf>,
    entries: RwLock<HashMap<String, String>>,
    tmp_counter: AtomicUsize,
}

impl EnrichmentCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, EnrichError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| EnrichError::Cache(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir: Some(dir), ..Self::default() })
    }

    pub fn key(template_id: &str, model_name: &str, input: &str) -> String {
        let mut h = Sha256::new();
        for part in [template_id, model_name, input] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        if let Some(v) = self.entries.read().expect("cache lock").get(key) {
            return Some(v.clone());
        }
        let dir = self.dir.as_ref()?;
        let value = fs::read_to_string(dir.join(key)).ok()?;
        self.entries.write().expect("cache lock").insert(key.to_string(), value.clone());
        Some(value)
    }

    /// Stores `value` unless `key` is already present.
    pub fn insert(&self, key: &str, value: &str) -> Result<(), EnrichError> {
        if self.get(key).is_some() {
            return Ok(());
        }
        if let Some(dir) = &self.dir {
            let n = self.tmp_counter.fetch_add(1, Ordering::Relaxed);
            let tmp = dir.join(format!(".{key}.{}.{n}.tmp", std::process::id()));
            fs::write(&tmp, value).map_err(|e| EnrichError::Cache(e.to_string()))?;
            let target = dir.join(key);
            if target.exists() {
                let _ = fs::remove_file(&tmp);
            } else {
                fs::rename(&tmp, &target).map_err(|e| EnrichError::Cache(e.to_string()))?;
            }
        }
        self.entries
            .write()
            .expect("cache lock")
            .entry(key.to_string())
            .or_insert_with(|| value.to_string());
        Ok(())
    }

    pub fn len(&self) -> usize {
        match &self.dir {
            Some(dir) => fs::read_dir(dir)
                .map(|rd| rd.filter_map(Result::ok).filter(|e| !e.file_name().to_string_lossy().starts_with('.')).count())
                .unwrap_or(0),
            None => self.entries.read().expect("cache lock").len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A generated text with bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generated {
    pub text: String,
    pub truncated: bool,
    pub llm_calls: usize,
}

fn cached_completion(
    template: &PromptTemplate,
    placeholder: &str,
    input: &str,
    client: &dyn LlmClient,
    config: &LlmClientConfig,
    cache: &EnrichmentCache,
    calls: &mut usize,
) -> Result<String, EnrichError> {
    let key = EnrichmentCache::key(&template.template_id, &config.model_name, input);
    if let Some(hit) = cache.get(&key) {
        return Ok(hit);
    }
    let mut values = BTreeMap::new();
    values.insert(placeholder, input.to_string());
    let prompt = template.render(&values)?;
    let exchange = complete_with_retry(client, config, &prompt)?;
    *calls += 1;
    cache.insert(&key, &exchange.response)?;
    Ok(exchange.response)
}

/// Cuts `text` to at most `max_chars` characters, ending at a word boundary
/// when one exists. Returns the cut text and whether anything was removed.
pub fn truncate_at_word_boundary(text: &str, max_chars: usize) -> (String, bool) {
    let text = text.trim();
    if text.chars().count() <= max_chars {
        return (text.to_string(), false);
    }
    let cut = text.char_indices().nth(max_chars).map(|(i, _)| i).unwrap_or(text.len());
    let (head, tail) = text.split_at(cut);
    let out = if tail.starts_with(char::is_whitespace) {
        head
    } else {
        match head.rfind(char::is_whitespace) {
            Some(i) => &head[..i],
            None => head,
        }
    };
    (out.trim_end().to_string(), true)
}

/// Generates question text for one student answer.
///
/// Output longer than [`MAX_QUESTION_CHARS`] triggers one reprompt; if that
/// is still too long it is truncated at a word boundary and flagged.
pub fn generate_question(
    answer_code: &str,
    templates: &EnrichmentTemplates,
    client: &dyn LlmClient,
    config: &LlmClientConfig,
    cache: &EnrichmentCache,
) -> Result<Generated, EnrichError> {
    if answer_code.trim().is_empty() {
        return Err(EnrichError::Precondition("answer_code must be nonempty".into()));
    }
    let mut calls = 0;
    let first = cached_completion(&templates.question, "code", answer_code, client, config, cache, &mut calls)?;
    let first = first.trim();
    if first.is_empty() {
        return Err(EnrichError::EmptyOutput("question"));
    }
    if first.chars().count() <= MAX_QUESTION_CHARS {
        return Ok(Generated { text: first.to_string(), truncated: false, llm_calls: calls });
    }
    let second = cached_completion(&templates.question_reprompt, "code", answer_code, client, config, cache, &mut calls)?;
    let second = if second.trim().is_empty() { first } else { second.trim() };
    let (text, truncated) = truncate_at_word_boundary(second, MAX_QUESTION_CHARS);
    Ok(Generated { text, truncated, llm_calls: calls })
}

/// Strips quoting and label noise from a raw KC completion and caps it at
/// [`MAX_KC_WORDS`] words.
fn clean_kc_label(raw: &str) -> String {
    let line = raw.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    let line = line.trim_matches(|c: char| matches!(c, '"' | '\'' | '`' | '*')).trim();
    let line = line.strip_suffix('.').unwrap_or(line).trim();
    let words: Vec<&str> = line.split_whitespace().collect();
    if normalize_kc(line).split(' ').count() > MAX_KC_WORDS {
        words.into_iter().take(MAX_KC_WORDS).collect::<Vec<_>>().join(" ")
    } else {
        words.join(" ")
    }
}

/// Generates a short KC label for one question.
pub fn generate_kc(
    question_text: &str,
    templates: &EnrichmentTemplates,
    client: &dyn LlmClient,
    config: &LlmClientConfig,
    cache: &EnrichmentCache,
) -> Result<Generated, EnrichError> {
    if question_text.trim().is_empty() {
        return Err(EnrichError::Precondition("question_text must be nonempty".into()));
    }
    let mut calls = 0;
    let raw = cached_completion(&templates.kc, "question", question_text, client, config, cache, &mut calls)?;
    let text = clean_kc_label(&raw);
    if normalize_kc(&text).is_empty() {
        return Err(EnrichError::EmptyOutput("kc label"));
    }
    Ok(Generated { text, truncated: false, llm_calls: calls })
}

/// Canonical KC key: lowercase, punctuation replaced by spaces, whitespace
/// collapsed. Labels with equal keys are the same KC.
pub fn normalize_kc(raw_label: &str) -> String {
    let spaced: String = raw_label
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .flat_map(char::to_lowercase)
        .collect();
    spaced.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone)]
pub struct EnrichOptions {
    /// Maximum concurrent LLM requests.
    pub max_in_flight: usize,
    /// Where to write the list of completed questions on partial failure.
    pub checkpoint: Option<PathBuf>,
}

impl Default for EnrichOptions {
    fn default() -> Self {
        Self { max_in_flight: 4, checkpoint: None }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EnrichCheckpoint {
    pub completed_question_ids: Vec<String>,
    pub failed: BTreeMap<String, String>,
}

#[derive(Debug, Default, Clone)]
struct QuestionState {
    question_text: Option<String>,
    kc_text: Option<String>,
    representative_code: Option<String>,
    representative_correct: bool,
    truncated: bool,
    kc_generated: bool,
}

fn nonempty(s: &Option<String>) -> Option<String> {
    s.as_ref().filter(|t| !t.trim().is_empty()).cloned()
}

/// Runs `job` over `0..n` with at most `limit` concurrent workers, returning
/// results in index order.
fn run_bounded<T, F>(n: usize, limit: usize, job: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let slots: Vec<Mutex<Option<T>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..limit.clamp(1, n.max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                *slots[i].lock().expect("slot lock") = Some(job(i));
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("slot lock").expect("every slot filled"))
        .collect()
}

/// Fills `question_text` and `kc_text` on every interaction.
///
/// Generation runs once per question id and is shared by all attempts at
/// that question. The representative answer of a question is its first
/// correct attempt, or its first attempt with code when none is correct.
/// Generated KCs replace the interaction's `kc_id` with the normalized label;
/// interactions that already carry both texts are left untouched.
pub fn enrich_log(
    log: &InteractionLog,
    templates: &EnrichmentTemplates,
    client: &dyn LlmClient,
    config: &LlmClientConfig,
    cache: &EnrichmentCache,
    options: &EnrichOptions,
) -> Result<InteractionLog, EnrichError> {
    let mut order: Vec<String> = Vec::new();
    let mut states: HashMap<String, QuestionState> = HashMap::new();
    for it in log.iter() {
        let st = states.entry(it.question_id.clone()).or_insert_with(|| {
            order.push(it.question_id.clone());
            QuestionState::default()
        });
        if st.question_text.is_none() {
            st.question_text = nonempty(&it.question_text);
        }
        if st.kc_text.is_none() {
            st.kc_text = nonempty(&it.kc_text);
        }
        let has_code = !it.answer_code.trim().is_empty();
        if has_code && (st.representative_code.is_none() || it.correct && !st.representative_correct) {
            st.representative_code = Some(it.answer_code.clone());
            st.representative_correct = it.correct;
        }
    }

    let mut failed: BTreeMap<String, String> = BTreeMap::new();

    let need_question: Vec<String> = order.iter().filter(|q| states[*q].question_text.is_none()).cloned().collect();
    let results = run_bounded(need_question.len(), options.max_in_flight, |i| {
        let st = &states[&need_question[i]];
        generate_question(st.representative_code.as_deref().unwrap_or(""), templates, client, config, cache)
    });
    for (qid, res) in need_question.iter().zip(results) {
        match res {
            Ok(g) => {
                let st = states.get_mut(qid).expect("known question");
                st.question_text = Some(g.text);
                st.truncated = g.truncated;
            }
            Err(e) => {
                failed.insert(qid.clone(), e.to_string());
            }
        }
    }

    let need_kc: Vec<String> = order
        .iter()
        .filter(|q| !failed.contains_key(*q) && states[*q].kc_text.is_none())
        .cloned()
        .collect();
    let results = run_bounded(need_kc.len(), options.max_in_flight, |i| {
        let st = &states[&need_kc[i]];
        generate_kc(st.question_text.as_deref().unwrap_or(""), templates, client, config, cache)
    });
    for (qid, res) in need_kc.iter().zip(results) {
        match res {
            Ok(g) => {
                let st = states.get_mut(qid).expect("known question");
                st.kc_text = Some(g.text);
                st.kc_generated = true;
            }
            Err(e) => {
                failed.insert(qid.clone(), e.to_string());
            }
        }
    }

    if !failed.is_empty() {
        let completed: Vec<String> = order.iter().filter(|q| !failed.contains_key(*q)).cloned().collect();
        if let Some(path) = &options.checkpoint {
            let cp = EnrichCheckpoint { completed_question_ids: completed.clone(), failed: failed.clone() };
            let body = serde_json::to_string_pretty(&cp).expect("checkpoint serializes");
            fs::write(path, body).map_err(|e| EnrichError::Cache(format!("{}: {e}", path.display())))?;
        }
        return Err(EnrichError::Partial {
            completed,
            failed: failed.into_iter().collect(),
            checkpoint: options.checkpoint.clone(),
        });
    }

    Ok(log.map_interactions(|it| apply(it, &states[&it.question_id]))?)
}

fn apply(it: &Interaction, st: &QuestionState) -> Interaction {
    if it.is_enriched() {
        return it.clone();
    }
    let mut out = it.clone();
    if nonempty(&out.question_text).is_none() {
        out.question_text = st.question_text.clone();
        if st.truncated {
            out.metadata.insert(TRUNCATED_KEY.into(), serde_json::Value::Bool(true));
        }
    }
    if nonempty(&out.kc_text).is_none() {
        out.kc_text = st.kc_text.clone();
        if st.kc_generated {
            if let Some(label) = &st.kc_text {
                out.kc_id = normalize_kc(label);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::StubLlm;
    use std::time::Duration;

    fn cfg() -> LlmClientConfig {
        LlmClientConfig { max_retries: 0, retry_backoff: Duration::ZERO, ..LlmClientConfig::for_enrichment() }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_kc("For-Loops "), "for loops");
        assert_eq!(normalize_kc("x"), "x");
        assert_eq!(normalize_kc("STRING   PATTERN!"), "string pattern");
        assert_eq!(normalize_kc("string manipulation"), normalize_kc("String  Manipulation"));
    }

    #[test]
    fn truncation_rule() {
        assert_eq!(truncate_at_word_boundary("abc def", 5), ("abc".to_string(), true));
        assert_eq!(truncate_at_word_boundary("abc def", 3), ("abc".to_string(), true));
        assert_eq!(truncate_at_word_boundary("abc def", 7), ("abc def".to_string(), false));
        assert_eq!(truncate_at_word_boundary("abcdefgh", 4), ("abcd".to_string(), true));
    }

    #[test]
    fn long_output_reprompted_then_truncated() {
        // 25 words of 9 chars + spaces = 249 chars; the cut at 200 falls inside
        // word 21 (chars 200..209), so the kept text is the first 20 words.
        let word = "abcdefghi";
        let long = vec![word; 25].join(" ");
        assert_eq!(long.chars().count(), 249);
        let stub = StubLlm::fixed(long.clone());
        let cache = EnrichmentCache::in_memory();
        let g = generate_question("int x;", &EnrichmentTemplates::default(), &stub, &cfg(), &cache).unwrap();
        assert_eq!(stub.calls(), 2);
        assert!(g.truncated);
        assert_eq!(g.text, vec![word; 20].join(" "));
        assert_eq!(g.text.chars().count(), 199);
        assert!(long.starts_with(&g.text));
    }

    #[test]
    fn cache_hit_makes_no_call() {
        let stub = StubLlm::fixed("Sum the numbers.");
        let cache = EnrichmentCache::in_memory();
        let t = EnrichmentTemplates::default();
        generate_question("code", &t, &stub, &cfg(), &cache).unwrap();
        let again = generate_question("code", &t, &stub, &cfg(), &cache).unwrap();
        assert_eq!(stub.calls(), 1);
        assert_eq!(again.llm_calls, 0);
        assert_eq!(again.text, "Sum the numbers.");
    }

    #[test]
    fn cache_key_depends_on_model() {
        assert_ne!(EnrichmentCache::key("t", "m1", "x"), EnrichmentCache::key("t", "m2", "x"));
        assert_ne!(EnrichmentCache::key("ab", "c", "x"), EnrichmentCache::key("a", "bc", "x"));
    }

    #[test]
    fn cache_is_write_once() {
        let cache = EnrichmentCache::in_memory();
        cache.insert("k", "first").unwrap();
        cache.insert("k", "second").unwrap();
        assert_eq!(cache.get("k").as_deref(), Some("first"));
    }

    #[test]
    fn disk_cache_persists() {
        let dir = tempfile::tempdir().unwrap();
        {
            let c = EnrichmentCache::open(dir.path()).unwrap();
            c.insert("abc", "text").unwrap();
        }
        let c = EnrichmentCache::open(dir.path()).unwrap();
        assert_eq!(c.get("abc").as_deref(), Some("text"));
        assert_eq!(fs::read_to_string(dir.path().join("abc")).unwrap(), "text");
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn kc_passthrough_and_precondition() {
        let stub = StubLlm::fixed("String Manipulation");
        let cache = EnrichmentCache::in_memory();
        let t = EnrichmentTemplates::default();
        let g = generate_kc("Reverse a string.", &t, &stub, &cfg(), &cache).unwrap();
        assert_eq!(g.text, "String Manipulation");
        assert!(matches!(generate_kc("", &t, &stub, &cfg(), &cache), Err(EnrichError::Precondition(_))));
        assert!(matches!(
            generate_question("  ", &t, &stub, &cfg(), &cache),
            Err(EnrichError::Precondition(_))
        ));
    }

    #[test]
    fn kc_label_capped_at_eight_words() {
        let stub = StubLlm::fixed("\"one two three four five six seven eight nine ten.\"");
        let g = generate_kc("q", &EnrichmentTemplates::default(), &stub, &cfg(), &EnrichmentCache::in_memory()).unwrap();
        assert_eq!(g.text, "one two three four five six seven eight");
    }

    #[test]
    fn bounded_runner_keeps_order() {
        let out = run_bounded(20, 3, |i| i * 2);
        assert_eq!(out, (0..20).map(|i| i * 2).collect::<Vec<_>>());
        assert!(run_bounded(0, 3, |i| i).is_empty());
    }
}
