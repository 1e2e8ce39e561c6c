//! Renders interaction histories as encoder input text.
//!
//! A sample reads `[CLS] c_1 q_1 r_1 … c_i q_i [MASK] [SEP]`, space separated,
//! where each `r` is `[CORRECT]` or `[INCORRECT]`. When the rendered history
//! exceeds the token budget the oldest interactions are dropped first; the
//! target is never dropped.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Interaction, InteractionLog};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncodingError {
    #[error("target does not fit budget: needs {needed} tokens, budget is {budget}")]
    BudgetTooSmall { needed: usize, budget: usize },
    #[error("interaction of student `{student_id}` on question `{question_id}` is not enriched")]
    Unenriched { student_id: String, question_id: String },
    #[error("text of student `{student_id}` on question `{question_id}` contains the reserved token `{token}`")]
    ReservedToken {
        student_id: String,
        question_id: String,
        token: String,
    },
    #[error("special tokens must be pairwise distinct")]
    DuplicateSpecialTokens,
}

/// Marker strings used in rendered samples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub correct: String,
    pub incorrect: String,
    pub mask: String,
    pub cls: String,
    pub sep: String,
}

impl SpecialTokens {
    pub const CORRECT: &'static str = "[CORRECT]";
    pub const INCORRECT: &'static str = "[INCORRECT]";

    /// Response markers plus the encoder's own mask/cls/sep markers.
    pub fn new(mask: impl Into<String>, cls: impl Into<String>, sep: impl Into<String>) -> Result<Self, EncodingError> {
        let t = Self {
            correct: Self::CORRECT.into(),
            incorrect: Self::INCORRECT.into(),
            mask: mask.into(),
            cls: cls.into(),
            sep: sep.into(),
        };
        let all = t.all();
        for (i, a) in all.iter().enumerate() {
            if all[i + 1..].contains(a) {
                return Err(EncodingError::DuplicateSpecialTokens);
            }
        }
        Ok(t)
    }

    /// BERT-style markers.
    pub fn bert() -> Self {
        Self::new("[MASK]", "[CLS]", "[SEP]").expect("distinct")
    }

    pub fn all(&self) -> [&str; 5] {
        [&self.correct, &self.incorrect, &self.mask, &self.cls, &self.sep]
    }
}

impl Default for SpecialTokens {
    fn default() -> Self {
        Self::bert()
    }
}

/// The response slot of one interaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Response {
    Correct,
    Incorrect,
    Mask,
}

impl From<bool> for Response {
    fn from(correct: bool) -> Self {
        if correct {
            Response::Correct
        } else {
            Response::Incorrect
        }
    }
}

pub fn response_token(r: Response, tokens: &SpecialTokens) -> &str {
    match r {
        Response::Correct => &tokens.correct,
        Response::Incorrect => &tokens.incorrect,
        Response::Mask => &tokens.mask,
    }
}

/// One rendered training or inference input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedSample {
    pub text: String,
    #[serde(with = "bit")]
    pub label: bool,
    /// Character (not byte) offset of the mask marker in `text`.
    pub mask_char_offset: usize,
    /// Number of history interactions kept, excluding the target.
    pub interactions_included: usize,
    pub target_question_id: String,
    pub student_id: String,
    /// Zero-based position of the target in the student's sequence.
    pub step: usize,
}

mod bit {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(serde::de::Error::custom("label must be 0 or 1")),
        }
    }
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// `kc_text question_text`, whitespace collapsed.
fn concept_and_question(it: &Interaction, tokens: &SpecialTokens) -> Result<String, EncodingError> {
    if !it.is_enriched() {
        return Err(EncodingError::Unenriched {
            student_id: it.student_id.clone(),
            question_id: it.question_id.clone(),
        });
    }
    let kc = collapse_ws(it.kc_text.as_deref().unwrap_or_default());
    let q = collapse_ws(it.question_text.as_deref().unwrap_or_default());
    for tok in tokens.all() {
        if kc.contains(tok) || q.contains(tok) {
            return Err(EncodingError::ReservedToken {
                student_id: it.student_id.clone(),
                question_id: it.question_id.clone(),
                token: tok.to_string(),
            });
        }
    }
    Ok(format!("{kc} {q}"))
}

fn history_segment(it: &Interaction, tokens: &SpecialTokens) -> Result<String, EncodingError> {
    Ok(format!("{} {}", concept_and_question(it, tokens)?, response_token(it.correct.into(), tokens)))
}

fn assemble(segments: &[String], target: &str, tokens: &SpecialTokens) -> (String, usize) {
    let mut text = String::new();
    text.push_str(&tokens.cls);
    for s in segments {
        text.push(' ');
        text.push_str(s);
    }
    text.push(' ');
    text.push_str(target);
    text.push(' ');
    let mask_offset = text.chars().count();
    text.push_str(&tokens.mask);
    text.push(' ');
    text.push_str(&tokens.sep);
    (text, mask_offset)
}

/// Largest `k` such that keeping the last `k` segments fits the budget.
/// Assumes `probe` is monotone in the number of kept segments.
fn fit_suffix(
    segments: &[String],
    target: &str,
    budget: usize,
    tokens: &SpecialTokens,
    probe: &dyn Fn(&str) -> usize,
) -> Result<usize, EncodingError> {
    let needed = probe(&assemble(&[], target, tokens).0);
    if needed > budget {
        return Err(EncodingError::BudgetTooSmall { needed, budget });
    }
    let n = segments.len();
    let fits = |k: usize| probe(&assemble(&segments[n - k..], target, tokens).0) <= budget;
    if fits(n) {
        return Ok(n);
    }
    let (mut lo, mut hi) = (0, n);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Renders `target` after as much of `history` (most recent first) as fits
/// in `token_budget` tokens under `tokenizer_probe`.
pub fn build_input(
    history: &[Interaction],
    target: &Interaction,
    token_budget: usize,
    tokenizer_probe: &dyn Fn(&str) -> usize,
    tokens: &SpecialTokens,
) -> Result<EncodedSample, EncodingError> {
    let segments = history
        .iter()
        .map(|it| history_segment(it, tokens))
        .collect::<Result<Vec<_>, _>>()?;
    let target_text = concept_and_question(target, tokens)?;
    build_from_segments(&segments, &target_text, target, history.len(), token_budget, tokenizer_probe, tokens)
}

fn build_from_segments(
    segments: &[String],
    target_text: &str,
    target: &Interaction,
    step: usize,
    token_budget: usize,
    probe: &dyn Fn(&str) -> usize,
    tokens: &SpecialTokens,
) -> Result<EncodedSample, EncodingError> {
    let kept = fit_suffix(segments, target_text, token_budget, tokens, probe)?;
    let (text, mask_char_offset) = assemble(&segments[segments.len() - kept..], target_text, tokens);
    Ok(EncodedSample {
        text,
        label: target.correct,
        mask_char_offset,
        interactions_included: kept,
        target_question_id: target.question_id.clone(),
        student_id: target.student_id.clone(),
        step,
    })
}

/// One sample per interaction: the i-th uses interactions `0..i` as history.
pub fn build_training_set(
    log: &InteractionLog,
    token_budget: usize,
    tokenizer_probe: &dyn Fn(&str) -> usize,
    tokens: &SpecialTokens,
) -> Result<Vec<EncodedSample>, EncodingError> {
    let mut out = Vec::with_capacity(log.num_interactions());
    for (_, seq) in log.sequences() {
        let segments = seq
            .iter()
            .map(|it| history_segment(it, tokens))
            .collect::<Result<Vec<_>, _>>()?;
        for (i, target) in seq.iter().enumerate() {
            let target_text = concept_and_question(target, tokens)?;
            out.push(build_from_segments(&segments[..i], &target_text, target, i, token_budget, tokenizer_probe, tokens)?);
        }
    }
    Ok(out)
}

/// Whitespace token counter.
pub fn whitespace_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}
