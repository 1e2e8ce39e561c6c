//! Correctness and hint feedback prompts, generation and parsing.

mod ast;
mod parse;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Language;
use crate::llm::{complete_with_retry, LlmClient, LlmClientConfig, LlmError, LlmExchange};
use crate::template::{PromptTemplate, TemplateError};

pub use ast::{extract_ast, AST_UNAVAILABLE};
pub use parse::{
    parse_feedback, render_components, FeedbackBundle, ANALYSIS, CHEERING_UP, CORRECTION, CORRECTNESS_COMPONENTS,
    HINT_COMPONENTS, KEY_NOTIONS, NEXT_CHALLENGE, POSITIVE_FEEDBACK, RELATED_HISTORY, SIMILAR_PROBLEMS,
};

#[derive(Debug, Error)]
pub enum FeedbackError {
    #[error("no AST support for language `{0:?}`")]
    UnsupportedLanguage(Language),
    #[error("grammar setup failed: {0}")]
    Grammar(String),
    #[error("{mode} context is invalid: {message}")]
    Context { mode: Mode, message: String },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("rendered prompt still contains placeholder {{{0}}}")]
    Unresolved(String),
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("response is empty")]
    EmptyResponse,
    #[error("no feedback components recognized in response")]
    NoComponents { raw: String },
    #[error("template `{path}`: {message}")]
    TemplateFile { path: String, message: String },
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Correctness,
    Hint,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Correctness => "correctness",
            Mode::Hint => "hint",
        })
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "correctness" => Ok(Mode::Correctness),
            "hint" => Ok(Mode::Hint),
            other => Err(format!("unknown mode `{other}` (expected correctness or hint)")),
        }
    }
}

/// Prompt variant: full context (c1), IDs with the baseline probability (c2),
/// or the one-line role prompt (c3).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    C1,
    C2,
    C3,
}

impl Comparison {
    pub const ALL: [Comparison; 3] = [Comparison::C1, Comparison::C2, Comparison::C3];

    pub fn as_str(self) -> &'static str {
        match self {
            Comparison::C1 => "c1",
            Comparison::C2 => "c2",
            Comparison::C3 => "c3",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Comparison {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Comparison::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown comparison `{s}` (expected c1, c2 or c3)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Correctness {
    Correct,
    Incorrect,
}

impl From<bool> for Correctness {
    fn from(correct: bool) -> Self {
        if correct {
            Correctness::Correct
        } else {
            Correctness::Incorrect
        }
    }
}

impl fmt::Display for Correctness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Correctness::Correct => "Correct",
            Correctness::Incorrect => "Incorrect",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PastProblemText {
    pub question_text: String,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PastProblemIds {
    pub kc_id: String,
    pub question_id: String,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemIds {
    pub kc_id: String,
    pub question_id: String,
}

/// Everything a feedback prompt can mention about one learner and problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerContext {
    #[serde(default)]
    pub problem_text_past: Vec<PastProblemText>,
    #[serde(default)]
    pub problem_past_ids: Vec<PastProblemIds>,
    pub problem_text_present: String,
    pub problem_present_ids: ProblemIds,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_code_present: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_code_ast: Option<String>,
    pub model_prob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correctness: Option<Correctness>,
}

impl LearnerContext {
    fn check(&self, mode: Mode) -> Result<(), FeedbackError> {
        let err = |message: &str| Err(FeedbackError::Context { mode, message: message.to_string() });
        if !(self.model_prob > 0.0 && self.model_prob < 1.0) {
            return err("model_prob must lie strictly between 0 and 1");
        }
        let correctness_fields = [
            self.response_code_present.is_some(),
            self.response_code_ast.is_some(),
            self.correctness.is_some(),
        ];
        match mode {
            Mode::Correctness if correctness_fields.contains(&false) => {
                err("response_code_present, response_code_ast and correctness are required")
            }
            Mode::Hint if correctness_fields.contains(&true) => {
                err("response_code_present, response_code_ast and correctness must be absent")
            }
            _ => Ok(()),
        }
    }
}

fn result_word(correct: bool) -> &'static str {
    if correct {
        "Correct"
    } else {
        "Incorrect"
    }
}

/// `- Problem: <text> | Result: Correct` per past problem.
pub fn format_problem_text_past(items: &[PastProblemText]) -> String {
    if items.is_empty() {
        return "(none)".into();
    }
    items
        .iter()
        .map(|p| format!("- Problem: {} | Result: {}", p.question_text, result_word(p.correct)))
        .collect::<Vec<_>>()
        .join("\n")
}

/// `['kc', 'q', 'Correct']` per past problem.
pub fn format_problem_past(items: &[PastProblemIds]) -> String {
    if items.is_empty() {
        return "(none)".into();
    }
    items
        .iter()
        .map(|p| format!("['{}', '{}', '{}']", p.kc_id, p.question_id, result_word(p.correct)))
        .collect::<Vec<_>>()
        .join("\n")
}

/// `['kc', 'q']`
pub fn format_problem_present(ids: &ProblemIds) -> String {
    format!("['{}', '{}']", ids.kc_id, ids.question_id)
}

pub fn format_model_prob(p: f64) -> String {
    format!("{p:.4}")
}

/// Placeholder names the shipped templates use.
pub const PLACEHOLDERS: [&str; 8] = [
    "Problem Text Past",
    "Problem Text Present",
    "Problem Past",
    "Problem Present",
    "Response Code Present",
    "Response Code AST",
    "Model Prob",
    "Correctness",
];

/// The six feedback prompt templates.
#[derive(Debug, Clone)]
pub struct FeedbackTemplates {
    correctness: [PromptTemplate; 3],
    hint: [PromptTemplate; 3],
}

fn trim_asset(s: &str) -> &str {
    s.strip_suffix('\n').unwrap_or(s)
}

impl Default for FeedbackTemplates {
    fn default() -> Self {
        let t = |id: &str, body: &str| PromptTemplate::new(id, trim_asset(body));
        Self {
            correctness: [
                t("correctness/c1", include_str!("../../templates/feedback/correctness/c1.txt")),
                t("correctness/c2", include_str!("../../templates/feedback/correctness/c2.txt")),
                t("correctness/c3", include_str!("../../templates/feedback/correctness/c3.txt")),
            ],
            hint: [
                t("hint/c1", include_str!("../../templates/feedback/hint/c1.txt")),
                t("hint/c2", include_str!("../../templates/feedback/hint/c2.txt")),
                t("hint/c3", include_str!("../../templates/feedback/hint/c3.txt")),
            ],
        }
    }
}

impl FeedbackTemplates {
    /// Reads `{correctness,hint}/{c1,c2,c3}.txt` under `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, FeedbackError> {
        let load = |mode: &str, c: Comparison| -> Result<PromptTemplate, FeedbackError> {
            let path = dir.join(mode).join(format!("{c}.txt"));
            let body = std::fs::read_to_string(&path).map_err(|e| FeedbackError::TemplateFile {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            Ok(PromptTemplate::new(format!("{mode}/{c}"), trim_asset(&body)))
        };
        let mut correctness = Vec::new();
        let mut hint = Vec::new();
        for c in Comparison::ALL {
            correctness.push(load("correctness", c)?);
            hint.push(load("hint", c)?);
        }
        Ok(Self {
            correctness: correctness.try_into().expect("three templates"),
            hint: hint.try_into().expect("three templates"),
        })
    }

    pub fn get(&self, mode: Mode, comparison: Comparison) -> &PromptTemplate {
        match mode {
            Mode::Correctness => &self.correctness[comparison.index()],
            Mode::Hint => &self.hint[comparison.index()],
        }
    }
}

fn values(ctx: &LearnerContext) -> BTreeMap<&'static str, String> {
    let mut v = BTreeMap::new();
    v.insert("Problem Text Past", format_problem_text_past(&ctx.problem_text_past));
    v.insert("Problem Text Present", ctx.problem_text_present.clone());
    v.insert("Problem Past", format_problem_past(&ctx.problem_past_ids));
    v.insert("Problem Present", format_problem_present(&ctx.problem_present_ids));
    v.insert("Model Prob", format_model_prob(ctx.model_prob));
    if let Some(code) = &ctx.response_code_present {
        v.insert("Response Code Present", code.clone());
    }
    if let Some(ast) = &ctx.response_code_ast {
        v.insert("Response Code AST", ast.clone());
    }
    if let Some(c) = ctx.correctness {
        v.insert("Correctness", c.to_string());
    }
    v
}

fn render(template: &PromptTemplate, ctx: &LearnerContext) -> Result<String, FeedbackError> {
    let values = values(ctx);
    // Only the placeholders this template uses are offered.
    let used: BTreeMap<&str, String> = values
        .iter()
        .filter(|(k, _)| template.placeholder_names().contains(**k))
        .map(|(k, v)| (*k, v.clone()))
        .collect();
    let out = template.render(&used)?;
    // Substituted values may legitimately contain braces, so inspect the
    // template skeleton with every value blanked.
    let blanks: BTreeMap<&str, String> = used.keys().map(|k| (*k, String::new())).collect();
    let skeleton = template.render(&blanks)?;
    if let Some(name) = crate::template::placeholders_in(&skeleton).into_iter().next() {
        return Err(FeedbackError::Unresolved(name));
    }
    Ok(out)
}

/// Prompt asking for feedback on a judged submission.
pub fn build_correctness_prompt(
    ctx: &LearnerContext,
    comparison: Comparison,
    templates: &FeedbackTemplates,
) -> Result<String, FeedbackError> {
    ctx.check(Mode::Correctness)?;
    render(templates.get(Mode::Correctness, comparison), ctx)
}

/// Prompt asking for hints before a submission.
pub fn build_hint_prompt(ctx: &LearnerContext, comparison: Comparison, templates: &FeedbackTemplates) -> Result<String, FeedbackError> {
    ctx.check(Mode::Hint)?;
    render(templates.get(Mode::Hint, comparison), ctx)
}

pub fn build_prompt(
    mode: Mode,
    ctx: &LearnerContext,
    comparison: Comparison,
    templates: &FeedbackTemplates,
) -> Result<String, FeedbackError> {
    match mode {
        Mode::Correctness => build_correctness_prompt(ctx, comparison, templates),
        Mode::Hint => build_hint_prompt(ctx, comparison, templates),
    }
}

/// Sends `prompt` to the model under `config`'s retry policy.
pub fn generate_feedback(prompt: &str, client: &dyn LlmClient, config: &LlmClientConfig) -> Result<LlmExchange, FeedbackError> {
    if prompt.trim().is_empty() {
        return Err(FeedbackError::EmptyPrompt);
    }
    Ok(complete_with_retry(client, config, prompt)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::StubLlm;
    use crate::template::placeholders_in;

    fn hint_ctx() -> LearnerContext {
        LearnerContext {
            problem_text_past: vec![PastProblemText { question_text: "Sum a list.".into(), correct: true }],
            problem_past_ids: vec![PastProblemIds { kc_id: "492".into(), question_id: "33".into(), correct: true }],
            problem_text_present: "Replace zap with zp.".into(),
            problem_present_ids: ProblemIds { kc_id: "492".into(), question_id: "34".into() },
            response_code_present: None,
            response_code_ast: None,
            model_prob: 0.73456,
            correctness: None,
        }
    }

    fn correctness_ctx() -> LearnerContext {
        LearnerContext {
            response_code_present: Some("int x = 1;".into()),
            response_code_ast: Some("(program)".into()),
            correctness: Some(Correctness::Incorrect),
            ..hint_ctx()
        }
    }

    #[test]
    fn shipped_templates_use_known_placeholders() {
        let t = FeedbackTemplates::default();
        for mode in [Mode::Correctness, Mode::Hint] {
            for c in Comparison::ALL {
                for name in t.get(mode, c).placeholder_names() {
                    assert!(PLACEHOLDERS.contains(&name.as_str()), "{mode}/{c}: {name}");
                }
            }
        }
        let c2 = t.get(Mode::Correctness, Comparison::C2).placeholder_names();
        assert!(!c2.contains("Problem Text Past") && !c2.contains("Problem Text Present"));
        let h1 = t.get(Mode::Hint, Comparison::C1).placeholder_names();
        assert!(!h1.contains("Correctness") && !h1.contains("Response Code Present"));
    }

    #[test]
    fn c3_starts_with_role_line() {
        let p = build_correctness_prompt(&correctness_ctx(), Comparison::C3, &FeedbackTemplates::default()).unwrap();
        let second = p.lines().nth(1).unwrap();
        assert_eq!(second, "You are a teacher who evaluates a student's programming skills and provides feedback.");
    }

    #[test]
    fn incorrect_c1_keeps_conditional_clause() {
        let p = build_correctness_prompt(&correctness_ctx(), Comparison::C1, &FeedbackTemplates::default()).unwrap();
        assert!(p.contains("4. Next challenge (provide this only in cases of"));
        assert!(p.contains("\nIncorrect\n"));
        assert!(p.contains("0.7346"));
        assert!(placeholders_in(&p).is_empty());
    }

    #[test]
    fn c2_has_ids_only() {
        let p = build_correctness_prompt(&correctness_ctx(), Comparison::C2, &FeedbackTemplates::default()).unwrap();
        assert!(p.contains("['492', '33', 'Correct']"));
        assert!(p.contains("['492', '34']"));
        assert!(!p.contains("Sum a list.") && !p.contains("Replace zap"));
    }

    #[test]
    fn hint_mode_rejects_correctness_fields() {
        let t = FeedbackTemplates::default();
        let mut ctx = hint_ctx();
        ctx.response_code_present = Some("x".into());
        assert!(matches!(build_hint_prompt(&ctx, Comparison::C1, &t), Err(FeedbackError::Context { .. })));
        assert!(matches!(
            build_correctness_prompt(&hint_ctx(), Comparison::C1, &t),
            Err(FeedbackError::Context { .. })
        ));
        let p = build_hint_prompt(&hint_ctx(), Comparison::C1, &t).unwrap();
        assert!(p.contains("1. Positive feedback\n2. Related past history\n3. Similar problems\n4. Key notions of the problem\n"));
    }

    #[test]
    fn code_with_braces_survives() {
        let mut ctx = correctness_ctx();
        ctx.response_code_present = Some("class A { void f() {} }".into());
        let p = build_correctness_prompt(&ctx, Comparison::C1, &FeedbackTemplates::default()).unwrap();
        assert!(p.contains("class A { void f() {} }, (program)"));
    }

    #[test]
    fn probability_bounds_checked() {
        let mut ctx = hint_ctx();
        ctx.model_prob = 1.0;
        assert!(build_hint_prompt(&ctx, Comparison::C1, &FeedbackTemplates::default()).is_err());
    }

    #[test]
    fn generation_passes_through_stub() {
        let stub = StubLlm::fixed("1. Positive feedback\nGreat.");
        let ex = generate_feedback("prompt", &stub, &LlmClientConfig::for_feedback()).unwrap();
        assert_eq!(ex.response, "1. Positive feedback\nGreat.");
        assert!(matches!(generate_feedback(" ", &stub, &LlmClientConfig::for_feedback()), Err(FeedbackError::EmptyPrompt)));
    }
}
