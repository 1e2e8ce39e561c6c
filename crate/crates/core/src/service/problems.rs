//! Problem bank and the submission judge.

use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Language;

#[derive(Debug, Error)]
pub enum BankError {
    #[error("problem bank `{path}`: {message}")]
    Load { path: String, message: String },
    #[error("problem bank is empty")]
    Empty,
    #[error("duplicate question_id `{0}` in problem bank")]
    Duplicate(String),
    #[error("problem `{question_id}`: invalid reference regex: {message}")]
    Regex { question_id: String, message: String },
}

/// How the reference judge decides correctness.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum ReferencePredicate {
    /// Equal after collapsing whitespace.
    Exact(String),
    Contains(String),
    Regex(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub question_id: String,
    pub kc_id: String,
    pub kc_text: String,
    pub question_text: String,
    #[serde(default)]
    pub language: Language,
    pub reference: ReferencePredicate,
}

/// What clients may see of a problem (no reference answer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemView {
    pub index: usize,
    pub question_id: String,
    pub kc_id: String,
    pub kc_text: String,
    pub question_text: String,
    pub language: Language,
}

#[derive(Debug, Clone)]
pub struct ProblemBank {
    problems: Vec<Problem>,
}

impl ProblemBank {
    pub fn new(problems: Vec<Problem>) -> Result<Self, BankError> {
        if problems.is_empty() {
            return Err(BankError::Empty);
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in &problems {
            if !seen.insert(p.question_id.as_str()) {
                return Err(BankError::Duplicate(p.question_id.clone()));
            }
            if let ReferencePredicate::Regex(r) = &p.reference {
                Regex::new(r).map_err(|e| BankError::Regex { question_id: p.question_id.clone(), message: e.to_string() })?;
            }
        }
        Ok(Self { problems })
    }

    /// JSON array of problems.
    pub fn from_file(path: &Path) -> Result<Self, BankError> {
        let err = |message: String| BankError::Load { path: path.display().to_string(), message };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let problems: Vec<Problem> = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        Self::new(problems)
    }

    pub fn problems(&self) -> &[Problem] {
        &self.problems
    }

    pub fn get(&self, question_id: &str) -> Option<(usize, &Problem)> {
        self.problems.iter().enumerate().find(|(_, p)| p.question_id == question_id)
    }

    pub fn view(&self, question_id: &str) -> Option<ProblemView> {
        self.get(question_id).map(|(index, p)| ProblemView {
            index,
            question_id: p.question_id.clone(),
            kc_id: p.kc_id.clone(),
            kc_text: p.kc_text.clone(),
            question_text: p.question_text.clone(),
            language: p.language,
        })
    }

    pub fn views(&self) -> Vec<ProblemView> {
        self.problems.iter().filter_map(|p| self.view(&p.question_id)).collect()
    }
}

#[derive(Debug, Error)]
#[error("judge unavailable: {0}")]
pub struct JudgeUnavailable(pub String);

/// Decides whether submitted code solves a problem.
pub trait Judge: Send + Sync {
    fn judge(&self, problem: &Problem, code: &str) -> Result<bool, JudgeUnavailable>;
}

/// Checks code against the problem's reference predicate.
#[derive(Debug, Default, Clone, Copy)]
pub struct ReferenceJudge;

fn collapse(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl Judge for ReferenceJudge {
    fn judge(&self, problem: &Problem, code: &str) -> Result<bool, JudgeUnavailable> {
        Ok(match &problem.reference {
            ReferencePredicate::Exact(r) => collapse(r) == collapse(code),
            ReferencePredicate::Contains(r) => code.contains(r.as_str()),
            ReferencePredicate::Regex(r) => Regex::new(r).map_err(|e| JudgeUnavailable(e.to_string()))?.is_match(code),
        })
    }
}
