//! Splitting an LLM answer into its output-form components.

use std::sync::LazyLock;

use indexmap::IndexMap;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{Comparison, Correctness, FeedbackError, Mode};

pub const POSITIVE_FEEDBACK: &str = "Positive feedback";
pub const ANALYSIS: &str = "Analysis about the answer";
pub const CORRECTION: &str = "Correction of the answer / Tips for improvement";
pub const NEXT_CHALLENGE: &str = "Next challenge";
pub const CHEERING_UP: &str = "comments for cheering up";
pub const RELATED_HISTORY: &str = "Related past history";
pub const SIMILAR_PROBLEMS: &str = "Similar problems";
pub const KEY_NOTIONS: &str = "Key notions of the problem";

pub const CORRECTNESS_COMPONENTS: [&str; 5] = [POSITIVE_FEEDBACK, ANALYSIS, CORRECTION, NEXT_CHALLENGE, CHEERING_UP];
pub const HINT_COMPONENTS: [&str; 4] = [POSITIVE_FEEDBACK, RELATED_HISTORY, SIMILAR_PROBLEMS, KEY_NOTIONS];

impl Mode {
    pub fn components(self) -> &'static [&'static str] {
        match self {
            Mode::Correctness => &CORRECTNESS_COMPONENTS,
            Mode::Hint => &HINT_COMPONENTS,
        }
    }
}

/// A parsed feedback answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackBundle {
    pub mode: Mode,
    pub comparison: Option<Comparison>,
    pub components: IndexMap<String, String>,
    /// Text before the first recognized heading.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub preamble: String,
    /// Sections removed because the protocol forbids them.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub overflow: Vec<String>,
    pub protocol_violation: bool,
    pub raw_response: String,
}

// Optional markdown heading marks, bold, and numbering, then the title.
static HEADING: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^\s*(?P<hash>#{1,6}\s*)?(?P<b1>\*\*)?\s*(?P<num>\d{1,2}\s*[.)]\s*)?(?P<b2>\*\*)?\s*(?P<title>.*)$")
        .expect("valid regex")
});

fn normalize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_alphanumeric() { c.to_ascii_lowercase() } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Alternative spellings accepted for a component.
fn aliases(name: &str) -> Vec<String> {
    let mut v = vec![normalize(name)];
    if name == CORRECTION {
        v.push("correction of the answer".into());
        v.push("tips for improvement".into());
    }
    if name == CHEERING_UP {
        v.push("comment for cheering up".into());
        v.push("cheering up".into());
    }
    v
}

/// If `line` is a heading for one of `names`, the component and any text
/// following the heading on the same line.
fn match_heading<'a>(line: &str, names: &[&'a str]) -> Option<(&'a str, String)> {
    let caps = HEADING.captures(line)?;
    let marked = caps.name("hash").is_some() || caps.name("b1").is_some() || caps.name("b2").is_some() || caps.name("num").is_some();
    let title = caps.name("title").map_or("", |m| m.as_str());
    let mut best: Option<(&'a str, usize)> = None;
    for &name in names {
        for alias in aliases(name) {
            // Compare word by word so "Next challenge:" and "NEXT CHALLENGE" both match.
            let mut consumed = 0usize;
            let mut words = alias.split(' ');
            let mut ok = true;
            let mut rest = title;
            for w in words.by_ref() {
                let trimmed = rest.trim_start_matches(|c: char| !c.is_alphanumeric());
                consumed += rest.len() - trimmed.len();
                if trimmed.len() < w.len() || !trimmed[..w.len()].eq_ignore_ascii_case(w) {
                    ok = false;
                    break;
                }
                let after = &trimmed[w.len()..];
                if after.chars().next().is_some_and(char::is_alphanumeric) {
                    ok = false;
                    break;
                }
                consumed += w.len();
                rest = after;
            }
            if ok && best.is_none_or(|(_, c)| consumed > c) {
                best = Some((name, consumed));
            }
        }
    }
    let (name, consumed) = best?;
    let rest = title[consumed..].trim_start_matches(['*', ' ']);
    let (has_colon, rest) = match rest.strip_prefix(':') {
        Some(r) => (true, r.trim_start_matches(['*', ' '])),
        None => (false, rest),
    };
    let rest = rest.trim();
    // An unmarked line is a heading only when nothing but a colon follows the title
    // or the title stands alone.
    if !marked && !has_colon && !rest.is_empty() {
        return None;
    }
    // A trailing parenthetical copied from the output form is not content.
    let rest = if rest.starts_with('(') && rest.ends_with(')') { "" } else { rest };
    Some((name, rest.to_string()))
}

fn tidy(text: &str) -> String {
    text.trim_matches('\n').trim_end().lines().collect::<Vec<_>>().join("\n").trim().to_string()
}

/// Splits `raw` on component headings.
///
/// Text before the first heading is kept as preamble; text after a heading
/// belongs to it until the next heading. With `Incorrect` correctness a
/// "Next challenge" section is moved to `overflow` and flagged.
pub fn parse_feedback(raw: &str, mode: Mode, correctness: Option<Correctness>) -> Result<FeedbackBundle, FeedbackError> {
    if raw.trim().is_empty() {
        return Err(FeedbackError::EmptyResponse);
    }
    let names = mode.components();
    let mut preamble = String::new();
    let mut sections: Vec<(&str, String)> = Vec::new();
    for line in raw.lines() {
        if let Some((name, rest)) = match_heading(line, names) {
            sections.push((name, rest));
            continue;
        }
        let target = match sections.last_mut() {
            Some((_, text)) => text,
            None => &mut preamble,
        };
        if !target.is_empty() {
            target.push('\n');
        }
        target.push_str(line);
    }
    if sections.is_empty() {
        return Err(FeedbackError::NoComponents { raw: raw.to_string() });
    }

    let mut components: IndexMap<String, String> = IndexMap::new();
    let mut overflow = Vec::new();
    let mut protocol_violation = false;
    for (name, text) in sections {
        let text = tidy(&text);
        if name == NEXT_CHALLENGE && correctness == Some(Correctness::Incorrect) {
            protocol_violation = true;
            overflow.push(text);
            continue;
        }
        components
            .entry(name.to_string())
            .and_modify(|t| {
                if !text.is_empty() {
                    if !t.is_empty() {
                        t.push_str("\n\n");
                    }
                    t.push_str(&text);
                }
            })
            .or_insert(text);
    }
    Ok(FeedbackBundle {
        mode,
        comparison: None,
        components,
        preamble: tidy(&preamble),
        overflow,
        protocol_violation,
        raw_response: raw.to_string(),
    })
}

/// `1. Name:\ntext` blocks separated by blank lines.
pub fn render_components(components: &IndexMap<String, String>) -> String {
    components
        .iter()
        .enumerate()
        .map(|(i, (name, text))| format!("{}. {name}:\n{text}", i + 1))
        .collect::<Vec<_>>()
        .join("\n\n")
}
