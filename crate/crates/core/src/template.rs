//! `{Placeholder}` prompt templates.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

static PLACEHOLDER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\{([A-Za-z][A-Za-z0-9 _]*)\}").expect("valid regex"));

#[derive(Debug, Error, PartialEq)]
pub enum TemplateError {
    #[error("template `{template}`: no value for placeholder {{{name}}}")]
    MissingValue { template: String, name: String },
    #[error("template `{template}`: declared placeholders {declared:?} do not match body placeholders {found:?}")]
    Declaration {
        template: String,
        declared: BTreeSet<String>,
        found: BTreeSet<String>,
    },
}

/// A prompt body with named `{placeholder}` slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub template_id: String,
    body: String,
    placeholder_names: BTreeSet<String>,
}

impl PromptTemplate {
    /// Builds a template whose placeholder set is read off the body.
    pub fn new(template_id: impl Into<String>, body: impl Into<String>) -> Self {
        let body = body.into();
        let placeholder_names = placeholders_in(&body);
        Self { template_id: template_id.into(), body, placeholder_names }
    }

    /// Builds a template and checks the declared placeholder set against the body.
    pub fn with_declared<I, S>(template_id: impl Into<String>, body: impl Into<String>, declared: I) -> Result<Self, TemplateError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let t = Self::new(template_id, body);
        let declared: BTreeSet<String> = declared.into_iter().map(Into::into).collect();
        if declared != t.placeholder_names {
            return Err(TemplateError::Declaration {
                template: t.template_id,
                declared,
                found: t.placeholder_names,
            });
        }
        Ok(t)
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn placeholder_names(&self) -> &BTreeSet<String> {
        &self.placeholder_names
    }

    /// Substitutes every placeholder in one pass; inserted values are not rescanned.
    pub fn render(&self, values: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.body.len());
        let mut last = 0;
        for cap in PLACEHOLDER.captures_iter(&self.body) {
            let whole = cap.get(0).expect("group 0");
            let name = &cap[1];
            let value = values.get(name).ok_or_else(|| TemplateError::MissingValue {
                template: self.template_id.clone(),
                name: name.to_string(),
            })?;
            out.push_str(&self.body[last..whole.start()]);
            out.push_str(value);
            last = whole.end();
        }
        out.push_str(&self.body[last..]);
        Ok(out)
    }
}

/// Placeholder names appearing in `text`.
pub fn placeholders_in(text: &str) -> BTreeSet<String> {
    PLACEHOLDER.captures_iter(text).map(|c| c[1].to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_and_does_not_rescan_values() {
        let t = PromptTemplate::new("t", "code: {code} / again {code}");
        let mut v = BTreeMap::new();
        v.insert("code", "class A { {code} }".to_string());
        assert_eq!(t.render(&v).unwrap(), "code: class A { {code} } / again class A { {code} }");
    }

    #[test]
    fn names_with_spaces() {
        let t = PromptTemplate::new("t", "{Problem Text Past}\n{Model Prob}");
        assert_eq!(t.placeholder_names().len(), 2);
        assert!(t.placeholder_names().contains("Problem Text Past"));
    }

    #[test]
    fn missing_value_named() {
        let t = PromptTemplate::new("t", "{a} {b}");
        let mut v = BTreeMap::new();
        v.insert("a", "1".to_string());
        assert_eq!(
            t.render(&v).unwrap_err(),
            TemplateError::MissingValue { template: "t".into(), name: "b".into() }
        );
    }

    #[test]
    fn declared_set_must_match() {
        assert!(PromptTemplate::with_declared("t", "{a}", ["a"]).is_ok());
        assert!(PromptTemplate::with_declared("t", "{a}", ["a", "b"]).is_err());
        assert!(PromptTemplate::with_declared("t", "{a} {b}", ["a"]).is_err());
    }

    #[test]
    fn java_braces_are_not_placeholders() {
        assert!(placeholders_in("if (x) { return 1; }").is_empty());
    }
}
