//! The optional `--config` file (TOML or JSON).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use serde_json::Value;

use codelkt::adaptation::DaptConfig;
use codelkt::dkt::DktConfig;
use codelkt::encoder::ToyConfig;
use codelkt::feedback::Comparison;
use codelkt::llm::LlmClientConfig;
use codelkt::model::TrainConfig;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub train: TrainConfig,
    pub dkt: DktConfig,
    pub dapt: DaptConfig,
    pub toy: ToyConfig,
    /// Overrides on top of the enrichment LLM defaults.
    pub enrich_llm: Option<Value>,
    /// Overrides on top of the feedback LLM defaults.
    pub feedback_llm: Option<Value>,
    pub serve: ServeConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub data_dir: PathBuf,
    pub problem_bank: Option<PathBuf>,
    pub comparison: Comparison,
    pub snapshot_every: usize,
    /// Checkpoint directory of a trained tracer used for `model_prob`.
    pub lkt_model: Option<PathBuf>,
    /// Baseline model file used for `c2` prompts.
    pub dkt_model: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub static_dir: Option<PathBuf>,
    pub host: String,
    pub port: u16,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("codelkt-data"),
            problem_bank: None,
            comparison: Comparison::C1,
            snapshot_every: 16,
            lkt_model: None,
            dkt_model: None,
            templates: None,
            static_dir: None,
            host: "127.0.0.1".into(),
            port: 8080,
        }
    }
}

impl ServeConfig {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data_dir);
        for p in [&mut self.problem_bank, &mut self.lkt_model, &mut self.dkt_model, &mut self.templates, &mut self.static_dir]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }
}

impl FileConfig {
    /// Reads `path`; relative paths in `[serve]` resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut config: FileConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
            Some("toml") => toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
            _ => bail!("config {} must be a .toml or .json file", path.display()),
        };
        config.serve.resolve(path.parent().unwrap_or(Path::new(".")));
        Ok(config)
    }

    pub fn enrich_llm(&self) -> Result<LlmClientConfig> {
        overlay(LlmClientConfig::for_enrichment(), self.enrich_llm.as_ref())
    }

    pub fn feedback_llm(&self) -> Result<LlmClientConfig> {
        overlay(LlmClientConfig::for_feedback(), self.feedback_llm.as_ref())
    }
}

fn overlay(base: LlmClientConfig, patch: Option<&Value>) -> Result<LlmClientConfig> {
    let Some(patch) = patch else {
        return Ok(base);
    };
    let Value::Object(patch) = patch else {
        bail!("LLM settings must be a table");
    };
    let mut value = serde_json::to_value(base)?;
    let target = value.as_object_mut().expect("config serializes to an object");
    for (k, v) in patch {
        if !target.contains_key(k) {
            bail!("unknown LLM setting `{k}`");
        }
        target.insert(k.clone(), v.clone());
    }
    Ok(serde_json::from_value(value)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feedback_overrides_keep_other_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(
            &path,
            "seed = 3\n[feedback_llm]\nmodel_name = \"m\"\n[train]\nmax_epochs = 4\n[serve]\ndata_dir = \"d\"\nport = 9000\n",
        )
        .unwrap();
        let c = FileConfig::load(&path).unwrap();
        let llm = c.feedback_llm().unwrap();
        assert_eq!(llm.model_name, "m");
        assert_eq!(llm.temperature, 0.7);
        assert_eq!(c.train.max_epochs, 4);
        assert_eq!(c.train.learning_rate, 5e-5);
        assert_eq!(c.serve.data_dir, dir.path().join("d"));
        assert_eq!(c.serve.port, 9000);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"feedback_llm": {"temp": 1}}"#).unwrap();
        assert!(FileConfig::load(&path).unwrap().feedback_llm().is_err());
        std::fs::write(&path, r#"{"bogus": 1}"#).unwrap();
        assert!(FileConfig::load(&path).is_err());
    }
}
