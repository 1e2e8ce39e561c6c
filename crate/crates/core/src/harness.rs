//! Cross-validated runs of the language-model tracer and the recurrent
//! baseline on identical prediction targets.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{FoldSplit, InteractionLog};
use crate::dkt::{dkt_train_eval, DktConfig, DktError, DktFoldResult, DktModel};
use crate::encoder::TextEncoder;
use crate::evaluation::{aggregate_folds, FoldMetrics, MetricError, MetricReport};
use crate::model::{train, ModelError, TrainConfig, TrainedModel};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dkt(#[from] DktError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("fold {fold}: models were scored on different targets")]
    TargetMismatch { fold: usize },
    #[error("fold {fold} has no test targets")]
    NoTargets { fold: usize },
    #[error("run directory: {0}")]
    Io(#[from] std::io::Error),
    #[error("run file: {0}")]
    Json(#[from] serde_json::Error),
}

/// `(student_id, step)` of a scored prediction; step 0 is never scored.
pub type Target = (String, usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTarget {
    pub student_id: String,
    pub step: usize,
    pub probability: f64,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold_index: usize,
    pub metrics: FoldMetrics,
    pub predictions: Vec<ScoredTarget>,
}

impl FoldOutcome {
    pub fn targets(&self) -> Vec<Target> {
        self.predictions.iter().map(|p| (p.student_id.clone(), p.step)).collect()
    }

    fn from_predictions(fold_index: usize, predictions: Vec<ScoredTarget>) -> Result<Self, HarnessError> {
        if predictions.is_empty() {
            return Err(HarnessError::NoTargets { fold: fold_index });
        }
        let scores: Vec<f64> = predictions.iter().map(|p| p.probability).collect();
        let labels: Vec<bool> = predictions.iter().map(|p| p.label).collect();
        Ok(Self { fold_index, metrics: FoldMetrics::compute(&scores, &labels)?, predictions })
    }
}

/// Every interaction after a student's first, in log order.
pub fn evaluation_targets(test: &InteractionLog) -> Vec<Target> {
    test.sequences()
        .flat_map(|(id, seq)| (1..seq.len()).map(move |step| (id.to_string(), step)))
        .collect()
}

/// Scores `trained` on the test students of `fold`.
pub fn lkt_outcome(trained: &TrainedModel, log: &InteractionLog, fold: &FoldSplit) -> Result<FoldOutcome, HarnessError> {
    let test = fold.partition(log).test;
    let samples: Vec<_> = trained.model.samples_for(&test)?.into_iter().filter(|s| s.step >= 1).collect();
    let probs = trained.model.forward(&samples)?;
    let predictions = samples
        .iter()
        .zip(probs)
        .map(|(s, p)| ScoredTarget { student_id: s.student_id.clone(), step: s.step, probability: p, label: s.label })
        .collect();
    FoldOutcome::from_predictions(fold.fold_index, predictions)
}

pub fn dkt_outcome(result: &DktFoldResult) -> Result<FoldOutcome, HarnessError> {
    let predictions = result
        .predictions
        .iter()
        .map(|p| ScoredTarget { student_id: p.student_id.clone(), step: p.step, probability: p.probability, label: p.label })
        .collect();
    FoldOutcome::from_predictions(result.fold_index, predictions)
}

/// One model's cross-validated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub report: MetricReport,
    pub folds: Vec<FoldOutcome>,
}

impl RunSummary {
    pub fn new(model_tag: &str, dataset_tag: &str, folds: Vec<FoldOutcome>) -> Result<Self, HarnessError> {
        let metrics: Vec<FoldMetrics> = folds.iter().map(|f| f.metrics).collect();
        Ok(Self { report: aggregate_folds(model_tag, dataset_tag, &metrics)?, folds })
    }

    pub const FILE: &'static str = "run.json";

    pub fn save(&self, dir: &Path) -> Result<(), HarnessError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(Self::FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, HarnessError> {
        Ok(serde_json::from_str(&fs::read_to_string(dir.join(Self::FILE))?)?)
    }
}

/// Both models on the same folds and targets.
#[derive(Debug, Clone)]
pub struct ComparisonRun {
    pub lkt: RunSummary,
    pub dkt: RunSummary,
    pub trained: Vec<TrainedModel>,
    pub dkt_models: Vec<DktModel>,
}

impl ComparisonRun {
    pub fn reports(&self) -> Vec<MetricReport> {
        vec![self.lkt.report.clone(), self.dkt.report.clone()]
    }
}

pub struct ComparisonSpec<'a> {
    pub dataset_tag: &'a str,
    pub lkt_tag: &'a str,
    pub dkt_tag: &'a str,
    pub train: &'a TrainConfig,
    pub dkt: &'a DktConfig,
}

pub fn run_lkt(
    log: &InteractionLog,
    folds: &[FoldSplit],
    encoder_factory: &dyn Fn() -> Box<dyn TextEncoder>,
    config: &TrainConfig,
    model_tag: &str,
    dataset_tag: &str,
) -> Result<(RunSummary, Vec<TrainedModel>), HarnessError> {
    let trained = train(log, folds, encoder_factory, config)?;
    let outcomes = trained
        .iter()
        .zip(folds)
        .map(|(t, f)| lkt_outcome(t, log, f))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((RunSummary::new(model_tag, dataset_tag, outcomes)?, trained))
}

pub fn run_dkt(
    log: &InteractionLog,
    folds: &[FoldSplit],
    config: &DktConfig,
    model_tag: &str,
    dataset_tag: &str,
) -> Result<(RunSummary, Vec<DktModel>), HarnessError> {
    let results = dkt_train_eval(log, folds, config)?;
    let outcomes = results.iter().map(dkt_outcome).collect::<Result<Vec<_>, _>>()?;
    let models = results.into_iter().map(|r| r.model).collect();
    Ok((RunSummary::new(model_tag, dataset_tag, outcomes)?, models))
}

/// Runs both models and checks they were scored on identical target lists.
pub fn run_comparison(
    log: &InteractionLog,
    folds: &[FoldSplit],
    encoder_factory: &dyn Fn() -> Box<dyn TextEncoder>,
    spec: &ComparisonSpec<'_>,
) -> Result<ComparisonRun, HarnessError> {
    let (lkt, trained) = run_lkt(log, folds, encoder_factory, spec.train, spec.lkt_tag, spec.dataset_tag)?;
    let (dkt, dkt_models) = run_dkt(log, folds, spec.dkt, spec.dkt_tag, spec.dataset_tag)?;
    for (a, b) in lkt.folds.iter().zip(&dkt.folds) {
        if a.targets() != b.targets() {
            return Err(HarnessError::TargetMismatch { fold: a.fold_index });
        }
    }
    Ok(ComparisonRun { lkt, dkt, trained, dkt_models })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Interaction;

    #[test]
    fn targets_skip_first_step() {
        let log = InteractionLog::from_interactions(vec![
            Interaction::new("a", "q1", "k", true),
            Interaction::new("a", "q2", "k", true),
            Interaction::new("b", "q1", "k", false),
            Interaction::new("a", "q3", "k", false),
        ])
        .unwrap();
        assert_eq!(evaluation_targets(&log), vec![("a".to_string(), 1), ("a".to_string(), 2)]);
    }

    #[test]
    fn run_summary_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let folds = (0..2)
            .map(|i| FoldOutcome {
                fold_index: i,
                metrics: FoldMetrics { auc: 0.7, acc: 0.6 },
                predictions: vec![ScoredTarget { student_id: "s".into(), step: 1, probability: 0.4, label: true }],
            })
            .collect();
        let run = RunSummary::new("m", "d", folds).unwrap();
        run.save(dir.path()).unwrap();
        assert_eq!(RunSummary::load(dir.path()).unwrap(), run);
    }
}
