//! AUC/ACC metrics, fold aggregation and report tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("AUC undefined: labels contain a single class")]
    SingleClass,
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("metric needs a nonempty batch")]
    Empty,
    #[error("aggregation needs at least 2 folds, got {0}")]
    TooFewFolds(usize),
    #[error("score is not finite")]
    NonFinite,
}

fn check(scores: &[f64], labels: &[bool]) -> Result<(), MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch { scores: scores.len(), labels: labels.len() });
    }
    if scores.is_empty() {
        return Err(MetricError::Empty);
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    Ok(())
}

/// Area under the ROC curve as the Mann–Whitney statistic, ties counted half.
///
/// Computed from midranks in O(n log n).
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    check(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of doubled midranks of positives keeps everything in integers.
    let mut rank2_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1, doubled midrank = i + j + 2
        let mid2 = (i + j + 2) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        rank2_sum += mid2 * pos_in_group;
        i = j + 1;
    }
    let (p, q) = (n_pos as u128, n_neg as u128);
    let u2 = rank2_sum - p * (p + 1);
    Ok(u2 as f64 / (2 * p * q) as f64)
}

/// Fraction of predictions matching the label, with `score >= threshold` positive.
pub fn acc(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64, MetricError> {
    check(scores, labels)?;
    let hits = scores.iter().zip(labels).filter(|(s, l)| (**s >= threshold) == **l).count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Default decision threshold.
pub const ACC_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub auc: f64,
    pub acc: f64,
}

impl FoldMetrics {
    pub fn compute(scores: &[f64], labels: &[bool]) -> Result<Self, MetricError> {
        Ok(Self { auc: auc(scores, labels)?, acc: acc(scores, labels, ACC_THRESHOLD)? })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub auc_mean: f64,
    pub auc_std: f64,
    pub acc_mean: f64,
    pub acc_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model_tag: String,
    pub dataset_tag: String,
    pub per_fold: Vec<FoldMetrics>,
    pub aggregate: Aggregate,
}

impl MetricReport {
    pub fn auc_cell(&self) -> String {
        mean_std(self.aggregate.auc_mean, self.aggregate.auc_std)
    }

    pub fn acc_cell(&self) -> String {
        mean_std(self.aggregate.acc_mean, self.aggregate.acc_std)
    }
}

/// Mean and population standard deviation.
pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `0.9116±0.0096`
pub fn mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.4}±{std:.4}")
}

pub fn aggregate_folds(
    model_tag: impl Into<String>,
    dataset_tag: impl Into<String>,
    per_fold: &[FoldMetrics],
) -> Result<MetricReport, MetricError> {
    if per_fold.len() < 2 {
        return Err(MetricError::TooFewFolds(per_fold.len()));
    }
    let aucs: Vec<f64> = per_fold.iter().map(|f| f.auc).collect();
    let accs: Vec<f64> = per_fold.iter().map(|f| f.acc).collect();
    let (auc_mean, auc_std) = mean_and_std(&aucs);
    let (acc_mean, acc_std) = mean_and_std(&accs);
    Ok(MetricReport {
        model_tag: model_tag.into(),
        dataset_tag: dataset_tag.into(),
        per_fold: per_fold.to_vec(),
        aggregate: Aggregate { auc_mean, auc_std, acc_mean, acc_std },
    })
}

/// Rows are models in first-seen order, column pairs are datasets in first-seen order.
fn layout(reports: &[MetricReport]) -> (Vec<&str>, Vec<&str>) {
    let mut models: Vec<&str> = Vec::new();
    let mut datasets: Vec<&str> = Vec::new();
    for r in reports {
        if !models.contains(&r.model_tag.as_str()) {
            models.push(&r.model_tag);
        }
        if !datasets.contains(&r.dataset_tag.as_str()) {
            datasets.push(&r.dataset_tag);
        }
    }
    (models, datasets)
}

fn cells<'a>(reports: &'a [MetricReport], model: &str, dataset: &str) -> (String, String) {
    reports
        .iter()
        .find(|r| r.model_tag == model && r.dataset_tag == dataset)
        .map(|r| (r.auc_cell(), r.acc_cell()))
        .unwrap_or_else(|| ("-".into(), "-".into()))
}

pub fn render_markdown(reports: &[MetricReport]) -> String {
    let (models, datasets) = layout(reports);
    let mut out = String::from("| Model |");
    for d in &datasets {
        let _ = write!(out, " {d} AUC | {d} ACC |");
    }
    out.push_str("\n|---|");
    for _ in &datasets {
        out.push_str("---|---|");
    }
    out.push('\n');
    for m in &models {
        let _ = write!(out, "| {m} |");
        for d in &datasets {
            let (a, c) = cells(reports, m, d);
            let _ = write!(out, " {a} | {c} |");
        }
        out.push('\n');
    }
    out
}

pub fn render_csv(reports: &[MetricReport]) -> String {
    let (models, datasets) = layout(reports);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["model".to_string()];
    for d in &datasets {
        header.push(format!("{d} AUC"));
        header.push(format!("{d} ACC"));
    }
    w.write_record(&header).expect("in-memory write");
    for m in &models {
        let mut row = vec![m.to_string()];
        for d in &datasets {
            let (a, c) = cells(reports, m, d);
            row.push(a);
            row.push(c);
        }
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}
