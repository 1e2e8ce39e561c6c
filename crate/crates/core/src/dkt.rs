//! Recurrent knowledge-tracing baseline over one-hot interaction encodings.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{FoldSplit, Interaction, InteractionLog};
use crate::evaluation::{acc, auc, FoldMetrics, MetricError, ACC_THRESHOLD};
use crate::model::{bce_loss, sigmoid, EpochRecord, MetricHistory, ModelError, SelectionMetric};
use crate::optim::{AdamW, EarlyStopping, StopDecision};

#[derive(Debug, Error)]
pub enum DktError {
    #[error("unknown kc_id `{0}`")]
    UnknownSkill(String),
    #[error("fold {fold} has no {stream} prediction targets")]
    NoTargets { fold: usize, stream: &'static str },
    #[error("invalid DKT config: {0}")]
    Config(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Bijection between KC ids and `0..M`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillIndex {
    kcs: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl SkillIndex {
    pub fn new<I, S>(kcs: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut kcs: Vec<String> = kcs.into_iter().map(Into::into).collect();
        kcs.sort();
        kcs.dedup();
        let index = kcs.iter().enumerate().map(|(i, k)| (k.clone(), i)).collect();
        Self { kcs, index }
    }

    pub fn from_log(log: &InteractionLog) -> Self {
        Self::new(log.kc_vocabulary().iter().cloned())
    }

    pub fn len(&self) -> usize {
        self.kcs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kcs.is_empty()
    }

    pub fn index_of(&self, kc_id: &str) -> Result<usize, DktError> {
        self.index.get(kc_id).copied().ok_or_else(|| DktError::UnknownSkill(kc_id.to_string()))
    }

    pub fn kc_of(&self, index: usize) -> Option<&str> {
        self.kcs.get(index).map(String::as_str)
    }
}

/// Position `skill + M·correct` set to one.
pub fn encode_onehot(interaction: &Interaction, skills: &SkillIndex) -> Result<Vec<f64>, DktError> {
    let k = skills.index_of(&interaction.kc_id)?;
    let mut v = vec![0.0; 2 * skills.len()];
    v[k + skills.len() * usize::from(interaction.correct)] = 1.0;
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DktConfig {
    pub hidden_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    /// Students per optimizer step.
    pub batch_students: usize,
    pub seed: u64,
    pub label_clamp_epsilon: f64,
}

impl Default for DktConfig {
    fn default() -> Self {
        Self {
            hidden_size: 64,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            max_epochs: 100,
            early_stop_patience: 10,
            batch_students: 32,
            seed: 0,
            label_clamp_epsilon: 1e-7,
        }
    }
}

/// One student's sequence as (input one-hot index, skill, correct).
#[derive(Debug, Clone)]
struct Sequence {
    student_id: String,
    steps: Vec<(usize, usize, bool)>,
}

/// One prediction target: step `step` of `student_id`, predicted from steps before it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetPrediction {
    pub student_id: String,
    pub step: usize,
    pub probability: f64,
    pub label: bool,
}

/// Single-layer tanh RNN with a sigmoid output per skill.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DktModel {
    pub skills: SkillIndex,
    pub hidden_size: usize,
    params: Vec<f64>,
}

struct Forward {
    hidden: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

impl DktModel {
    pub fn save(&self, path: &std::path::Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string(self).expect("model serializes"))
    }

    pub fn load(path: &std::path::Path) -> std::io::Result<Self> {
        serde_json::from_str(&std::fs::read_to_string(path)?).map_err(std::io::Error::other)
    }

    pub fn new(skills: SkillIndex, hidden_size: usize, seed: u64) -> Self {
        let m = skills.len();
        let h = hidden_size;
        let n = h * 2 * m + h * h + h + m * h + m;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (h as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bounds");
        let mut params: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
        let mut model = Self { skills, hidden_size, params: Vec::new() };
        for r in model.no_decay_ranges() {
            params[r].iter_mut().for_each(|p| *p = 0.0);
        }
        model.params = params;
        model
    }

    fn m(&self) -> usize {
        self.skills.len()
    }
    fn w_xh(&self) -> Range<usize> {
        0..self.hidden_size * 2 * self.m()
    }
    fn w_hh(&self) -> Range<usize> {
        let s = self.w_xh().end;
        s..s + self.hidden_size * self.hidden_size
    }
    fn b_h(&self) -> Range<usize> {
        let s = self.w_hh().end;
        s..s + self.hidden_size
    }
    fn w_hy(&self) -> Range<usize> {
        let s = self.b_h().end;
        s..s + self.m() * self.hidden_size
    }
    fn b_y(&self) -> Range<usize> {
        let s = self.w_hy().end;
        s..s + self.m()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn no_decay_ranges(&self) -> Vec<Range<usize>> {
        vec![self.b_h(), self.b_y()]
    }

    fn sequence(&self, student_id: &str, seq: &[Interaction]) -> Result<Sequence, DktError> {
        let m = self.m();
        let steps = seq
            .iter()
            .map(|it| {
                let k = self.skills.index_of(&it.kc_id)?;
                Ok((k + m * usize::from(it.correct), k, it.correct))
            })
            .collect::<Result<Vec<_>, DktError>>()?;
        Ok(Sequence { student_id: student_id.to_string(), steps })
    }

    fn sequences(&self, log: &InteractionLog) -> Result<Vec<Sequence>, DktError> {
        log.sequences().map(|(id, seq)| self.sequence(id, seq)).collect()
    }

    /// Hidden states after each step and predictions for steps `1..n`.
    fn forward(&self, seq: &Sequence) -> Forward {
        let h = self.hidden_size;
        let p = &self.params;
        let (w_xh, w_hh, b_h, w_hy, b_y) = (self.w_xh(), self.w_hh(), self.b_h(), self.w_hy(), self.b_y());
        let two_m = 2 * self.m();
        let mut hidden = Vec::with_capacity(seq.steps.len());
        let mut prev = vec![0.0; h];
        let mut probs = Vec::with_capacity(seq.steps.len().saturating_sub(1));
        for (t, &(x, _, _)) in seq.steps.iter().enumerate() {
            let mut a: Vec<f64> = (0..h)
                .map(|r| {
                    let rec: f64 = p[w_hh.start + r * h..w_hh.start + (r + 1) * h].iter().zip(&prev).map(|(w, v)| w * v).sum();
                    p[w_xh.start + r * two_m + x] + rec + p[b_h.start + r]
                })
                .collect();
            a.iter_mut().for_each(|v| *v = v.tanh());
            if let Some(&(_, next_skill, _)) = seq.steps.get(t + 1) {
                let row = w_hy.start + next_skill * h;
                let z: f64 = p[row..row + h].iter().zip(&a).map(|(w, v)| w * v).sum::<f64>() + p[b_y.start + next_skill];
                probs.push(sigmoid(z));
            }
            prev = a.clone();
            hidden.push(a);
        }
        Forward { hidden, probs }
    }

    /// Summed BCE over the sequence's targets; adds gradients into `grad`.
    fn backward(&self, seq: &Sequence, eps: f64, grad: &mut [f64]) -> f64 {
        let f = self.forward(seq);
        let h = self.hidden_size;
        let p = &self.params;
        let (w_xh, w_hh, b_h, w_hy, b_y) = (self.w_xh(), self.w_hh(), self.b_h(), self.w_hy(), self.b_y());
        let two_m = 2 * self.m();
        let n = seq.steps.len();
        let mut loss = 0.0;
        let mut carry = vec![0.0; h];
        for t in (0..n).rev() {
            let mut gh = carry.clone();
            if t + 1 < n {
                let (_, skill, label) = seq.steps[t + 1];
                let prob = f.probs[t];
                loss += bce_loss(&[prob], &[label], eps).expect("one element");
                let clamped = prob < eps || prob > 1.0 - eps;
                let dz = if clamped { 0.0 } else { prob - f64::from(u8::from(label)) };
                let row = w_hy.start + skill * h;
                for k in 0..h {
                    grad[row + k] += dz * f.hidden[t][k];
                    gh[k] += dz * p[row + k];
                }
                grad[b_y.start + skill] += dz;
            }
            let ga: Vec<f64> = gh.iter().zip(&f.hidden[t]).map(|(g, v)| g * (1.0 - v * v)).collect();
            let x = seq.steps[t].0;
            carry = vec![0.0; h];
            for r in 0..h {
                let g = ga[r];
                if g == 0.0 {
                    continue;
                }
                grad[w_xh.start + r * two_m + x] += g;
                grad[b_h.start + r] += g;
                if t > 0 {
                    let prev = &f.hidden[t - 1];
                    for c in 0..h {
                        grad[w_hh.start + r * h + c] += g * prev[c];
                        carry[c] += g * p[w_hh.start + r * h + c];
                    }
                }
            }
        }
        loss
    }

    fn targets(&self, seqs: &[Sequence]) -> Vec<TargetPrediction> {
        seqs.iter()
            .flat_map(|s| {
                let f = self.forward(s);
                f.probs
                    .into_iter()
                    .enumerate()
                    .map(|(i, prob)| TargetPrediction {
                        student_id: s.student_id.clone(),
                        step: i + 1,
                        probability: prob,
                        label: s.steps[i + 1].2,
                    })
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// Predictions for every step after the first of every student.
    pub fn predict(&self, log: &InteractionLog) -> Result<Vec<TargetPrediction>, DktError> {
        Ok(self.targets(&self.sequences(log)?))
    }

    /// Probability of answering a `kc_id` item correctly after `history`.
    pub fn predict_next(&self, history: &[Interaction], kc_id: &str) -> Result<f64, DktError> {
        let skill = self.skills.index_of(kc_id)?;
        let mut seq = self.sequence("", history)?;
        if seq.steps.is_empty() {
            let z = self.params[self.b_y().start + skill];
            return Ok(sigmoid(z));
        }
        seq.steps.push((0, skill, false));
        Ok(*self.forward(&seq).probs.last().expect("at least one target"))
    }
}

fn check(config: &DktConfig) -> Result<(), DktError> {
    if config.hidden_size == 0 || config.batch_students == 0 || config.max_epochs == 0 || config.early_stop_patience == 0 {
        return Err(DktError::Config("sizes, epochs and patience must be positive".into()));
    }
    if !(config.learning_rate > 0.0) {
        return Err(DktError::Config("learning_rate must be positive".into()));
    }
    Ok(())
}

/// Trains on `train`, selecting epochs by validation AUC (ACC when single-class).
pub fn fit_dkt(
    skills: SkillIndex,
    train: &InteractionLog,
    validation: &InteractionLog,
    config: &DktConfig,
) -> Result<(DktModel, MetricHistory), DktError> {
    check(config)?;
    let mut model = DktModel::new(skills, config.hidden_size, config.seed);
    let train_seqs = model.sequences(train)?;
    let val_seqs = model.sequences(validation)?;
    let n_train_targets: usize = train_seqs.iter().map(|s| s.steps.len().saturating_sub(1)).sum();
    if n_train_targets == 0 {
        return Err(DktError::NoTargets { fold: 0, stream: "training" });
    }
    let val_labels: Vec<bool> = model.targets(&val_seqs).iter().map(|t| t.label).collect();
    if val_labels.is_empty() {
        return Err(DktError::NoTargets { fold: 0, stream: "validation" });
    }
    let selection = if val_labels.iter().all(|&l| l == val_labels[0]) {
        SelectionMetric::Acc
    } else {
        SelectionMetric::Auc
    };

    let mut opt = AdamW::new(model.params.len(), config.learning_rate, config.weight_decay, &model.no_decay_ranges());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_seqs.len()).collect();
    let mut stopper = EarlyStopping::new(config.early_stop_patience);
    let mut best = model.params.clone();
    let mut epochs = Vec::new();
    let mut stopped_epoch = config.max_epochs;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_students) {
            let mut grad = vec![0.0; model.params.len()];
            let mut n = 0usize;
            for &i in batch {
                loss_sum += model.backward(&train_seqs[i], config.label_clamp_epsilon, &mut grad);
                n += train_seqs[i].steps.len().saturating_sub(1);
            }
            if n == 0 {
                continue;
            }
            grad.iter_mut().for_each(|g| *g /= n as f64);
            opt.step(&mut model.params, &grad);
        }
        let probs: Vec<f64> = model.targets(&val_seqs).iter().map(|t| t.probability).collect();
        let val_acc = acc(&probs, &val_labels, ACC_THRESHOLD)?;
        let val_auc = match selection {
            SelectionMetric::Auc => Some(auc(&probs, &val_labels)?),
            SelectionMetric::Acc => None,
        };
        epochs.push(EpochRecord { epoch, train_loss: loss_sum / n_train_targets as f64, val_auc, val_acc });
        match stopper.observe(epoch, val_auc.unwrap_or(val_acc)) {
            StopDecision::Improved => best = model.params.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_epoch = epoch;
                break;
            }
        }
    }
    model.params = best;
    let history = MetricHistory {
        epochs,
        selection_metric: selection,
        best_epoch: stopper.best_epoch().expect("at least one epoch"),
        stopped_epoch,
        optimizer_steps: opt.steps(),
    };
    Ok((model, history))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DktFoldResult {
    pub fold_index: usize,
    pub metrics: FoldMetrics,
    pub history: MetricHistory,
    pub predictions: Vec<TargetPrediction>,
    pub model: DktModel,
}

/// Trains and tests one model per fold. The skill index spans the whole log's
/// KC vocabulary so test students may practise KCs unseen in training.
pub fn dkt_train_eval(log: &InteractionLog, folds: &[FoldSplit], config: &DktConfig) -> Result<Vec<DktFoldResult>, DktError> {
    let skills = SkillIndex::from_log(log);
    folds
        .iter()
        .map(|fold| {
            let data = fold.partition(log);
            let (model, history) = fit_dkt(skills.clone(), &data.train, &data.validation, config).map_err(|e| match e {
                DktError::NoTargets { stream, .. } => DktError::NoTargets { fold: fold.fold_index, stream },
                other => other,
            })?;
            let predictions = model.predict(&data.test)?;
            if predictions.is_empty() {
                return Err(DktError::NoTargets { fold: fold.fold_index, stream: "test" });
            }
            let scores: Vec<f64> = predictions.iter().map(|p| p.probability).collect();
            let labels: Vec<bool> = predictions.iter().map(|p| p.label).collect();
            let metrics = FoldMetrics::compute(&scores, &labels)?;
            Ok(DktFoldResult { fold_index: fold.fold_index, metrics, history, predictions, model })
        })
        .collect()
}
