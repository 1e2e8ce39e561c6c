//! The knowledge-tracing predictor: encoder, linear head and training loop.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{FoldSplit, Interaction, InteractionLog};
use crate::encoder::{load_encoder, EncoderError, EncoderReference, TextEncoder};
use crate::encoding::{build_input, build_training_set, EncodedSample, EncodingError};
use crate::evaluation::{acc, auc, MetricError, ACC_THRESHOLD};
use crate::optim::{AdamW, EarlyStopping, StopDecision};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("head dimension {head} does not match encoder dimension {encoder}")]
    DimensionMismatch { encoder: usize, head: usize },
    #[error("sample {index} has {found} mask tokens, expected exactly 1")]
    MaskCount { index: usize, found: usize },
    #[error("loss of an empty batch is undefined")]
    EmptyBatch,
    #[error("probabilities and labels differ in length")]
    LengthMismatch,
    #[error("fold {fold} has no validation samples; use a nonzero validation_fraction")]
    EmptyValidation { fold: usize },
    #[error("fold {fold} has no training samples")]
    EmptyTraining { fold: usize },
    #[error("candidate kc_text and question_text must be nonempty")]
    EmptyCandidate,
    #[error("invalid train config: {0}")]
    Config(String),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Which encoder position feeds the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mask,
    Cls,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub per_step_batch_size: usize,
    pub accumulation_steps: usize,
    pub seed: u64,
    pub label_clamp_epsilon: f64,
    pub pooling: Pooling,
    pub freeze_encoder: bool,
    pub token_budget: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            weight_decay: 0.01,
            max_epochs: 100,
            early_stop_patience: 10,
            per_step_batch_size: 32,
            accumulation_steps: 16,
            seed: 0,
            label_clamp_epsilon: 1e-7,
            pooling: Pooling::Mask,
            freeze_encoder: false,
            token_budget: 512,
        }
    }
}

impl TrainConfig {
    pub fn effective_batch_size(&self) -> usize {
        self.per_step_batch_size * self.accumulation_steps
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("learning_rate", self.learning_rate > 0.0),
            ("weight_decay", self.weight_decay > 0.0),
            ("max_epochs", self.max_epochs > 0),
            ("early_stop_patience", self.early_stop_patience > 0),
            ("per_step_batch_size", self.per_step_batch_size > 0),
            ("accumulation_steps", self.accumulation_steps > 0),
            ("label_clamp_epsilon", self.label_clamp_epsilon > 0.0 && self.label_clamp_epsilon < 0.5),
            ("token_budget", self.token_budget > 0),
        ];
        match positive.iter().find(|(_, ok)| !ok) {
            Some((name, _)) => Err(ModelError::Config(format!("{name} must be positive"))),
            None => Ok(()),
        }
    }
}

/// Linear readout `W·h + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionHead {
    pub weight: Vec<f64>,
    pub bias: f64,
}

impl PredictionHead {
    pub fn zeros(dim: usize) -> Self {
        Self { weight: vec![0.0; dim], bias: 0.0 }
    }

    /// Small seeded normal weights, zero bias.
    pub fn init(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("finite std");
        Self { weight: (0..dim).map(|_| normal.sample(&mut rng)).collect(), bias: 0.0 }
    }

    pub fn logit(&self, h: &[f64]) -> f64 {
        self.weight.iter().zip(h).map(|(w, x)| w * x).sum::<f64>() + self.bias
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy with probabilities clamped to `[eps, 1 - eps]`.
pub fn bce_loss(probabilities: &[f64], labels: &[bool], epsilon: f64) -> Result<f64, ModelError> {
    if probabilities.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    if probabilities.len() != labels.len() {
        return Err(ModelError::LengthMismatch);
    }
    let sum: f64 = probabilities
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(epsilon, 1.0 - epsilon);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(sum / probabilities.len() as f64)
}

/// A sample reduced to token ids and its readout position.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub ids: Vec<u32>,
    pub position: usize,
    pub label: bool,
}

/// Gradients of the mean batch loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub encoder: Vec<f64>,
    pub weight: Vec<f64>,
    pub bias: f64,
}

/// Encoder plus head. Immutable once trained; safe to share across threads.
#[derive(Clone)]
pub struct KtModel {
    pub encoder: Box<dyn TextEncoder>,
    pub head: PredictionHead,
    pub pooling: Pooling,
    pub token_budget: usize,
    pub label_clamp_epsilon: f64,
}

impl std::fmt::Debug for KtModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KtModel")
            .field("encoder", &self.encoder.kind())
            .field("head", &self.head)
            .field("pooling", &self.pooling)
            .finish()
    }
}

impl KtModel {
    /// Fresh model with a zero head, so every first prediction is 0.5.
    pub fn new(encoder: Box<dyn TextEncoder>, config: &TrainConfig) -> Self {
        let head = PredictionHead::zeros(encoder.dim());
        Self {
            encoder,
            head,
            pooling: config.pooling,
            token_budget: config.token_budget,
            label_clamp_epsilon: config.label_clamp_epsilon,
        }
    }

    pub fn with_head(encoder: Box<dyn TextEncoder>, head: PredictionHead, pooling: Pooling) -> Result<Self, ModelError> {
        if encoder.dim() != head.weight.len() {
            return Err(ModelError::DimensionMismatch { encoder: encoder.dim(), head: head.weight.len() });
        }
        let defaults = TrainConfig::default();
        Ok(Self {
            encoder,
            head,
            pooling,
            token_budget: defaults.token_budget,
            label_clamp_epsilon: defaults.label_clamp_epsilon,
        })
    }

    fn check_dim(&self) -> Result<(), ModelError> {
        if self.encoder.dim() != self.head.weight.len() {
            return Err(ModelError::DimensionMismatch { encoder: self.encoder.dim(), head: self.head.weight.len() });
        }
        Ok(())
    }

    /// Tokenizes and locates the readout position.
    pub fn prepare(&self, index: usize, sample: &EncodedSample) -> Result<PreparedSample, ModelError> {
        let ids = self.encoder.ids(&sample.text);
        let mask = self.encoder.token_id(&self.encoder.special_tokens().mask);
        let found = ids.iter().filter(|&&id| Some(id) == mask).count();
        if found != 1 {
            return Err(ModelError::MaskCount { index, found });
        }
        let position = match self.pooling {
            Pooling::Mask => ids.iter().position(|&id| Some(id) == mask).expect("counted"),
            Pooling::Cls => 0,
        };
        Ok(PreparedSample { ids, position, label: sample.label })
    }

    pub fn prepare_all(&self, samples: &[EncodedSample]) -> Result<Vec<PreparedSample>, ModelError> {
        samples.iter().enumerate().map(|(i, s)| self.prepare(i, s)).collect()
    }

    pub fn hidden(&self, sample: &PreparedSample) -> Vec<f64> {
        self.encoder.hidden_states(&sample.ids, &[sample.position]).remove(0)
    }

    pub fn probability(&self, sample: &PreparedSample) -> f64 {
        sigmoid(self.head.logit(&self.hidden(sample)))
    }

    /// `σ(W·h + b)` with `h` read at the mask position of each sample.
    pub fn forward(&self, samples: &[EncodedSample]) -> Result<Vec<f64>, ModelError> {
        self.check_dim()?;
        Ok(self.prepare_all(samples)?.iter().map(|s| self.probability(s)).collect())
    }

    pub fn predict_prepared(&self, samples: &[PreparedSample]) -> Vec<f64> {
        samples.iter().map(|s| self.probability(s)).collect()
    }

    /// Mean clamped BCE over `batch` and its gradients.
    pub fn loss_and_gradients(&self, batch: &[PreparedSample]) -> Result<(f64, Gradients), ModelError> {
        let mut grads = Gradients {
            encoder: vec![0.0; self.encoder.params().len()],
            weight: vec![0.0; self.head.weight.len()],
            bias: 0.0,
        };
        let sum = self.accumulate(batch, true, &mut grads)?;
        let n = batch.len() as f64;
        grads.encoder.iter_mut().chain(grads.weight.iter_mut()).for_each(|g| *g /= n);
        grads.bias /= n;
        Ok((sum / n, grads))
    }

    /// Adds summed (not averaged) per-sample gradients; returns summed loss.
    fn accumulate(&self, batch: &[PreparedSample], encoder_grads: bool, grads: &mut Gradients) -> Result<f64, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        self.check_dim()?;
        let eps = self.label_clamp_epsilon;
        let mut loss = 0.0;
        for s in batch {
            let h = self.hidden(s);
            let p = sigmoid(self.head.logit(&h));
            loss += bce_loss(&[p], &[s.label], eps)?;
            // d(-y ln p - (1-y) ln(1-p))/dz = p - y, zero where the clamp is active
            let clamped = p < eps || p > 1.0 - eps;
            let dz = if clamped { 0.0 } else { p - f64::from(u8::from(s.label)) };
            if dz == 0.0 {
                continue;
            }
            for (g, x) in grads.weight.iter_mut().zip(&h) {
                *g += dz * x;
            }
            grads.bias += dz;
            if encoder_grads {
                let gh: Vec<f64> = self.head.weight.iter().map(|w| dz * w).collect();
                self.encoder.backward(&s.ids, &[s.position], &[gh], &mut grads.encoder);
            }
        }
        Ok(loss)
    }

    /// Probability that the student answers `candidate` correctly next.
    pub fn predict_next(&self, history: &[Interaction], candidate: &Interaction) -> Result<f64, ModelError> {
        let nonempty = |s: &Option<String>| s.as_deref().is_some_and(|t| !t.trim().is_empty());
        if !nonempty(&candidate.kc_text) || !nonempty(&candidate.question_text) {
            return Err(ModelError::EmptyCandidate);
        }
        let probe = |t: &str| self.encoder.count_tokens(t);
        let sample = build_input(history, candidate, self.token_budget, &probe, self.encoder.special_tokens())?;
        Ok(self.forward(std::slice::from_ref(&sample))?[0])
    }

    /// Renders and prepares every interaction of `log` as a sample.
    pub fn samples_for(&self, log: &InteractionLog) -> Result<Vec<EncodedSample>, ModelError> {
        let probe = |t: &str| self.encoder.count_tokens(t);
        Ok(build_training_set(log, self.token_budget, &probe, self.encoder.special_tokens())?)
    }

    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        fs::create_dir_all(dir)?;
        let head = HeadFile { head: self.head.clone(), pooling: self.pooling, token_budget: self.token_budget };
        fs::write(dir.join("head.json"), serde_json::to_string_pretty(&head)?)?;
        fs::write(dir.join("encoder.json"), serde_json::to_string_pretty(&self.encoder.reference())?)?;
        fs::write(dir.join("encoder.bin"), self.encoder.weights_blob())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        let head: HeadFile = serde_json::from_str(&fs::read_to_string(dir.join("head.json"))?)?;
        let reference: EncoderReference = serde_json::from_str(&fs::read_to_string(dir.join("encoder.json"))?)?;
        let encoder = load_encoder(&reference, &fs::read(dir.join("encoder.bin"))?)?;
        let mut model = Self::with_head(encoder, head.head, head.pooling)?;
        model.token_budget = head.token_budget;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct HeadFile {
    head: PredictionHead,
    pooling: Pooling,
    token_budget: usize,
}

/// Metric used to pick the best epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    Auc,
    /// Used when the validation labels hold a single class.
    Acc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: Option<f64>,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricHistory {
    pub epochs: Vec<EpochRecord>,
    pub selection_metric: SelectionMetric,
    /// One-based epoch whose weights were restored.
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub optimizer_steps: u64,
}

/// Called after every epoch.
pub type EpochCallback<'a> = dyn FnMut(&EpochRecord) + 'a;

/// Fits `model` on `train`, selecting the epoch with the best validation score.
pub fn fit(
    model: &mut KtModel,
    train: &[PreparedSample],
    validation: &[PreparedSample],
    config: &TrainConfig,
    on_epoch: &mut EpochCallback<'_>,
) -> Result<MetricHistory, ModelError> {
    config.validate()?;
    model.check_dim()?;
    if train.is_empty() {
        return Err(ModelError::EmptyTraining { fold: 0 });
    }
    if validation.is_empty() {
        return Err(ModelError::EmptyValidation { fold: 0 });
    }
    let val_labels: Vec<bool> = validation.iter().map(|s| s.label).collect();
    let selection = if val_labels.iter().all(|&l| l == val_labels[0]) {
        tracing::warn!("validation labels are single-class; selecting epochs by accuracy");
        SelectionMetric::Acc
    } else {
        SelectionMetric::Auc
    };

    let mut enc_opt = AdamW::new(
        model.encoder.params().len(),
        config.learning_rate,
        config.weight_decay,
        &model.encoder.no_decay_ranges(),
    );
    let dim = model.head.weight.len();
    // head layout: [weight.. | bias]
    let mut head_opt = AdamW::new(dim + 1, config.learning_rate, config.weight_decay, &[dim..dim + 1]);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stopper = EarlyStopping::new(config.early_stop_patience);
    let mut best = (model.encoder.clone(), model.head.clone());
    let mut epochs = Vec::new();
    let mut stopped_epoch = config.max_epochs;
    let train_encoder = !config.freeze_encoder;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for step in order.chunks(config.effective_batch_size()) {
            let mut grads = Gradients {
                encoder: if train_encoder { vec![0.0; model.encoder.params().len()] } else { Vec::new() },
                weight: vec![0.0; dim],
                bias: 0.0,
            };
            for micro in step.chunks(config.per_step_batch_size) {
                let batch: Vec<PreparedSample> = micro.iter().map(|&i| train[i].clone()).collect();
                loss_sum += model.accumulate(&batch, train_encoder, &mut grads)?;
            }
            let n = step.len() as f64;
            let mut head_params: Vec<f64> = model.head.weight.iter().copied().chain([model.head.bias]).collect();
            let head_grad: Vec<f64> = grads.weight.iter().chain([&grads.bias]).map(|g| g / n).collect();
            head_opt.step(&mut head_params, &head_grad);
            model.head.bias = head_params.pop().expect("bias");
            model.head.weight = head_params;
            if train_encoder {
                grads.encoder.iter_mut().for_each(|g| *g /= n);
                enc_opt.step(model.encoder.params_mut(), &grads.encoder);
            }
        }

        let probs = model.predict_prepared(validation);
        let val_acc = acc(&probs, &val_labels, ACC_THRESHOLD)?;
        let val_auc = match selection {
            SelectionMetric::Auc => Some(auc(&probs, &val_labels)?),
            SelectionMetric::Acc => None,
        };
        let record = EpochRecord { epoch, train_loss: loss_sum / train.len() as f64, val_auc, val_acc };
        tracing::debug!(epoch, train_loss = record.train_loss, ?val_auc, val_acc, "epoch finished");
        on_epoch(&record);
        let score = val_auc.unwrap_or(val_acc);
        epochs.push(record);
        match stopper.observe(epoch, score) {
            StopDecision::Improved => best = (model.encoder.clone(), model.head.clone()),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_epoch = epoch;
                break;
            }
        }
    }

    model.encoder = best.0;
    model.head = best.1;
    Ok(MetricHistory {
        epochs,
        selection_metric: selection,
        best_epoch: stopper.best_epoch().expect("at least one epoch"),
        stopped_epoch,
        optimizer_steps: head_opt.steps(),
    })
}

/// One fold's trained model.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub fold_index: usize,
    pub model: KtModel,
    pub history: MetricHistory,
}

impl TrainedModel {
    /// Writes head, encoder reference and weights, config and history.
    pub fn save(&self, dir: &Path, config: &TrainConfig) -> Result<(), ModelError> {
        self.model.save(dir)?;
        fs::write(dir.join("train_config.json"), serde_json::to_string_pretty(config)?)?;
        fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&self.history)?)?;
        Ok(())
    }
}

/// Trains one model per fold on that fold's training students.
pub fn train(
    log: &InteractionLog,
    folds: &[FoldSplit],
    encoder_factory: &dyn Fn() -> Box<dyn TextEncoder>,
    config: &TrainConfig,
) -> Result<Vec<TrainedModel>, ModelError> {
    config.validate()?;
    folds.iter().map(|fold| train_fold(log, fold, encoder_factory(), config)).collect()
}

pub fn train_fold(
    log: &InteractionLog,
    fold: &FoldSplit,
    encoder: Box<dyn TextEncoder>,
    config: &TrainConfig,
) -> Result<TrainedModel, ModelError> {
    let data = fold.partition(log);
    let mut model = KtModel::new(encoder, config);
    let train = model.prepare_all(&model.samples_for(&data.train)?)?;
    let validation = model.prepare_all(&model.samples_for(&data.validation)?)?;
    if validation.is_empty() {
        return Err(ModelError::EmptyValidation { fold: fold.fold_index });
    }
    if train.is_empty() {
        return Err(ModelError::EmptyTraining { fold: fold.fold_index });
    }
    tracing::info!(fold = fold.fold_index, train = train.len(), validation = validation.len(), "training fold");
    let history = fit(&mut model, &train, &validation, config, &mut |_| {})?;
    Ok(TrainedModel { fold_index: fold.fold_index, model, history })
}
