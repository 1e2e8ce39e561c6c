//! Domain-adaptive (masked-token) and task-adaptive encoder pretraining.

use std::collections::BTreeSet;
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::InteractionLog;
use crate::encoder::{CorpusSource, ProvenanceStep, TextEncoder};
use crate::model::{fit, KtModel, ModelError, TrainConfig};
use crate::optim::AdamW;

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("corpus line {line}: {message}")]
    Corpus { line: usize, message: String },
    #[error("at most {max} adaptation epochs are supported, got {got}")]
    TooManyEpochs { max: usize, got: usize },
    #[error("invalid adaptation config: {0}")]
    Config(String),
    #[error("source dataset needs at least 2 students for a validation carve-out, got {0}")]
    TooFewStudents(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusDocument {
    pub text: String,
    pub source_tag: CorpusSource,
}

pub fn read_corpus<R: BufRead>(reader: R) -> Result<Vec<CorpusDocument>, AdaptError> {
    let mut docs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: CorpusDocument =
            serde_json::from_str(&line).map_err(|e| AdaptError::Corpus { line: i + 1, message: e.to_string() })?;
        if doc.text.trim().is_empty() {
            return Err(AdaptError::Corpus { line: i + 1, message: "text is empty".into() });
        }
        docs.push(doc);
    }
    Ok(docs)
}

pub fn load_corpus(path: &Path) -> Result<Vec<CorpusDocument>, AdaptError> {
    read_corpus(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// What happened to one selected position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Replacement {
    Mask,
    Random(u32),
    Unchanged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskedPosition {
    pub index: usize,
    pub original: u32,
    pub replacement: Replacement,
}

/// Selected positions and the corrupted input they produce.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskingPlan {
    pub positions: Vec<MaskedPosition>,
    pub input_ids: Vec<u32>,
}

/// Token-id facts masking needs from an encoder.
pub struct MaskVocabulary {
    pub mask_id: u32,
    pub random_ids: std::ops::Range<u32>,
}

impl MaskVocabulary {
    pub fn of(encoder: &dyn TextEncoder) -> Self {
        let mask_id = encoder
            .token_id(&encoder.special_tokens().mask)
            .expect("encoder registers its mask token");
        Self { mask_id, random_ids: encoder.regular_ids() }
    }
}

/// Selects each maskable token independently with probability `p`, then
/// replaces it by the mask token (80%), a random regular token (10%) or
/// leaves it unchanged (10%).
pub fn mask_tokens_with<R: Rng>(
    token_ids: &[u32],
    is_special: &dyn Fn(u32) -> bool,
    vocab: &MaskVocabulary,
    p: f64,
    rng: &mut R,
) -> MaskingPlan {
    let mut input_ids = token_ids.to_vec();
    let mut positions = Vec::new();
    for (index, &original) in token_ids.iter().enumerate() {
        if is_special(original) || !rng.random_bool(p) {
            continue;
        }
        let roll: f64 = rng.random();
        let replacement = if roll < 0.8 {
            Replacement::Mask
        } else if roll < 0.9 {
            Replacement::Random(rng.random_range(vocab.random_ids.clone()))
        } else {
            Replacement::Unchanged
        };
        input_ids[index] = match replacement {
            Replacement::Mask => vocab.mask_id,
            Replacement::Random(id) => id,
            Replacement::Unchanged => original,
        };
        positions.push(MaskedPosition { index, original, replacement });
    }
    MaskingPlan { positions, input_ids }
}

pub fn mask_tokens(token_ids: &[u32], encoder: &dyn TextEncoder, p: f64, seed: u64) -> MaskingPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    mask_tokens_with(token_ids, &|id| encoder.is_special_id(id), &MaskVocabulary::of(encoder), p, &mut rng)
}

pub const MAX_ADAPTATION_EPOCHS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DaptConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub per_step_batch_size: usize,
    pub accumulation_steps: usize,
    pub window_tokens: usize,
    pub mask_probability: f64,
    pub seed: u64,
}

impl Default for DaptConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            weight_decay: 0.01,
            per_step_batch_size: 32,
            accumulation_steps: 16,
            window_tokens: 128,
            mask_probability: 0.15,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaptReport {
    /// Mean masked-token cross-entropy seen during each epoch.
    pub epoch_losses: Vec<f64>,
    pub windows: usize,
    pub masked_positions: usize,
}

/// Concatenates documents (separated by the sep token) and cuts the stream
/// into `[cls] … [sep]` windows of at most `window_tokens` ids.
pub fn chunk_corpus(encoder: &dyn TextEncoder, corpus: &[CorpusDocument], window_tokens: usize) -> Vec<Vec<u32>> {
    let t = encoder.special_tokens();
    let cls = encoder.token_id(&t.cls).expect("cls registered");
    let sep = encoder.token_id(&t.sep).expect("sep registered");
    let mut stream = Vec::new();
    for doc in corpus {
        stream.extend(encoder.ids(&doc.text));
        stream.push(sep);
    }
    let body = window_tokens.saturating_sub(2).max(1);
    stream
        .chunks(body)
        .map(|c| {
            let mut w = Vec::with_capacity(c.len() + 2);
            w.push(cls);
            w.extend_from_slice(c);
            w.push(sep);
            w
        })
        .collect()
}

fn log_softmax_grad(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = -(logits[target] - max - z.ln());
    let mut grad: Vec<f64> = exps.iter().map(|e| e / z).collect();
    grad[target] -= 1.0;
    (loss, grad)
}

/// Summed masked-token cross-entropy of one window; adds gradients when asked.
pub fn mlm_window_loss(encoder: &dyn TextEncoder, plan: &MaskingPlan, grad: Option<&mut [f64]>) -> f64 {
    if plan.positions.is_empty() {
        return 0.0;
    }
    let positions: Vec<usize> = plan.positions.iter().map(|m| m.index).collect();
    let hidden = encoder.hidden_states(&plan.input_ids, &positions);
    let mut loss = 0.0;
    let mut grad_hidden = Vec::with_capacity(hidden.len());
    let mut grad = grad;
    for (h, m) in hidden.iter().zip(&plan.positions) {
        let (l, gl) = log_softmax_grad(&encoder.mlm_logits(h), m.original as usize);
        loss += l;
        if let Some(g) = grad.as_deref_mut() {
            grad_hidden.push(encoder.mlm_backward(h, &gl, g));
        }
    }
    if let Some(g) = grad {
        encoder.backward(&plan.input_ids, &positions, &grad_hidden, g);
    }
    loss
}

/// Continual masked-token pretraining on `corpus` for `epochs` (at most 3).
///
/// Masks are drawn once per window and reused every epoch.
pub fn dapt(
    encoder: &dyn TextEncoder,
    corpus: &[CorpusDocument],
    epochs: usize,
    config: &DaptConfig,
) -> Result<(Box<dyn TextEncoder>, DaptReport), AdaptError> {
    if corpus.is_empty() {
        return Err(AdaptError::EmptyCorpus);
    }
    if epochs > MAX_ADAPTATION_EPOCHS {
        return Err(AdaptError::TooManyEpochs { max: MAX_ADAPTATION_EPOCHS, got: epochs });
    }
    if config.per_step_batch_size == 0 || config.accumulation_steps == 0 || config.window_tokens < 3 {
        return Err(AdaptError::Config("batch sizes must be positive and windows at least 3 tokens".into()));
    }
    if !(0.0..=1.0).contains(&config.mask_probability) {
        return Err(AdaptError::Config("mask_probability must lie in [0, 1]".into()));
    }
    let mut enc = encoder.clone_box();
    let windows = chunk_corpus(enc.as_ref(), corpus, config.window_tokens);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let vocab = MaskVocabulary::of(enc.as_ref());
    let plans: Vec<MaskingPlan> = windows
        .iter()
        .map(|w| mask_tokens_with(w, &|id| enc.is_special_id(id), &vocab, config.mask_probability, &mut rng))
        .filter(|p| !p.positions.is_empty())
        .collect();
    let masked_positions: usize = plans.iter().map(|p| p.positions.len()).sum();

    let mut opt = AdamW::new(enc.params().len(), config.learning_rate, config.weight_decay, &enc.no_decay_ranges());
    let mut order: Vec<usize> = (0..plans.len()).collect();
    let mut epoch_losses = Vec::with_capacity(epochs);
    let effective = config.per_step_batch_size * config.accumulation_steps;
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for step in order.chunks(effective) {
            let mut grad = vec![0.0; enc.params().len()];
            let mut n_masked = 0usize;
            for micro in step.chunks(config.per_step_batch_size) {
                for &i in micro {
                    loss_sum += mlm_window_loss(enc.as_ref(), &plans[i], Some(&mut grad));
                    n_masked += plans[i].positions.len();
                }
            }
            grad.iter_mut().for_each(|g| *g /= n_masked as f64);
            opt.step(enc.params_mut(), &grad);
        }
        let mean = if masked_positions == 0 { 0.0 } else { loss_sum / masked_positions as f64 };
        tracing::info!(epoch, loss = mean, "dapt epoch finished");
        epoch_losses.push(mean);
    }

    if epochs > 0 {
        let sources: BTreeSet<CorpusSource> = corpus.iter().map(|d| d.source_tag).collect();
        enc.provenance_mut().push(ProvenanceStep::Dapt {
            sources: sources.into_iter().collect(),
            documents: corpus.len(),
            epochs,
        });
    }
    Ok((enc, DaptReport { epoch_losses, windows: windows.len(), masked_positions }))
}

/// Fraction of source students held out for early stopping.
pub const TAPT_VALIDATION_FRACTION: f64 = 0.1;

/// Knowledge-tracing fine-tuning on a source dataset; returns the encoder
/// without its head.
pub fn tapt(
    encoder: &dyn TextEncoder,
    source_log: &InteractionLog,
    source_name: &str,
    config: &TrainConfig,
) -> Result<(Box<dyn TextEncoder>, crate::model::MetricHistory), AdaptError> {
    let n = source_log.num_students();
    if n < 2 {
        return Err(AdaptError::TooFewStudents(n));
    }
    let mut students: Vec<String> = source_log.student_ids().map(str::to_string).collect();
    students.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let n_val = ((TAPT_VALIDATION_FRACTION * n as f64).round() as usize).clamp(1, n - 1);
    let validation: BTreeSet<String> = students[..n_val].iter().cloned().collect();
    let train: BTreeSet<String> = students[n_val..].iter().cloned().collect();

    let mut model = KtModel::new(encoder.clone_box(), config);
    let train_samples = model.prepare_all(&model.samples_for(&source_log.subset(&train))?)?;
    let val_samples = model.prepare_all(&model.samples_for(&source_log.subset(&validation))?)?;
    let history = fit(&mut model, &train_samples, &val_samples, config, &mut |_| {})?;
    let mut enc = model.encoder;
    enc.provenance_mut().push(ProvenanceStep::Tapt {
        source_name: source_name.to_string(),
        epochs_run: history.epochs.len(),
    });
    Ok((enc, history))
}
