//! Text encoder interface and the built-in hashing encoder.
//!
//! An encoder maps token ids to one hidden vector per position and can
//! back-propagate gradients of those vectors into its flat parameter buffer.
//! Pre-trained checkpoints plug in by implementing [`TextEncoder`]; the
//! [`ToyEncoder`] is a small deterministic implementation that lets the
//! whole train/evaluate path run on a laptop in seconds.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::SpecialTokens;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("unknown encoder kind `{0}`")]
    UnknownKind(String),
    #[error("corrupt encoder weights: {0}")]
    Weights(String),
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("encoder directory `{path}`: {message}")]
    Dir { path: String, message: String },
}

/// A token id with its byte span in the source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenSpan {
    pub id: u32,
    pub start: usize,
    pub end: usize,
}

/// Hidden vectors for every token of a text.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub hidden: Vec<Vec<f64>>,
    pub spans: Vec<TokenSpan>,
}

/// Corpus a domain-adaptation run drew from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    JavaCode2text,
    PythonCode2text,
    Metamath,
    Custom,
}

/// One stage in an encoder's history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum ProvenanceStep {
    Base { name: String },
    Dapt { sources: Vec<CorpusSource>, documents: usize, epochs: usize },
    Tapt { source_name: String, epochs_run: usize },
}

/// Append-only ancestry of an encoder.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Provenance(Vec<ProvenanceStep>);

impl Provenance {
    pub fn base(name: impl Into<String>) -> Self {
        Self(vec![ProvenanceStep::Base { name: name.into() }])
    }

    pub fn push(&mut self, step: ProvenanceStep) {
        self.0.push(step);
    }

    pub fn steps(&self) -> &[ProvenanceStep] {
        &self.0
    }
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|s| match s {
                ProvenanceStep::Base { name } => name.clone(),
                ProvenanceStep::Dapt { sources, epochs, .. } => {
                    let tags: Vec<String> = sources
                        .iter()
                        .map(|s| serde_json::to_value(s).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default())
                        .collect();
                    format!("dapt({}; {epochs} epochs)", tags.join(","))
                }
                ProvenanceStep::Tapt { source_name, .. } => format!("tapt({source_name})"),
            })
            .collect();
        f.write_str(&parts.join(" -> "))
    }
}

/// Serializable description of an encoder, stored next to its weight blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderReference {
    pub kind: String,
    pub config: serde_json::Value,
    pub extra_special_tokens: Vec<String>,
    pub provenance: Provenance,
}

/// A differentiable text encoder.
///
/// Parameters live in one flat buffer so optimizers stay encoder-agnostic.
pub trait TextEncoder: Send + Sync {
    fn kind(&self) -> &str;
    /// Hidden size.
    fn dim(&self) -> usize;
    fn special_tokens(&self) -> &SpecialTokens;
    fn vocab_size(&self) -> usize;
    fn tokenize(&self, text: &str) -> Vec<TokenSpan>;
    fn count_tokens(&self, text: &str) -> usize {
        self.tokenize(text).len()
    }
    fn token_id(&self, token: &str) -> Option<u32>;
    /// Ids that masked-token pretraining must never select (cls, sep, pad, ...).
    fn is_special_id(&self, id: u32) -> bool;
    /// Ids eligible as random replacements during masking.
    fn regular_ids(&self) -> Range<u32>;
    /// Registers new marker tokens with freshly initialized embeddings.
    fn add_special_tokens(&mut self, tokens: &[&str]);

    /// Hidden vectors at `positions` of the id sequence.
    fn hidden_states(&self, ids: &[u32], positions: &[usize]) -> Vec<Vec<f64>>;
    /// Adds d(loss)/d(params) to `grad` given d(loss)/d(hidden) at `positions`.
    fn backward(&self, ids: &[u32], positions: &[usize], grad_hidden: &[Vec<f64>], grad: &mut [f64]);

    /// Output-vocabulary logits for masked-token prediction.
    fn mlm_logits(&self, hidden: &[f64]) -> Vec<f64>;
    /// Adds the MLM-head parameter gradient to `grad` and returns d(loss)/d(hidden).
    fn mlm_backward(&self, hidden: &[f64], grad_logits: &[f64], grad: &mut [f64]) -> Vec<f64>;

    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    /// Parameter ranges exempt from weight decay.
    fn no_decay_ranges(&self) -> Vec<Range<usize>>;

    fn provenance(&self) -> &Provenance;
    fn provenance_mut(&mut self) -> &mut Provenance;

    fn reference(&self) -> EncoderReference;
    fn clone_box(&self) -> Box<dyn TextEncoder>;

    fn ids(&self, text: &str) -> Vec<u32> {
        self.tokenize(text).into_iter().map(|t| t.id).collect()
    }

    fn encode(&self, text: &str) -> Encoding {
        let spans = self.tokenize(text);
        let ids: Vec<u32> = spans.iter().map(|t| t.id).collect();
        let positions: Vec<usize> = (0..ids.len()).collect();
        Encoding { hidden: self.hidden_states(&ids, &positions), spans }
    }

    /// Token index of the (last) mask marker in `text`.
    fn mask_position(&self, text: &str) -> Option<usize> {
        let mask = self.token_id(&self.special_tokens().mask)?;
        self.ids(text).iter().rposition(|&id| id == mask)
    }

    /// Opaque weight blob: the flat parameters as little-endian f64.
    fn weights_blob(&self) -> Vec<u8> {
        self.params().iter().flat_map(|p| p.to_le_bytes()).collect()
    }
}

impl Clone for Box<dyn TextEncoder> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

pub const ENCODER_REFERENCE_FILE: &str = "encoder.json";
pub const ENCODER_WEIGHTS_FILE: &str = "encoder.bin";

/// Writes the reference and weight blob of `encoder` into `dir`.
pub fn save_encoder(encoder: &dyn TextEncoder, dir: &std::path::Path) -> Result<(), EncoderError> {
    let err = |e: &dyn std::fmt::Display| EncoderError::Dir { path: dir.display().to_string(), message: e.to_string() };
    std::fs::create_dir_all(dir).map_err(|e| err(&e))?;
    let reference = serde_json::to_string_pretty(&encoder.reference()).map_err(|e| err(&e))?;
    std::fs::write(dir.join(ENCODER_REFERENCE_FILE), reference).map_err(|e| err(&e))?;
    std::fs::write(dir.join(ENCODER_WEIGHTS_FILE), encoder.weights_blob()).map_err(|e| err(&e))?;
    Ok(())
}

/// Reads an encoder written by [`save_encoder`].
pub fn load_encoder_dir(dir: &std::path::Path) -> Result<Box<dyn TextEncoder>, EncoderError> {
    let err = |e: &dyn std::fmt::Display| EncoderError::Dir { path: dir.display().to_string(), message: e.to_string() };
    let text = std::fs::read_to_string(dir.join(ENCODER_REFERENCE_FILE)).map_err(|e| err(&e))?;
    let reference: EncoderReference = serde_json::from_str(&text).map_err(|e| err(&e))?;
    let weights = std::fs::read(dir.join(ENCODER_WEIGHTS_FILE)).map_err(|e| err(&e))?;
    load_encoder(&reference, &weights)
}

/// Rebuilds an encoder from its reference and weight blob.
pub fn load_encoder(reference: &EncoderReference, weights: &[u8]) -> Result<Box<dyn TextEncoder>, EncoderError> {
    match reference.kind.as_str() {
        ToyEncoder::KIND => {
            let config: ToyConfig =
                serde_json::from_value(reference.config.clone()).map_err(|e| EncoderError::Config(e.to_string()))?;
            let mut enc = ToyEncoder::new(config)?;
            let extra: Vec<&str> = reference.extra_special_tokens.iter().map(String::as_str).collect();
            enc.add_special_tokens(&extra);
            if weights.len() != enc.params.len() * 8 {
                return Err(EncoderError::Weights(format!(
                    "expected {} bytes, got {}",
                    enc.params.len() * 8,
                    weights.len()
                )));
            }
            for (p, chunk) in enc.params.iter_mut().zip(weights.chunks_exact(8)) {
                *p = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            }
            enc.provenance = reference.provenance.clone();
            Ok(Box::new(enc))
        }
        other => Err(EncoderError::UnknownKind(other.to_string())),
    }
}

/// Settings of the hashing encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub dim: usize,
    /// Hash buckets for ordinary tokens.
    pub buckets: usize,
    /// Context tokens on each side feeding a position's local summary.
    pub window: usize,
    pub seed: u64,
    pub init_std: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { dim: 32, buckets: 2048, window: 8, seed: 0, init_std: 1.0 }
    }
}

const MASK: u32 = 4;
const BASE_SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Feature-hashing encoder with a one-layer contextual mix.
///
/// For token `t` with embedding `e_t`, local context mean `l_t` (up to
/// `window` tokens either side) and sequence mean `g`:
///
/// `h_t = tanh(e_t + A l_t + B g + c)`
///
/// Masked-token logits tie the output projection to the embedding table:
/// `logit_v = e_v · h + o_v`.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    config: ToyConfig,
    tokens: SpecialTokens,
    extra_specials: Vec<String>,
    params: Vec<f64>,
    provenance: Provenance,
}

impl ToyEncoder {
    pub const KIND: &'static str = "toy";

    pub fn new(config: ToyConfig) -> Result<Self, EncoderError> {
        if config.dim == 0 || config.buckets == 0 {
            return Err(EncoderError::Config("dim and buckets must be positive".into()));
        }
        let mut enc = Self {
            tokens: SpecialTokens::bert(),
            extra_specials: Vec::new(),
            params: Vec::new(),
            provenance: Provenance::base(Self::KIND),
            config,
        };
        enc.params = enc.init_params();
        Ok(enc)
    }

    /// The encoder with `[CORRECT]`/`[INCORRECT]` registered.
    pub fn for_knowledge_tracing(config: ToyConfig) -> Result<Self, EncoderError> {
        let mut enc = Self::new(config)?;
        enc.add_special_tokens(&[SpecialTokens::CORRECT, SpecialTokens::INCORRECT]);
        Ok(enc)
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    fn base_vocab(&self) -> usize {
        BASE_SPECIALS.len() + self.config.buckets
    }

    fn vocab(&self) -> usize {
        self.base_vocab() + self.extra_specials.len()
    }

    // Flat layout: [embeddings V×d | local d×d | global d×d | bias d | out_bias V]
    fn emb_range(&self) -> Range<usize> {
        0..self.vocab() * self.config.dim
    }
    fn local_range(&self) -> Range<usize> {
        let s = self.emb_range().end;
        s..s + self.config.dim * self.config.dim
    }
    fn global_range(&self) -> Range<usize> {
        let s = self.local_range().end;
        s..s + self.config.dim * self.config.dim
    }
    fn bias_range(&self) -> Range<usize> {
        let s = self.global_range().end;
        s..s + self.config.dim
    }
    fn out_bias_range(&self) -> Range<usize> {
        let s = self.bias_range().end;
        s..s + self.vocab()
    }

    fn init_params(&self) -> Vec<f64> {
        let d = self.config.dim;
        let v = self.vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let emb = Normal::new(0.0, self.config.init_std).expect("finite std");
        let mix = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("finite std");
        let mut p = Vec::with_capacity(v * d + 2 * d * d + d + v);
        p.extend((0..self.base_vocab() * d).map(|_| emb.sample(&mut rng)));
        for tok in &self.extra_specials {
            p.extend(self.special_row(tok));
        }
        p.extend((0..2 * d * d).map(|_| mix.sample(&mut rng)));
        p.extend(std::iter::repeat_n(0.0, d + v));
        p
    }

    /// Seeded embedding row for an added marker token.
    fn special_row(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(self.config.seed, token.as_bytes()));
        let emb = Normal::new(0.0, self.config.init_std).expect("finite std");
        (0..self.config.dim).map(|_| emb.sample(&mut rng)).collect()
    }

    fn emb(&self, id: u32) -> &[f64] {
        let d = self.config.dim;
        let i = id as usize * d;
        &self.params[i..i + d]
    }

    fn special_id(&self, token: &str) -> Option<u32> {
        if let Some(i) = BASE_SPECIALS.iter().position(|s| *s == token) {
            return Some(i as u32);
        }
        if token == self.tokens.mask {
            return Some(MASK);
        }
        self.extra_specials
            .iter()
            .position(|s| s == token)
            .map(|i| (self.base_vocab() + i) as u32)
    }

    fn word_id(&self, word: &str) -> u32 {
        let lower = word.to_lowercase();
        let bucket = fnv1a(self.config.seed, lower.as_bytes()) % self.config.buckets as u64;
        BASE_SPECIALS.len() as u32 + bucket as u32
    }

    fn window(&self, t: usize, len: usize) -> Range<usize> {
        t.saturating_sub(self.config.window)..(t + self.config.window + 1).min(len)
    }

    fn mean_embedding(&self, ids: &[u32], range: Range<usize>, skip: Option<usize>) -> Vec<f64> {
        let d = self.config.dim;
        let mut acc = vec![0.0; d];
        let mut n = 0usize;
        for s in range {
            if Some(s) == skip {
                continue;
            }
            for (a, e) in acc.iter_mut().zip(self.emb(ids[s])) {
                *a += e;
            }
            n += 1;
        }
        if n > 0 {
            let inv = 1.0 / n as f64;
            acc.iter_mut().for_each(|a| *a *= inv);
        }
        acc
    }

    fn matvec(&self, m: Range<usize>, x: &[f64], out: &mut [f64]) {
        let d = self.config.dim;
        let m = &self.params[m];
        for (r, o) in out.iter_mut().enumerate() {
            *o += m[r * d..(r + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// Pre-activation pieces at one position: (local mean, hidden).
    fn position_forward(&self, ids: &[u32], t: usize, global_term: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let local = self.mean_embedding(ids, self.window(t, ids.len()), Some(t));
        let mut a = global_term.to_vec();
        for ((ai, e), c) in a.iter_mut().zip(self.emb(ids[t])).zip(&self.params[self.bias_range()]) {
            *ai += e + c;
        }
        self.matvec(self.local_range(), &local, &mut a);
        let h = a.iter().map(|x| x.tanh()).collect();
        (local, h)
    }

    fn global_mean_and_term(&self, ids: &[u32]) -> (Vec<f64>, Vec<f64>) {
        let g = self.mean_embedding(ids, 0..ids.len(), None);
        let mut term = vec![0.0; self.config.dim];
        self.matvec(self.global_range(), &g, &mut term);
        (g, term)
    }
}

impl TextEncoder for ToyEncoder {
    fn kind(&self) -> &str {
        Self::KIND
    }

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn special_tokens(&self) -> &SpecialTokens {
        &self.tokens
    }

    fn vocab_size(&self) -> usize {
        self.vocab()
    }

    /// Splits on whitespace; bracketed registered markers stay whole, other
    /// text splits into alphanumeric runs and single punctuation characters.
    fn tokenize(&self, text: &str) -> Vec<TokenSpan> {
        let mut out = Vec::new();
        let mut chars = text.char_indices().peekable();
        while let Some(&(start, c)) = chars.peek() {
            if c.is_whitespace() {
                chars.next();
                continue;
            }
            if c == '[' {
                if let Some(close) = text[start..].find(']') {
                    let cand = &text[start..start + close + 1];
                    if let Some(id) = self.special_id(cand) {
                        out.push(TokenSpan { id, start, end: start + cand.len() });
                        while chars.peek().is_some_and(|&(i, _)| i < start + cand.len()) {
                            chars.next();
                        }
                        continue;
                    }
                }
            }
            if c.is_alphanumeric() || c == '_' {
                let mut end = start;
                while let Some(&(i, ch)) = chars.peek() {
                    if ch.is_alphanumeric() || ch == '_' {
                        end = i + ch.len_utf8();
                        chars.next();
                    } else {
                        break;
                    }
                }
                out.push(TokenSpan { id: self.word_id(&text[start..end]), start, end });
            } else {
                chars.next();
                let end = start + c.len_utf8();
                out.push(TokenSpan { id: self.word_id(&text[start..end]), start, end });
            }
        }
        out
    }

    fn token_id(&self, token: &str) -> Option<u32> {
        self.special_id(token)
    }

    fn is_special_id(&self, id: u32) -> bool {
        (id as usize) < BASE_SPECIALS.len() || id as usize >= self.base_vocab()
    }

    fn regular_ids(&self) -> Range<u32> {
        BASE_SPECIALS.len() as u32..self.base_vocab() as u32
    }

    fn add_special_tokens(&mut self, tokens: &[&str]) {
        let d = self.config.dim;
        let new: Vec<String> = tokens
            .iter()
            .filter(|t| self.special_id(t).is_none())
            .map(|t| t.to_string())
            .collect();
        if new.is_empty() {
            return;
        }
        let old_emb_end = self.emb_range().end;
        let old_out = self.out_bias_range();
        let mut params = Vec::with_capacity(self.params.len() + new.len() * (d + 1));
        params.extend_from_slice(&self.params[..old_emb_end]);
        for t in &new {
            params.extend(self.special_row(t));
        }
        params.extend_from_slice(&self.params[old_emb_end..old_out.end]);
        params.extend(std::iter::repeat_n(0.0, new.len()));
        self.params = params;
        self.extra_specials.extend(new);
    }

    fn hidden_states(&self, ids: &[u32], positions: &[usize]) -> Vec<Vec<f64>> {
        let (_, global_term) = self.global_mean_and_term(ids);
        positions.iter().map(|&t| self.position_forward(ids, t, &global_term).1).collect()
    }

    fn backward(&self, ids: &[u32], positions: &[usize], grad_hidden: &[Vec<f64>], grad: &mut [f64]) {
        let d = self.config.dim;
        let (g, global_term) = self.global_mean_and_term(ids);
        let local_m = &self.params[self.local_range()];
        let global_m = &self.params[self.global_range()];
        let mut grad_g = vec![0.0; d];
        for (&t, gh) in positions.iter().zip(grad_hidden) {
            let (local, h) = self.position_forward(ids, t, &global_term);
            let ga: Vec<f64> = gh.iter().zip(&h).map(|(g, h)| g * (1.0 - h * h)).collect();

            let e0 = ids[t] as usize * d;
            for (k, v) in ga.iter().enumerate() {
                grad[e0 + k] += v;
            }
            let lr = self.local_range();
            let gr = self.global_range();
            let br = self.bias_range();
            let mut grad_local = vec![0.0; d];
            for r in 0..d {
                let gar = ga[r];
                if gar == 0.0 {
                    continue;
                }
                for c in 0..d {
                    grad[lr.start + r * d + c] += gar * local[c];
                    grad[gr.start + r * d + c] += gar * g[c];
                    grad_local[c] += gar * local_m[r * d + c];
                    grad_g[c] += gar * global_m[r * d + c];
                }
                grad[br.start + r] += gar;
            }
            let win = self.window(t, ids.len());
            let n = win.len() - 1;
            if n > 0 {
                let inv = 1.0 / n as f64;
                for s in win.filter(|&s| s != t) {
                    let e = ids[s] as usize * d;
                    for (k, v) in grad_local.iter().enumerate() {
                        grad[e + k] += v * inv;
                    }
                }
            }
        }
        let inv = 1.0 / ids.len() as f64;
        for &id in ids {
            let e = id as usize * d;
            for (k, v) in grad_g.iter().enumerate() {
                grad[e + k] += v * inv;
            }
        }
    }

    fn mlm_logits(&self, hidden: &[f64]) -> Vec<f64> {
        let d = self.config.dim;
        let emb = &self.params[self.emb_range()];
        let out = &self.params[self.out_bias_range()];
        emb.chunks_exact(d)
            .zip(out)
            .map(|(row, b)| row.iter().zip(hidden).map(|(a, h)| a * h).sum::<f64>() + b)
            .collect()
    }

    fn mlm_backward(&self, hidden: &[f64], grad_logits: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let d = self.config.dim;
        let out_start = self.out_bias_range().start;
        let mut grad_h = vec![0.0; d];
        for (v, &gl) in grad_logits.iter().enumerate() {
            if gl == 0.0 {
                continue;
            }
            let e = v * d;
            for k in 0..d {
                grad_h[k] += gl * self.params[e + k];
                grad[e + k] += gl * hidden[k];
            }
            grad[out_start + v] += gl;
        }
        grad_h
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn no_decay_ranges(&self) -> Vec<Range<usize>> {
        vec![self.bias_range(), self.out_bias_range()]
    }

    fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    fn provenance_mut(&mut self) -> &mut Provenance {
        &mut self.provenance
    }

    fn reference(&self) -> EncoderReference {
        EncoderReference {
            kind: Self::KIND.into(),
            config: serde_json::to_value(&self.config).expect("config serializes"),
            extra_special_tokens: self.extra_specials.clone(),
            provenance: self.provenance.clone(),
        }
    }

    fn clone_box(&self) -> Box<dyn TextEncoder> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyEncoder {
        ToyEncoder::for_knowledge_tracing(ToyConfig { dim: 6, buckets: 16, window: 2, seed: 3, init_std: 0.7 }).unwrap()
    }

    #[test]
    fn tokenizer_keeps_markers_whole() {
        let enc = small();
        let toks = enc.tokenize("[CLS] for-loops x1 [CORRECT] [MASK] [SEP] [oops]");
        let ids: Vec<u32> = toks.iter().map(|t| t.id).collect();
        assert_eq!(ids[0], enc.token_id("[CLS]").unwrap());
        assert_eq!(ids[5], enc.token_id("[CORRECT]").unwrap());
        assert_eq!(ids[6], MASK);
        assert_eq!(ids[7], enc.token_id("[SEP]").unwrap());
        // "for", "-", "loops" then "x1"
        assert_eq!(toks[1].end - toks[1].start, 3);
        assert_eq!(&"[CLS] for-loops"[toks[2].start..toks[2].end], "-");
        // unregistered bracket text is ordinary punctuation + word
        assert_eq!(toks.len(), 8 + 3);
    }

    #[test]
    fn hashing_is_case_insensitive_and_stable() {
        let enc = small();
        assert_eq!(enc.ids("Loop"), enc.ids("loop"));
        assert_eq!(enc.ids("loop"), small().ids("loop"));
    }

    #[test]
    fn mask_position_found() {
        let enc = small();
        assert_eq!(enc.mask_position("[CLS] a b [MASK] [SEP]"), Some(3));
        assert_eq!(enc.mask_position("[CLS] a b [SEP]"), None);
    }

    #[test]
    fn special_tokens_not_regular() {
        let enc = small();
        for tok in BASE_SPECIALS.iter().chain(&["[INCORRECT]"]) {
            let id = enc.token_id(tok).unwrap();
            assert!(enc.is_special_id(id));
            assert!(!enc.regular_ids().contains(&id));
        }
    }

    #[test]
    fn added_specials_are_seeded_and_idempotent() {
        let a = small();
        let b = small();
        assert_eq!(a.params(), b.params());
        let mut c = a.clone();
        c.add_special_tokens(&["[CORRECT]"]);
        assert_eq!(c.params().len(), a.params().len());
    }

    #[test]
    fn encode_is_deterministic() {
        let enc = small();
        let x = enc.encode("[CLS] loops sum [MASK] [SEP]");
        assert_eq!(x, enc.encode("[CLS] loops sum [MASK] [SEP]"));
        assert_eq!(x.hidden.len(), 5);
        assert!(x.hidden.iter().flatten().all(|v| v.abs() < 1.0));
    }

    fn fd_check(enc: &ToyEncoder, loss: &dyn Fn(&ToyEncoder) -> f64, analytic: &[f64]) {
        let mut probe = enc.clone();
        let eps = 1e-6;
        for i in 0..enc.params.len() {
            let orig = probe.params[i];
            probe.params[i] = orig + eps;
            let up = loss(&probe);
            probe.params[i] = orig - eps;
            let down = loss(&probe);
            probe.params[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (numeric - analytic[i]).abs() / (numeric.abs().max(analytic[i].abs()).max(1e-6));
            assert!(err < 1e-5, "param {i}: numeric {numeric} analytic {}", analytic[i]);
        }
    }

    #[test]
    fn hidden_backward_matches_finite_differences() {
        let enc = small();
        let ids = enc.ids("[CLS] a b c [CORRECT] d e [MASK] [SEP]");
        let positions = [7usize, 0, 3];
        let weights: Vec<Vec<f64>> = (0..positions.len())
            .map(|p| (0..enc.dim()).map(|k| ((p * 7 + k * 3) % 5) as f64 - 2.0).collect())
            .collect();
        let loss = |e: &ToyEncoder| -> f64 {
            e.hidden_states(&ids, &positions)
                .iter()
                .zip(&weights)
                .map(|(h, w)| h.iter().zip(w).map(|(a, b)| a * b).sum::<f64>())
                .sum()
        };
        let mut grad = vec![0.0; enc.params.len()];
        enc.backward(&ids, &positions, &weights, &mut grad);
        fd_check(&enc, &loss, &grad);
    }

    #[test]
    fn mlm_backward_matches_finite_differences() {
        let enc = small();
        let ids = enc.ids("[CLS] x y [MASK] z [SEP]");
        let w: Vec<f64> = (0..enc.vocab_size()).map(|v| ((v * 5) % 7) as f64 * 0.1 - 0.3).collect();
        let loss = |e: &ToyEncoder| -> f64 {
            let h = &e.hidden_states(&ids, &[3])[0];
            e.mlm_logits(h).iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let mut grad = vec![0.0; enc.params.len()];
        let h = &enc.hidden_states(&ids, &[3])[0];
        let gh = enc.mlm_backward(h, &w, &mut grad);
        enc.backward(&ids, &[3], &[gh], &mut grad);
        fd_check(&enc, &loss, &grad);
    }

    #[test]
    fn reference_round_trip() {
        let mut enc = small();
        enc.params_mut()[5] = 0.123;
        enc.provenance_mut().push(ProvenanceStep::Tapt { source_name: "spring".into(), epochs_run: 2 });
        let back = load_encoder(&enc.reference(), &enc.weights_blob()).unwrap();
        assert_eq!(back.params(), enc.params());
        assert_eq!(back.provenance(), enc.provenance());
        assert_eq!(back.provenance().to_string(), "toy -> tapt(spring)");
        assert!(load_encoder(&enc.reference(), &[0u8; 3]).is_err());
    }
}
