//! A small pluggable autoregressive categorical policy.
//!
//! The reference implementation is a bigram table over a closed vocabulary:
//! row `c` of the logit matrix holds unnormalized log-preferences for the
//! next token given previous token `c`, with one extra row for the
//! sequence-start context. A per-prompt bias vector, selected by hashing the
//! prompt into a fixed number of buckets, is added to every row so the
//! conditional actually depends on the instance being scored.
//!
//! Everything the rest of the crate needs from a policy goes through the
//! [`SequencePolicy`] trait: per-token log-probabilities, length-normalized
//! preference scores, seeded sampling, and exact KL divergence against a
//! frozen reference. A real language model can be substituted behind that
//! trait without touching the objective or the trainer.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

use crate::domain::{MedicalInstance, ReasoningChain};

/// Reserved surface form for out-of-vocabulary tokens.
pub const UNKNOWN_TOKEN: &str = "<unk>";

const CHECKPOINT_VERSION: u32 = 1;

/// A closed token vocabulary with a reserved unknown id.
///
/// Tokenization splits on whitespace; runs of alphanumeric characters (plus
/// `_`) form word tokens and every other non-space character is its own
/// token. Detokenization joins tokens with single spaces, so
/// `tokenize(detokenize(ids)) == ids` for any sequence free of the unknown
/// id, and `detokenize(tokenize(text))` reproduces text up to whitespace
/// and token-boundary canonicalization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    unknown_id: usize,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize, Clone)]
struct VocabularyRepr {
    tokens: Vec<String>,
    unknown_id: usize,
}

impl From<VocabularyRepr> for Vocabulary {
    fn from(repr: VocabularyRepr) -> Self {
        let index = repr
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            tokens: repr.tokens,
            unknown_id: repr.unknown_id,
            index,
        }
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        Self {
            tokens: v.tokens,
            unknown_id: v.unknown_id,
        }
    }
}

/// Split text into word and punctuation tokens.
pub fn split_tokens(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let bytes = text.char_indices().collect::<Vec<_>>();
    let mut i = 0;
    while i < bytes.len() {
        let (start, ch) = bytes[i];
        if ch.is_whitespace() {
            i += 1;
            continue;
        }
        if ch.is_alphanumeric() || ch == '_' {
            let mut j = i;
            while j < bytes.len() && (bytes[j].1.is_alphanumeric() || bytes[j].1 == '_') {
                j += 1;
            }
            let end = if j < bytes.len() {
                bytes[j].0
            } else {
                text.len()
            };
            out.push(&text[start..end]);
            i = j;
        } else {
            let end = if i + 1 < bytes.len() {
                bytes[i + 1].0
            } else {
                text.len()
            };
            out.push(&text[start..end]);
            i += 1;
        }
    }
    out
}

impl Vocabulary {
    /// Build a vocabulary from a corpus. Token ids are assigned in sorted
    /// order of the distinct surface forms plus the reserved unknown token,
    /// so the same corpus always yields the same vocabulary.
    pub fn from_texts<I, S>(texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut set: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
        set.insert(UNKNOWN_TOKEN.to_string());
        for text in texts {
            for tok in split_tokens(text.as_ref()) {
                set.insert(tok.to_string());
            }
        }
        let tokens: Vec<String> = set.into_iter().collect();
        let unknown_id = tokens
            .iter()
            .position(|t| t == UNKNOWN_TOKEN)
            .expect("unknown token inserted above");
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            tokens,
            unknown_id,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unknown_id(&self) -> usize {
        self.unknown_id
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        split_tokens(text)
            .into_iter()
            .map(|t| self.id_of(t).unwrap_or(self.unknown_id))
            .collect()
    }

    /// Render token ids back to text. Fails on out-of-range ids.
    pub fn detokenize(&self, ids: &[usize]) -> Result<String, PolicyError> {
        let mut parts = Vec::with_capacity(ids.len());
        for &id in ids {
            match self.token(id) {
                Some(t) => parts.push(t),
                None => {
                    return Err(PolicyError::TokenOutOfRange {
                        id,
                        vocab_size: self.len(),
                    })
                }
            }
        }
        Ok(parts.join(" "))
    }

    /// True when every token of `text` is in the vocabulary.
    pub fn covers(&self, text: &str) -> bool {
        split_tokens(text).into_iter().all(|t| {
            self.id_of(t)
                .map(|id| id != self.unknown_id || t == UNKNOWN_TOKEN)
                .unwrap_or(false)
        })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },
    #[error("token sequence must be non-empty")]
    EmptySequence,
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("checkpoint version {found} unsupported (expected {expected})")]
    BadCheckpointVersion { found: u32, expected: u32 },
    #[error("checkpoint io: {0}")]
    Io(String),
    #[error("checkpoint parse: {0}")]
    Parse(String),
    #[error("policy shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Numerically careful log-softmax. The normalizer is computed as
/// `ln1p(sum of non-max exponentials)` so near-saturated rows keep full
/// precision. Every output is finite and `<= 0`.
pub(crate) fn log_softmax(row: &[f64]) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    let mut argmax = 0;
    for (i, &z) in row.iter().enumerate() {
        if z > max {
            max = z;
            argmax = i;
        }
    }
    let mut rest = 0.0;
    for (i, &z) in row.iter().enumerate() {
        if i != argmax {
            rest += (z - max).exp();
        }
    }
    let log_norm = rest.ln_1p();
    row.iter().map(|&z| z - max - log_norm).collect()
}

pub(crate) fn softmax(row: &[f64]) -> Vec<f64> {
    log_softmax(row).into_iter().map(f64::exp).collect()
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Scoring interface every policy implementation provides.
pub trait SequencePolicy {
    /// Per-token log-probabilities of `tokens` under the policy,
    /// conditioned on the prompt.
    fn log_prob_sequence(
        &self,
        prompt: &MedicalInstance,
        tokens: &[usize],
    ) -> Result<Vec<f64>, PolicyError>;

    /// Length-normalized sequence log-probability (the preference score).
    fn preference_score_tokens(
        &self,
        prompt: &MedicalInstance,
        tokens: &[usize],
    ) -> Result<f64, PolicyError> {
        let lps = self.log_prob_sequence(prompt, tokens)?;
        Ok(lps.iter().sum::<f64>() / lps.len() as f64)
    }
}

/// Parameters of the bigram policy: a `(|V|+1) x |V|` logit table (last row
/// is the sequence-start context) plus a `buckets x |V|` prompt-bias table.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    vocab: Vocabulary,
    logits: Array2<f64>,
    prompt_bias: Array2<f64>,
}

/// Frozen copy of the policy captured at training start. Never mutated.
#[derive(Debug, Clone)]
pub struct ReferencePolicy(PolicyParams);

impl ReferencePolicy {
    pub fn capture(params: &PolicyParams) -> Self {
        Self(params.clone())
    }

    pub fn params(&self) -> &PolicyParams {
        &self.0
    }
}

/// Gradient (or any other tangent quantity) shaped like [`PolicyParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGrad {
    pub logits: Array2<f64>,
    pub prompt_bias: Array2<f64>,
}

impl PolicyGrad {
    pub fn zeros_like(params: &PolicyParams) -> Self {
        Self {
            logits: Array2::zeros(params.logits.dim()),
            prompt_bias: Array2::zeros(params.prompt_bias.dim()),
        }
    }

    pub fn add_assign(&mut self, other: &PolicyGrad) {
        self.logits += &other.logits;
        self.prompt_bias += &other.prompt_bias;
    }

    pub fn scale(&mut self, factor: f64) {
        self.logits *= factor;
        self.prompt_bias *= factor;
    }

    /// Total number of coordinates (logits first, then bias).
    pub fn n_coords(&self) -> usize {
        self.logits.len() + self.prompt_bias.len()
    }

    /// Value at a flat coordinate index in logits-then-bias order.
    pub fn coord(&self, flat: usize) -> f64 {
        let nl = self.logits.len();
        if flat < nl {
            *self
                .logits
                .as_slice()
                .expect("standard layout")
                .get(flat)
                .expect("in range")
        } else {
            self.prompt_bias.as_slice().expect("standard layout")[flat - nl]
        }
    }

    pub fn max_abs(&self) -> f64 {
        let a = self
            .logits
            .iter()
            .fold(0.0_f64, |acc, &v| acc.max(v.abs()));
        self.prompt_bias
            .iter()
            .fold(a, |acc, &v| acc.max(v.abs()))
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    vocab: Vocabulary,
    n_buckets: usize,
    logits: Array2<f64>,
    prompt_bias: Array2<f64>,
}

impl PolicyParams {
    /// All-zero logits: every conditional is exactly uniform.
    pub fn uniform(vocab: Vocabulary, n_buckets: usize) -> Self {
        let v = vocab.len();
        Self {
            logits: Array2::zeros((v + 1, v)),
            prompt_bias: Array2::zeros((n_buckets, v)),
            vocab,
        }
    }

    /// Independent Gaussian logits with the given scale, seeded.
    pub fn random(vocab: Vocabulary, n_buckets: usize, seed: u64, scale: f64) -> Self {
        use rand::SeedableRng;
        use rand_distr::Distribution;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let normal = rand_distr::Normal::new(0.0, scale).expect("valid scale");
        let v = vocab.len();
        let logits = Array2::from_shape_fn((v + 1, v), |_| normal.sample(&mut rng));
        let prompt_bias = Array2::from_shape_fn((n_buckets, v), |_| normal.sample(&mut rng));
        Self {
            vocab,
            logits,
            prompt_bias,
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Row index of the sequence-start context.
    pub fn start_context(&self) -> usize {
        self.vocab.len()
    }

    pub fn n_buckets(&self) -> usize {
        self.prompt_bias.nrows()
    }

    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    pub fn prompt_bias(&self) -> &Array2<f64> {
        &self.prompt_bias
    }

    /// Deterministic prompt-conditioning bucket for an instance, derived
    /// from a fixed hash of its record and prompt text.
    pub fn bucket_for(&self, prompt: &MedicalInstance) -> usize {
        let mut bytes = prompt.record.as_bytes().to_vec();
        bytes.push(0x1f);
        bytes.extend_from_slice(prompt.prompt.as_bytes());
        (fnv1a64(&bytes) % self.n_buckets() as u64) as usize
    }

    /// Combined logit row for a context under a bias bucket.
    fn combined_row(&self, bucket: usize, context: usize) -> Vec<f64> {
        let v = self.vocab_size();
        debug_assert!(context <= v, "context {context} out of range");
        debug_assert!(bucket < self.n_buckets());
        let mut row = Vec::with_capacity(v);
        for j in 0..v {
            row.push(self.logits[(context, j)] + self.prompt_bias[(bucket, j)]);
        }
        row
    }

    /// Log-softmax of the conditional distribution for `context`.
    pub fn conditional_log_probs(&self, bucket: usize, context: usize) -> Vec<f64> {
        log_softmax(&self.combined_row(bucket, context))
    }

    /// Softmax of the conditional distribution for `context`.
    pub fn conditional_probs(&self, bucket: usize, context: usize) -> Vec<f64> {
        softmax(&self.combined_row(bucket, context))
    }

    /// Length-normalized log-probability of a chain (its preference score).
    /// Always `<= 0`.
    pub fn preference_score(
        &self,
        prompt: &MedicalInstance,
        chain: &ReasoningChain,
    ) -> Result<f64, PolicyError> {
        self.preference_score_tokens(prompt, &chain.tokens)
    }

    /// Autoregressive categorical sampling from
    /// `softmax((logits + bias) / temperature)`. Stops after emitting
    /// `stop_id` or at `max_len`. Deterministic given the rng state.
    pub fn sample_sequence<R: Rng>(
        &self,
        prompt: &MedicalInstance,
        temperature: f64,
        rng: &mut R,
        max_len: usize,
        stop_id: usize,
    ) -> Result<Vec<usize>, PolicyError> {
        if !(temperature > 0.0) {
            return Err(PolicyError::BadTemperature(temperature));
        }
        let bucket = self.bucket_for(prompt);
        let mut out = Vec::new();
        let mut context = self.start_context();
        while out.len() < max_len {
            let mut row = self.combined_row(bucket, context);
            for z in &mut row {
                *z /= temperature;
            }
            let probs = softmax(&row);
            let draw: f64 = rng.gen::<f64>();
            let mut acc = 0.0;
            let mut chosen = probs.len() - 1;
            for (i, &p) in probs.iter().enumerate() {
                acc += p;
                if draw < acc {
                    chosen = i;
                    break;
                }
            }
            out.push(chosen);
            if chosen == stop_id {
                break;
            }
            context = chosen;
        }
        Ok(out)
    }

    /// Exact token-level KL divergence `KL(self || reference)` at a context.
    ///
    /// Precondition: `context <= |V|` (the start row is `|V|`). Softmax
    /// probabilities are strictly positive, so the sum is always finite;
    /// the result is clamped at zero against rounding in the
    /// identical-distribution case.
    pub fn token_kl(
        &self,
        reference: &ReferencePolicy,
        prompt: &MedicalInstance,
        context: usize,
    ) -> f64 {
        assert!(
            context <= self.vocab_size(),
            "context {context} out of range for vocabulary of size {}",
            self.vocab_size()
        );
        let bucket = self.bucket_for(prompt);
        let log_p = self.conditional_log_probs(bucket, context);
        let log_q = reference.params().conditional_log_probs(bucket, context);
        token_kl_from_log_probs(&log_p, &log_q)
    }

    /// Sequence-level KL: mean over positions of the token-level KL at each
    /// position's context.
    pub fn sequence_kl(
        &self,
        reference: &ReferencePolicy,
        prompt: &MedicalInstance,
        chain: &ReasoningChain,
    ) -> Result<f64, PolicyError> {
        if chain.tokens.is_empty() {
            return Err(PolicyError::EmptySequence);
        }
        self.check_tokens(&chain.tokens)?;
        let bucket = self.bucket_for(prompt);
        let mut cache: HashMap<usize, f64> = HashMap::new();
        let mut total = 0.0;
        let mut context = self.start_context();
        for &tok in &chain.tokens {
            let kl = *cache.entry(context).or_insert_with(|| {
                let log_p = self.conditional_log_probs(bucket, context);
                let log_q = reference.params().conditional_log_probs(bucket, context);
                token_kl_from_log_probs(&log_p, &log_q)
            });
            total += kl;
            context = tok;
        }
        Ok(total / chain.tokens.len() as f64)
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<(), PolicyError> {
        let v = self.vocab_size();
        for &t in tokens {
            if t >= v {
                return Err(PolicyError::TokenOutOfRange {
                    id: t,
                    vocab_size: v,
                });
            }
        }
        Ok(())
    }

    /// Number of flat parameter coordinates (logits then bias).
    pub fn n_coords(&self) -> usize {
        self.logits.len() + self.prompt_bias.len()
    }

    /// Add `delta` to the coordinate at a flat index; used by the
    /// finite-difference checker.
    pub fn nudge_coord(&mut self, flat: usize, delta: f64) {
        let nl = self.logits.len();
        if flat < nl {
            self.logits.as_slice_mut().expect("standard layout")[flat] += delta;
        } else {
            self.prompt_bias.as_slice_mut().expect("standard layout")[flat - nl] += delta;
        }
    }

    /// Apply `params += factor * grad` elementwise.
    pub fn add_scaled(&mut self, grad: &PolicyGrad, factor: f64) {
        self.logits.scaled_add(factor, &grad.logits);
        self.prompt_bias.scaled_add(factor, &grad.prompt_bias);
    }

    /// Decoupled weight decay: `params *= 1 - lr * decay`.
    pub fn decay(&mut self, factor: f64) {
        self.logits *= factor;
        self.prompt_bias *= factor;
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            vocab: self.vocab.clone(),
            n_buckets: self.n_buckets(),
            logits: self.logits.clone(),
            prompt_bias: self.prompt_bias.clone(),
        };
        let json = serde_json::to_string(&ckpt).map_err(|e| PolicyError::Parse(e.to_string()))?;
        std::fs::write(path, json + "\n").map_err(|e| PolicyError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let data = std::fs::read_to_string(path).map_err(|e| PolicyError::Io(e.to_string()))?;
        let ckpt: Checkpoint =
            serde_json::from_str(&data).map_err(|e| PolicyError::Parse(e.to_string()))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(PolicyError::BadCheckpointVersion {
                found: ckpt.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let v = ckpt.vocab.len();
        if ckpt.logits.dim() != (v + 1, v) || ckpt.prompt_bias.dim() != (ckpt.n_buckets, v) {
            return Err(PolicyError::ShapeMismatch(format!(
                "vocab size {v} does not match logits {:?} / bias {:?}",
                ckpt.logits.dim(),
                ckpt.prompt_bias.dim()
            )));
        }
        Ok(Self {
            vocab: ckpt.vocab,
            logits: ckpt.logits,
            prompt_bias: ckpt.prompt_bias,
        })
    }
}

pub(crate) fn token_kl_from_log_probs(log_p: &[f64], log_q: &[f64]) -> f64 {
    let kl: f64 = log_p
        .iter()
        .zip(log_q.iter())
        .map(|(&lp, &lq)| lp.exp() * (lp - lq))
        .sum();
    kl.max(0.0)
}

impl SequencePolicy for PolicyParams {
    fn log_prob_sequence(
        &self,
        prompt: &MedicalInstance,
        tokens: &[usize],
    ) -> Result<Vec<f64>, PolicyError> {
        if tokens.is_empty() {
            return Err(PolicyError::EmptySequence);
        }
        self.check_tokens(tokens)?;
        let bucket = self.bucket_for(prompt);
        let mut cache: HashMap<usize, Vec<f64>> = HashMap::new();
        let mut out = Vec::with_capacity(tokens.len());
        let mut context = self.start_context();
        for &tok in tokens {
            let row = cache
                .entry(context)
                .or_insert_with(|| self.conditional_log_probs(bucket, context));
            out.push(row[tok]);
            context = tok;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn instance() -> MedicalInstance {
        MedicalInstance::new("t1", "", "Is water wet?", "yes", vec![]).unwrap()
    }

    #[test]
    fn tokenize_splits_words_and_punctuation() {
        let vocab = Vocabulary::from_texts(["1. Alpha beta: gamma?"]);
        let toks = split_tokens("1. Alpha beta: gamma?");
        assert_eq!(toks, vec!["1", ".", "Alpha", "beta", ":", "gamma", "?"]);
        let ids = vocab.tokenize("1. Alpha beta: gamma?");
        assert_eq!(ids.len(), 7);
        assert!(ids.iter().all(|&i| i != vocab.unknown_id()));
    }

    #[test]
    fn tokenize_round_trips_for_known_text() {
        let vocab = Vocabulary::from_texts(["alpha beta . gamma : delta"]);
        let ids = vocab.tokenize("alpha beta . gamma");
        let text = vocab.detokenize(&ids).unwrap();
        assert_eq!(text, "alpha beta . gamma");
        assert_eq!(vocab.tokenize(&text), ids);
    }

    #[test]
    fn unknown_tokens_map_to_reserved_id() {
        let vocab = Vocabulary::from_texts(["alpha"]);
        let ids = vocab.tokenize("alpha omega");
        assert_eq!(ids[1], vocab.unknown_id());
        assert!(!vocab.covers("alpha omega"));
        assert!(vocab.covers("alpha alpha"));
    }

    #[test]
    fn vocabulary_ids_are_sorted_and_stable() {
        let a = Vocabulary::from_texts(["b a c"]);
        let b = Vocabulary::from_texts(["c", "a", "b"]);
        assert_eq!(a, b);
        for w in ["a", "b", "c"] {
            assert!(a.id_of(w).is_some());
        }
    }

    #[test]
    fn uniform_policy_log_probs_are_ln_half_for_two_tokens() {
        // "<unk>" plus one word gives |V| = 2; all-zero logits make every
        // conditional exactly uniform.
        let vocab = Vocabulary::from_texts(["a"]);
        assert_eq!(vocab.len(), 2);
        let params = PolicyParams::uniform(vocab, 4);
        let inst = instance();
        let lps = params.log_prob_sequence(&inst, &[0, 1, 0, 1]).unwrap();
        for lp in lps {
            assert_abs_diff_eq!(lp, 0.5_f64.ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn saturated_logit_gives_log_prob_near_zero() {
        // One logit 40 above the other: softmax saturates, log-prob of the
        // dominant token is within 1e-12 of zero and still finite/<= 0.
        let vocab = Vocabulary::from_texts(["a"]);
        let mut params = PolicyParams::uniform(vocab, 1);
        let start = params.start_context();
        params.logits[(start, 1)] = 40.0;
        let inst = instance();
        let lps = params.log_prob_sequence(&inst, &[1]).unwrap();
        assert!(lps[0] <= 0.0);
        assert!(lps[0].abs() < 1e-12);
    }

    #[test]
    fn log_prob_matches_hand_softmax_quarter_three_quarters() {
        // Logits (0, ln 3) give probabilities (0.25, 0.75); the log-prob of
        // token 1 is ln 0.75 = -0.2876820724...
        let vocab = Vocabulary::from_texts(["a"]);
        let mut params = PolicyParams::uniform(vocab, 1);
        let start = params.start_context();
        params.logits[(start, 1)] = 3.0_f64.ln();
        let inst = instance();
        let lps = params.log_prob_sequence(&inst, &[1]).unwrap();
        assert_abs_diff_eq!(lps[0], 0.75_f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(lps[0], -0.287682, epsilon = 1e-6);
    }

    #[test]
    fn out_of_range_token_is_an_error() {
        let vocab = Vocabulary::from_texts(["a"]);
        let params = PolicyParams::uniform(vocab, 1);
        let inst = instance();
        assert!(matches!(
            params.log_prob_sequence(&inst, &[5]),
            Err(PolicyError::TokenOutOfRange { id: 5, .. })
        ));
        assert!(matches!(
            params.log_prob_sequence(&inst, &[]),
            Err(PolicyError::EmptySequence)
        ));
    }

    #[test]
    fn preference_score_is_mean_of_log_probs() {
        // Two tokens with probabilities 0.5 then 0.25:
        // (ln 0.5 + ln 0.25) / 2 = -1.0397207708...
        let vocab = Vocabulary::from_texts(["a"]);
        let mut params = PolicyParams::uniform(vocab, 1);
        // Start row uniform (prob 0.5 each); context row of token 0 gives
        // probability 0.25 to token 0 via logits (0, ln 3).
        params.logits[(0, 1)] = 3.0_f64.ln();
        let inst = instance();
        let s = params.preference_score_tokens(&inst, &[0, 0]).unwrap();
        assert_abs_diff_eq!(s, (0.5_f64.ln() + 0.25_f64.ln()) / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s, -1.039721, epsilon = 1e-6);
        assert!(s <= 0.0);
    }

    #[test]
    fn preference_score_invariant_to_length_at_constant_prob() {
        let vocab = Vocabulary::from_texts(["a"]);
        let params = PolicyParams::uniform(vocab, 1);
        let inst = instance();
        let short = params.preference_score_tokens(&inst, &[0, 1]).unwrap();
        let long = params
            .preference_score_tokens(&inst, &[0, 1, 0, 1, 0, 1, 0, 1])
            .unwrap();
        assert_abs_diff_eq!(short, long, epsilon = 1e-12);
        assert_abs_diff_eq!(short, 0.5_f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let vocab = Vocabulary::from_texts(["a b c d"]);
        let params = PolicyParams::random(vocab, 8, 7, 1.0);
        let inst = instance();
        let mut rng1 = rand_chacha::ChaCha8Rng::seed_from_u64(123);
        let mut rng2 = rand_chacha::ChaCha8Rng::seed_from_u64(123);
        let s1 = params
            .sample_sequence(&inst, 1.0, &mut rng1, 32, usize::MAX)
            .unwrap();
        let s2 = params
            .sample_sequence(&inst, 1.0, &mut rng2, 32, usize::MAX)
            .unwrap();
        assert_eq!(s1, s2);
        assert_eq!(s1.len(), 32);
    }

    #[test]
    fn near_zero_temperature_is_greedy() {
        let vocab = Vocabulary::from_texts(["a b c"]);
        let mut params = PolicyParams::uniform(vocab, 1);
        let start = params.start_context();
        params.logits[(start, 2)] = 1.0;
        params.logits[(2, 3)] = 1.0;
        params.logits[(3, 2)] = 1.0;
        let inst = instance();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let seq = params
            .sample_sequence(&inst, 1e-6, &mut rng, 6, usize::MAX)
            .unwrap();
        assert_eq!(seq, vec![2, 3, 2, 3, 2, 3]);
    }

    #[test]
    fn sampling_stops_at_stop_id() {
        let vocab = Vocabulary::from_texts(["a b c"]);
        let mut params = PolicyParams::uniform(vocab, 1);
        let start = params.start_context();
        params.logits[(start, 1)] = 50.0;
        let inst = instance();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let seq = params
            .sample_sequence(&inst, 1.0, &mut rng, 100, 1)
            .unwrap();
        assert_eq!(seq, vec![1]);
    }

    #[test]
    fn uniform_two_token_sampling_frequency_within_binomial_bound() {
        // 10^4 single-token draws from an exactly uniform two-token policy:
        // the empirical frequency of token 0 stays within +-3 sigma of 0.5,
        // i.e. inside [0.47, 0.53].
        let vocab = Vocabulary::from_texts(["a"]);
        let params = PolicyParams::uniform(vocab, 1);
        let inst = instance();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let mut zeros = 0usize;
        for _ in 0..10_000 {
            let seq = params
                .sample_sequence(&inst, 1.0, &mut rng, 1, usize::MAX)
                .unwrap();
            if seq[0] == 0 {
                zeros += 1;
            }
        }
        let freq = zeros as f64 / 10_000.0;
        assert!((0.47..=0.53).contains(&freq), "freq {freq} outside bound");
    }

    #[test]
    fn token_kl_zero_for_identical_distributions() {
        let vocab = Vocabulary::from_texts(["a b"]);
        let params = PolicyParams::random(vocab, 4, 3, 0.7);
        let reference = ReferencePolicy::capture(&params);
        let inst = instance();
        for ctx in 0..=params.vocab_size() {
            assert_abs_diff_eq!(params.token_kl(&reference, &inst, ctx), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn token_kl_matches_hand_sum() {
        // p = (0.5, 0.5), q = (0.25, 0.75):
        // KL = 0.5 ln 2 + 0.5 ln(2/3) = 0.1438410362...
        let vocab = Vocabulary::from_texts(["a"]);
        let params = PolicyParams::uniform(vocab.clone(), 1);
        let mut ref_params = PolicyParams::uniform(vocab, 1);
        let start = ref_params.start_context();
        ref_params.logits[(start, 1)] = 3.0_f64.ln();
        let reference = ReferencePolicy::capture(&ref_params);
        let inst = instance();
        let kl = params.token_kl(&reference, &inst, params.start_context());
        assert_abs_diff_eq!(kl, 0.14384, epsilon = 1e-5);
        assert_abs_diff_eq!(
            kl,
            0.5 * 2.0_f64.ln() + 0.5 * (2.0_f64 / 3.0).ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn token_kl_saturated_vs_uniform_approaches_ln2() {
        let vocab = Vocabulary::from_texts(["a"]);
        let mut params = PolicyParams::uniform(vocab.clone(), 1);
        let start = params.start_context();
        params.logits[(start, 0)] = 40.0;
        let reference = ReferencePolicy::capture(&PolicyParams::uniform(vocab, 1));
        let inst = instance();
        let kl = params.token_kl(&reference, &inst, start);
        assert_abs_diff_eq!(kl, 2.0_f64.ln(), epsilon = 1e-6);
    }

    #[test]
    fn sequence_kl_is_mean_over_positions() {
        // Chain of length 2 visiting the start context (KL 0.14384...) and
        // the token-0 context (KL 0): sequence KL is the mean, 0.0719205...
        let vocab = Vocabulary::from_texts(["a"]);
        let mut params = PolicyParams::uniform(vocab.clone(), 1);
        let start = params.start_context();
        params.logits[(start, 1)] = 3.0_f64.ln();
        let reference = ReferencePolicy::capture(&PolicyParams::uniform(vocab.clone(), 1));
        let inst = instance();
        let chain = ReasoningChain {
            steps: vec![],
            answer: String::new(),
            text: String::new(),
            tokens: vec![0, 0],
        };
        let expected_token = params.token_kl(&reference, &inst, start);
        let seq = params.sequence_kl(&reference, &inst, &chain).unwrap();
        assert_abs_diff_eq!(seq, expected_token / 2.0, epsilon = 1e-12);

        // Repeating the same context leaves the mean unchanged.
        let chain4 = ReasoningChain {
            tokens: vec![0, 0, 0, 0],
            ..chain.clone()
        };
        let seq4 = params.sequence_kl(&reference, &inst, &chain4).unwrap();
        let per_start = expected_token;
        let per_zero = params.token_kl(&reference, &inst, 0);
        assert_abs_diff_eq!(seq4, (per_start + 3.0 * per_zero) / 4.0, epsilon = 1e-12);
    }

    #[test]
    fn shift_invariance_of_row_constant() {
        // Adding a constant to every logit of one context row leaves the
        // distribution, log-probs, and KL unchanged within 1e-10.
        let vocab = Vocabulary::from_texts(["a b c"]);
        let params = PolicyParams::random(vocab, 4, 11, 0.8);
        let reference = ReferencePolicy::capture(&PolicyParams::random(
            params.vocab().clone(),
            4,
            12,
            0.8,
        ));
        let inst = instance();
        let mut shifted = params.clone();
        for j in 0..shifted.vocab_size() {
            shifted.logits[(1, j)] += 7.25;
        }
        let tokens = vec![1, 2, 1, 0];
        let a = params.log_prob_sequence(&inst, &tokens).unwrap();
        let b = shifted.log_prob_sequence(&inst, &tokens).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-10);
        }
        assert_abs_diff_eq!(
            params.token_kl(&reference, &inst, 1),
            shifted.token_kl(&reference, &inst, 1),
            epsilon = 1e-10
        );
    }

    #[test]
    fn conditional_rows_normalize_to_one() {
        let vocab = Vocabulary::from_texts(["x y z w"]);
        let params = PolicyParams::random(vocab, 8, 21, 3.0);
        for b in 0..params.n_buckets() {
            for ctx in 0..=params.vocab_size() {
                let sum: f64 = params.conditional_probs(b, ctx).iter().sum();
                assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.json");
        let vocab = Vocabulary::from_texts(["alpha beta gamma"]);
        let params = PolicyParams::random(vocab, 16, 44, 1.3);
        params.save(&path).unwrap();
        let loaded = PolicyParams::load(&path).unwrap();
        assert_eq!(params, loaded);

        // Saving the loaded copy reproduces the file byte for byte.
        let path2 = dir.path().join("policy2.json");
        loaded.save(&path2).unwrap();
        let b1 = std::fs::read(&path).unwrap();
        let b2 = std::fs::read(&path2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn checkpoint_rejects_unknown_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.json");
        let vocab = Vocabulary::from_texts(["a"]);
        let params = PolicyParams::uniform(vocab, 2);
        params.save(&path).unwrap();
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("\"version\":1", "\"version\":9");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(
            PolicyParams::load(&path),
            Err(PolicyError::BadCheckpointVersion { found: 9, .. })
        ));
    }

    #[test]
    fn bucket_is_stable_across_calls_and_instances_differ() {
        let vocab = Vocabulary::from_texts(["a"]);
        let params = PolicyParams::uniform(vocab, 64);
        let a = instance();
        let b = MedicalInstance::new("t2", "ctx", "A different question?", "no", vec![]).unwrap();
        assert_eq!(params.bucket_for(&a), params.bucket_for(&a));
        assert!(params.bucket_for(&a) < 64);
        assert!(params.bucket_for(&b) < 64);
    }
}
