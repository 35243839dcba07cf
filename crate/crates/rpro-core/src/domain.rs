//! Core data model shared by the whole toolkit: task taxonomy, medical
//! instances, four-step reasoning chains, candidate groups, and training
//! configuration.
//!
//! All types here are plain data. Nothing in this crate mutates them through
//! shared references, so they can be passed freely across threads.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::OnceLock;

use crate::policy::Vocabulary;

/// The two task families the toolkit distinguishes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    /// General question answering over research-style questions.
    Qa,
    /// Clinical diagnosis over patient vignettes, usually multiple choice.
    Diagnosis,
}

impl TaskKind {
    /// The four step labels a reasoning chain must carry for this task,
    /// in order.
    pub fn step_labels(&self) -> [&'static str; 4] {
        match self {
            TaskKind::Qa => [
                "Question Decomposition",
                "Background Knowledge",
                "Logical Connection",
                "Final Justification",
            ],
            TaskKind::Diagnosis => [
                "Case Summary",
                "Clinical Significance",
                "Differential Diagnosis",
                "Most Likely Diagnosis",
            ],
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskKind::Qa => f.write_str("qa"),
            TaskKind::Diagnosis => f.write_str("diagnosis"),
        }
    }
}

/// One labeled answer choice of a multiple-choice question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerOption {
    pub label: String,
    pub text: String,
}

/// A single task instance: a free-text record (may be empty), the prompt,
/// the gold answer, and optional answer choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedicalInstance {
    pub id: String,
    pub record: String,
    pub prompt: String,
    pub task: TaskKind,
    pub gold_answer: String,
    pub options: Vec<AnswerOption>,
}

impl MedicalInstance {
    /// Build an instance, deriving its task with [`classify_task`].
    pub fn new(
        id: impl Into<String>,
        record: impl Into<String>,
        prompt: impl Into<String>,
        gold_answer: impl Into<String>,
        options: Vec<AnswerOption>,
    ) -> Result<Self, DomainError> {
        let id = id.into();
        let record = record.into();
        let prompt = prompt.into();
        let gold_answer = gold_answer.into();
        if prompt.trim().is_empty() {
            return Err(DomainError::EmptyPrompt { id });
        }
        if !options.is_empty() && !options.iter().any(|o| o.label == gold_answer) {
            return Err(DomainError::GoldAnswerNotAnOption { id, gold_answer });
        }
        let task = classify_parts(&prompt, &record, &options);
        Ok(Self {
            id,
            record,
            prompt,
            task,
            gold_answer,
            options,
        })
    }
}

fn vignette_regexes() -> &'static (regex::Regex, regex::Regex, regex::Regex) {
    static RE: OnceLock<(regex::Regex, regex::Regex, regex::Regex)> = OnceLock::new();
    RE.get_or_init(|| {
        let age =
            regex::Regex::new(r"(?i)\b\d{1,3}[\s-]*(year|yr)s?[\s-]*old\b|\b\d{1,3}\s*y/?o\b")
                .expect("age regex");
        let subject =
            regex::Regex::new(r"(?i)\b(man|woman|boy|girl|male|female|infant|patient)\b")
                .expect("subject regex");
        let presentation =
            regex::Regex::new(r"(?i)\bpresent(s|ed|ing)?\s+with\b").expect("presentation regex");
        (age, subject, presentation)
    })
}

fn classify_parts(prompt: &str, record: &str, options: &[AnswerOption]) -> TaskKind {
    if !options.is_empty() {
        return TaskKind::Diagnosis;
    }
    let (age, subject, presentation) = vignette_regexes();
    let text = format!("{record}\n{prompt}");
    if (age.is_match(&text) && subject.is_match(&text)) || presentation.is_match(&text) {
        TaskKind::Diagnosis
    } else {
        TaskKind::Qa
    }
}

/// Decide the task family of an instance from its content alone.
///
/// Total and deterministic: multiple-choice options or a patient-vignette
/// pattern (age plus subject marker, or "presents with") mean diagnosis,
/// anything else is general QA.
pub fn classify_task(instance: &MedicalInstance) -> TaskKind {
    classify_parts(&instance.prompt, &instance.record, &instance.options)
}

/// One labeled step of a reasoning chain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub label: String,
    pub text: String,
}

impl Step {
    pub fn new(label: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            label: canonicalize_text(&label.into()),
            text: canonicalize_text(&text.into()),
        }
    }
}

/// Collapse all whitespace runs to single spaces and trim the ends.
pub fn canonicalize_text(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// One candidate chain-of-thought: four labeled steps, a final answer, the
/// canonical text rendering, and the token ids of that text.
///
/// The canonical text is `"1. <label>: <text>"` per step followed by
/// `"Answer: <answer>"`, one line each. `tokens` always equals
/// `vocab.tokenize(&text)` for the vocabulary the chain was built with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningChain {
    pub steps: Vec<Step>,
    pub answer: String,
    pub text: String,
    pub tokens: Vec<usize>,
}

impl ReasoningChain {
    /// Build a chain from step texts using the task's canonical labels.
    /// Fails unless all four steps are non-empty after canonicalization.
    pub fn from_parts(
        task: TaskKind,
        step_texts: [&str; 4],
        answer: &str,
        vocab: &Vocabulary,
    ) -> Result<Self, DomainError> {
        let labels = task.step_labels();
        let steps: Vec<Step> = labels
            .iter()
            .zip(step_texts.iter())
            .map(|(l, t)| Step::new(*l, *t))
            .collect();
        Self::from_steps(steps, answer, vocab)
    }

    /// Build a chain from already-labeled steps, enforcing the four-step
    /// structure. Use [`ReasoningChain::from_steps_unchecked`] for parsed
    /// content that still has to go through [`validate_chain`].
    pub fn from_steps(
        steps: Vec<Step>,
        answer: &str,
        vocab: &Vocabulary,
    ) -> Result<Self, DomainError> {
        if steps.len() != 4 {
            return Err(DomainError::WrongStepCount { found: steps.len() });
        }
        if let Some(pos) = steps.iter().position(|s| s.text.is_empty()) {
            return Err(DomainError::EmptyStep { position: pos + 1 });
        }
        Ok(Self::from_steps_unchecked(steps, answer, vocab))
    }

    /// Build a chain without structural checks. The result may fail
    /// [`validate_chain`]; the pipeline uses this for raw parsed output.
    pub fn from_steps_unchecked(steps: Vec<Step>, answer: &str, vocab: &Vocabulary) -> Self {
        let answer = canonicalize_text(answer);
        let text = render_chain_text(&steps, &answer);
        let tokens = vocab.tokenize(&text);
        Self {
            steps,
            answer,
            text,
            tokens,
        }
    }

    /// Re-tokenize the chain under a different vocabulary.
    pub fn retokenized(&self, vocab: &Vocabulary) -> Self {
        let mut out = self.clone();
        out.tokens = vocab.tokenize(&out.text);
        out
    }
}

fn render_chain_text(steps: &[Step], answer: &str) -> String {
    let mut lines: Vec<String> = steps
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {}: {}", i + 1, s.label, s.text))
        .collect();
    if answer.is_empty() {
        lines.push("Answer:".to_string());
    } else {
        lines.push(format!("Answer: {answer}"));
    }
    lines.join("\n")
}

/// A structural defect found by [`validate_chain`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChainDefect {
    MissingStep {
        position: usize,
    },
    ExtraStep {
        position: usize,
    },
    EmptyStep {
        position: usize,
    },
    LabelMismatch {
        position: usize,
        expected: String,
        found: String,
    },
}

impl fmt::Display for ChainDefect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChainDefect::MissingStep { position } => write!(f, "missing step {position}"),
            ChainDefect::ExtraStep { position } => write!(f, "extra step {position}"),
            ChainDefect::EmptyStep { position } => write!(f, "step {position} is empty"),
            ChainDefect::LabelMismatch {
                position,
                expected,
                found,
            } => write!(f, "step {position} labeled '{found}', expected '{expected}'"),
        }
    }
}

/// Check a chain against the four-step template of a task. An empty defect
/// list means the chain is well-formed. Defects are values, not errors:
/// malformed chains are data the pipeline has to cope with.
pub fn validate_chain(chain: &ReasoningChain, task: TaskKind) -> Vec<ChainDefect> {
    let expected = task.step_labels();
    let mut defects = Vec::new();
    for (i, label) in expected.iter().enumerate() {
        match chain.steps.get(i) {
            None => defects.push(ChainDefect::MissingStep { position: i + 1 }),
            Some(step) => {
                if step.label != *label {
                    defects.push(ChainDefect::LabelMismatch {
                        position: i + 1,
                        expected: (*label).to_string(),
                        found: step.label.clone(),
                    });
                }
                if step.text.is_empty() {
                    defects.push(ChainDefect::EmptyStep { position: i + 1 });
                }
            }
        }
    }
    for i in expected.len()..chain.steps.len() {
        defects.push(ChainDefect::ExtraStep { position: i + 1 });
    }
    defects
}

/// A task instance together with its candidate chains, their ground-truth
/// ranks (1 = best), and slots for policy preference scores and advantages.
///
/// `ranks[j]` is the rank of `candidates[j]`; candidates need not be stored
/// in rank order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateGroup {
    pub instance: MedicalInstance,
    pub candidates: Vec<ReasoningChain>,
    pub ranks: Vec<usize>,
    pub pref_scores: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl CandidateGroup {
    /// Build a group, checking that `ranks` is a permutation of `1..=K`
    /// aligned with `candidates` and that `K >= 2`.
    pub fn new(
        instance: MedicalInstance,
        candidates: Vec<ReasoningChain>,
        ranks: Vec<usize>,
    ) -> Result<Self, DomainError> {
        let k = candidates.len();
        if k < 2 {
            return Err(DomainError::GroupTooSmall {
                id: instance.id.clone(),
                size: k,
            });
        }
        if ranks.len() != k || !is_permutation_of_1_to_k(&ranks) {
            return Err(DomainError::InvalidRanks {
                id: instance.id.clone(),
                ranks,
            });
        }
        Ok(Self {
            instance,
            candidates,
            ranks,
            pref_scores: vec![0.0; k],
            advantages: vec![0.0; k],
        })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Candidate indices sorted best rank first.
    pub fn indices_by_rank(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.ranks.len()).collect();
        idx.sort_by_key(|&j| self.ranks[j]);
        idx
    }
}

pub(crate) fn is_permutation_of_1_to_k(ranks: &[usize]) -> bool {
    let k = ranks.len();
    let mut seen = vec![false; k];
    for &r in ranks {
        if r < 1 || r > k || seen[r - 1] {
            return false;
        }
        seen[r - 1] = true;
    }
    true
}

/// Optimizer selection for the trainer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    /// Plain gradient descent.
    PlainGd,
    /// Adaptive moment estimation with decoupled weight decay.
    AdamW,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimizerKind::PlainGd => f.write_str("plain-gd"),
            OptimizerKind::AdamW => f.write_str("adamw"),
        }
    }
}

/// Hyper-parameters shared by the data pipeline and the trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Candidates generated per instance.
    pub k: usize,
    /// Candidates retained after the funnel.
    pub m: usize,
    /// Bradley-Terry temperature.
    pub bt_temperature: f64,
    /// KL regularization strength.
    pub kl_beta: f64,
    /// Candidates below this acceptance get revision rounds.
    pub acceptance_threshold: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Decoupled weight decay coefficient (AdamW only).
    pub weight_decay: f64,
    /// Number of prompt-conditioning bias buckets in the policy.
    pub bias_buckets: usize,
    /// Temperature for the pairwise baseline loss.
    pub dpo_beta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_size: 16,
            epochs: 3,
            k: 5,
            m: 4,
            bt_temperature: 1.0,
            kl_beta: 0.1,
            acceptance_threshold: 0.6,
            seed: 42,
            optimizer: OptimizerKind::AdamW,
            weight_decay: 0.01,
            bias_buckets: 64,
            dpo_beta: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DomainError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(DomainError::BadConfig(
                "learning_rate must be finite and >= 0".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(DomainError::BadConfig("batch_size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(DomainError::BadConfig("epochs must be positive".into()));
        }
        if self.k < 2 {
            return Err(DomainError::BadConfig("k must be at least 2".into()));
        }
        if self.m < 2 || self.m > self.k {
            return Err(DomainError::BadConfig("m must satisfy 2 <= m <= k".into()));
        }
        if !(self.bt_temperature > 0.0) {
            return Err(DomainError::BadConfig(
                "bt_temperature must be positive".into(),
            ));
        }
        if !(self.kl_beta >= 0.0) {
            return Err(DomainError::BadConfig("kl_beta must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.acceptance_threshold) {
            return Err(DomainError::BadConfig(
                "acceptance_threshold must lie in [0, 1]".into(),
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(DomainError::BadConfig(
                "weight_decay must be non-negative".into(),
            ));
        }
        if self.bias_buckets == 0 {
            return Err(DomainError::BadConfig("bias_buckets must be positive".into()));
        }
        if !(self.dpo_beta > 0.0) {
            return Err(DomainError::BadConfig("dpo_beta must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DomainError {
    #[error("instance '{id}': prompt must be non-empty")]
    EmptyPrompt { id: String },
    #[error("instance '{id}': gold answer '{gold_answer}' is not an option label")]
    GoldAnswerNotAnOption { id: String, gold_answer: String },
    #[error("reasoning chain must have exactly 4 steps, found {found}")]
    WrongStepCount { found: usize },
    #[error("reasoning chain step {position} is empty")]
    EmptyStep { position: usize },
    #[error("group '{id}': needs at least 2 candidates, found {size}")]
    GroupTooSmall { id: String, size: usize },
    #[error("group '{id}': ranks {ranks:?} are not a permutation of 1..=K")]
    InvalidRanks { id: String, ranks: Vec<usize> },
    #[error("invalid config: {0}")]
    BadConfig(String),
}
