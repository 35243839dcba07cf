//! Multi-dimensional quality assessment, probabilistic acceptance, and
//! candidate selection.
//!
//! Judges report coverage and factual accuracy on a 0-5 scale and redundancy
//! either already normalized in [0, 1] or on the same 0-5 scale. Raw scores
//! are mapped to probabilities, combined by the multiplicative acceptance
//! `p_cov * p_fact * (1 - p_red)`, and the top candidates by acceptance are
//! funneled into a ranked group.

use serde::{Deserialize, Serialize};

use crate::domain::{CandidateGroup, DomainError, MedicalInstance, ReasoningChain};

/// The three judged quality dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreDimension {
    Coverage,
    Factuality,
    Redundancy,
}

/// Raw judge scores for one chain together with their normalized
/// probabilities and the combined acceptance probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityScores {
    /// Raw coverage score in [0, 5].
    pub s_cov: f64,
    /// Raw factual-accuracy score in [0, 5].
    pub s_fact: f64,
    /// Raw redundancy as reported by the judge; either a probability in
    /// [0, 1] or a 0-5 scale value.
    pub s_red_raw: f64,
    pub p_cov: f64,
    pub p_fact: f64,
    pub p_red: f64,
    /// `p_cov * p_fact * (1 - p_red)`, exactly as computed.
    pub acceptance: f64,
}

impl QualityScores {
    /// Normalize raw judge scores and compute the acceptance probability.
    pub fn from_raw(s_cov: f64, s_fact: f64, s_red_raw: f64) -> Result<Self, ScoringError> {
        let p_cov = normalize_score(s_cov, ScoreDimension::Coverage)?;
        let p_fact = normalize_score(s_fact, ScoreDimension::Factuality)?;
        let p_red = normalize_score(s_red_raw, ScoreDimension::Redundancy)?;
        Ok(Self {
            s_cov,
            s_fact,
            s_red_raw,
            p_cov,
            p_fact,
            p_red,
            acceptance: acceptance_probability(p_cov, p_fact, p_red),
        })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScoringError {
    #[error("raw {dimension:?} score must be non-negative, got {raw}")]
    NegativeRawScore { dimension: ScoreDimension, raw: f64 },
    #[error("cannot select top {k} from {available} candidates")]
    NotEnoughCandidates { k: usize, available: usize },
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// Map a raw judge score to a probability.
///
/// Coverage and factuality live on a 0-5 scale and map linearly with
/// clamping. Redundancy is reported on two scales in the wild: values
/// already in [0, 1] pass through unchanged, larger values are treated as
/// 0-5 scale.
pub fn normalize_score(raw: f64, dimension: ScoreDimension) -> Result<f64, ScoringError> {
    if !(raw >= 0.0) {
        return Err(ScoringError::NegativeRawScore { dimension, raw });
    }
    let p = match dimension {
        ScoreDimension::Coverage | ScoreDimension::Factuality => (raw / 5.0).clamp(0.0, 1.0),
        ScoreDimension::Redundancy => {
            if raw <= 1.0 {
                raw
            } else {
                (raw / 5.0).clamp(0.0, 1.0)
            }
        }
    };
    Ok(p)
}

/// Multiplicative acceptance: `p_cov * p_fact * (1 - p_red)`.
pub fn acceptance_probability(p_cov: f64, p_fact: f64, p_red: f64) -> f64 {
    p_cov * p_fact * (1.0 - p_red)
}

/// Indices of the `k` highest-acceptance candidates, sorted by descending
/// acceptance with ties broken by lower original index.
pub fn select_top_k_indices(acceptances: &[f64], k: usize) -> Result<Vec<usize>, ScoringError> {
    if k > acceptances.len() {
        return Err(ScoringError::NotEnoughCandidates {
            k,
            available: acceptances.len(),
        });
    }
    let mut idx: Vec<usize> = (0..acceptances.len()).collect();
    // Stable sort by descending acceptance preserves index order on ties.
    idx.sort_by(|&a, &b| {
        acceptances[b]
            .partial_cmp(&acceptances[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    idx.truncate(k);
    Ok(idx)
}

/// Assign ranks 1..=N to an already-sorted selection (position 0 gets
/// rank 1).
pub fn assign_ranks<T>(selected: &[T]) -> Vec<usize> {
    (1..=selected.len()).collect()
}

/// A candidate dropped by the funnel, kept for auditing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscardedCandidate {
    /// Index in the original candidate list.
    pub original_index: usize,
    pub chain: ReasoningChain,
    pub scores: QualityScores,
}

/// Result of funneling K scored candidates down to the top M.
#[derive(Debug, Clone, PartialEq)]
pub struct FunnelOutcome {
    /// Retained candidates as a ranked group (rank 1 = highest acceptance).
    pub group: CandidateGroup,
    /// Quality scores aligned with the group's candidates (rank order).
    pub scores: Vec<QualityScores>,
    /// Dropped candidates, highest acceptance first.
    pub discarded: Vec<DiscardedCandidate>,
}

/// Select the top `m` candidates by acceptance, assign ranks 1..=m, and
/// keep what was dropped for audit.
pub fn funnel(
    instance: &MedicalInstance,
    scored: Vec<(ReasoningChain, QualityScores)>,
    m: usize,
) -> Result<FunnelOutcome, ScoringError> {
    let acceptances: Vec<f64> = scored.iter().map(|(_, q)| q.acceptance).collect();
    let selected = select_top_k_indices(&acceptances, m)?;
    let retained: std::collections::HashSet<usize> = selected.iter().copied().collect();

    let mut candidates = Vec::with_capacity(m);
    let mut scores = Vec::with_capacity(m);
    for &i in &selected {
        candidates.push(scored[i].0.clone());
        scores.push(scored[i].1.clone());
    }
    let ranks = assign_ranks(&candidates);
    let group = CandidateGroup::new(instance.clone(), candidates, ranks)?;

    let mut discarded: Vec<DiscardedCandidate> = scored
        .into_iter()
        .enumerate()
        .filter(|(i, _)| !retained.contains(i))
        .map(|(i, (chain, scores))| DiscardedCandidate {
            original_index: i,
            chain,
            scores,
        })
        .collect();
    discarded.sort_by(|a, b| {
        b.scores
            .acceptance
            .partial_cmp(&a.scores.acceptance)
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    Ok(FunnelOutcome {
        group,
        scores,
        discarded,
    })
}
