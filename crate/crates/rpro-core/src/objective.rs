//! Loss components and their exact analytic gradients.
//!
//! The training objective combines three terms over a ranked candidate
//! group:
//!
//! ```text
//! rank   = (1 / C(K,2)) * sum_{i<j} ln(1 + exp(-(s_i - s_j) / tau))
//! linear = -(1/K) * sum_j a_j * s_j        a_j = (K - r_j) - (K-1)/2
//! kl     = beta * mean_j seq_kl_j
//! total  = rank + kl + linear
//! ```
//!
//! where `s_j` is the length-normalized log-probability of candidate `j`
//! under the policy and indices `i < j` run over candidates sorted best
//! rank first. Pairwise preference probabilities follow the Bradley-Terry
//! model `sigma((s_i - s_j) / tau)`.
//!
//! All logistic expressions are evaluated in overflow-safe form; gradients
//! are exact derivatives of the same expressions, verified against central
//! finite differences by the trainer's checker.
//!
//! The pairwise (best-vs-worst) and per-chain negative-log-likelihood
//! losses used by the comparison baselines live here too.

use crate::domain::{is_permutation_of_1_to_k, CandidateGroup, MedicalInstance, ReasoningChain, TrainConfig};
use crate::policy::{PolicyError, PolicyGrad, PolicyParams, ReferencePolicy, SequencePolicy};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ObjectiveError {
    #[error("Bradley-Terry temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("ranking loss needs at least 2 scores, got {0}")]
    TooFewScores(usize),
    #[error("ranks {0:?} are not a permutation of 1..=K")]
    NotAPermutation(Vec<usize>),
    #[error("length mismatch: {left} advantages vs {right} scores")]
    LengthMismatch { left: usize, right: usize },
    #[error("sequence KL values must be non-negative, got {0}")]
    NegativeKl(f64),
    #[error("KL weight must be non-negative, got {0}")]
    NegativeBeta(f64),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Overflow-safe logistic function.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Overflow-safe `ln(1 + exp(x))`.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Bradley-Terry probability that the candidate scoring `s_i` beats the one
/// scoring `s_j`: `sigma((s_i - s_j) / tau)`. Never NaN for finite inputs.
pub fn bt_prob(s_i: f64, s_j: f64, tau: f64) -> Result<f64, ObjectiveError> {
    if !(tau > 0.0) {
        return Err(ObjectiveError::BadTemperature(tau));
    }
    Ok(sigmoid((s_i - s_j) / tau))
}

/// Groupwise ranking loss over scores sorted best rank first
/// (`scores[0]` is rank 1). Average of `ln(1 + exp(-(s_i - s_j)/tau))` over
/// all pairs `i < j`.
pub fn ranking_loss(scores_by_rank: &[f64], tau: f64) -> Result<f64, ObjectiveError> {
    if !(tau > 0.0) {
        return Err(ObjectiveError::BadTemperature(tau));
    }
    let k = scores_by_rank.len();
    if k < 2 {
        return Err(ObjectiveError::TooFewScores(k));
    }
    let mut sum = 0.0;
    for i in 0..k {
        for j in (i + 1)..k {
            sum += softplus(-(scores_by_rank[i] - scores_by_rank[j]) / tau);
        }
    }
    Ok(sum / n_pairs(k))
}

fn n_pairs(k: usize) -> f64 {
    (k * (k - 1) / 2) as f64
}

/// Zero-sum linear advantages from ranks: `a_j = (K - r_j) - (K - 1)/2`.
/// `ranks[j]` is the rank of candidate `j`; the output is aligned with the
/// input. A single-candidate input degenerates to `[0]`.
pub fn linear_advantages(ranks: &[usize]) -> Result<Vec<f64>, ObjectiveError> {
    if !is_permutation_of_1_to_k(ranks) {
        return Err(ObjectiveError::NotAPermutation(ranks.to_vec()));
    }
    let k = ranks.len() as f64;
    let offset = (k - 1.0) / 2.0;
    Ok(ranks.iter().map(|&r| (k - r as f64) - offset).collect())
}

/// Linear reward-shaping loss `-(1/K) sum_j a_j s_j`.
pub fn linear_loss(advantages: &[f64], scores: &[f64]) -> Result<f64, ObjectiveError> {
    if advantages.len() != scores.len() {
        return Err(ObjectiveError::LengthMismatch {
            left: advantages.len(),
            right: scores.len(),
        });
    }
    let k = advantages.len() as f64;
    let dot: f64 = advantages
        .iter()
        .zip(scores.iter())
        .map(|(a, s)| a * s)
        .sum();
    Ok(-dot / k)
}

/// KL regularization term `beta * mean(seq_kls)`.
pub fn kl_loss(seq_kls: &[f64], beta: f64) -> Result<f64, ObjectiveError> {
    if !(beta >= 0.0) {
        return Err(ObjectiveError::NegativeBeta(beta));
    }
    if let Some(&bad) = seq_kls.iter().find(|v| !(**v >= 0.0)) {
        return Err(ObjectiveError::NegativeKl(bad));
    }
    if seq_kls.is_empty() {
        return Ok(0.0);
    }
    Ok(beta * seq_kls.iter().sum::<f64>() / seq_kls.len() as f64)
}

/// All loss components of one group evaluation. `total` is always the exact
/// floating-point sum `rank_loss + kl_loss + linear_loss`; `pairwise_diag`
/// is the best-vs-worst Bradley-Terry term, logged for loss curves but not
/// part of the objective.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub rank_loss: f64,
    pub linear_loss: f64,
    pub kl_loss: f64,
    pub pairwise_diag: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn from_components(rank_loss: f64, linear_loss: f64, kl_loss: f64, pairwise_diag: f64) -> Self {
        Self {
            rank_loss,
            linear_loss,
            kl_loss,
            pairwise_diag,
            total: rank_loss + kl_loss + linear_loss,
        }
    }
}

/// Everything [`total_loss`] needs from a group under the current policy.
struct GroupEval {
    scores: Vec<f64>,
    by_rank: Vec<usize>,
    advantages: Vec<f64>,
    seq_kls: Vec<f64>,
}

fn eval_group(
    params: &PolicyParams,
    reference: &ReferencePolicy,
    group: &CandidateGroup,
    config: &TrainConfig,
) -> Result<(GroupEval, LossBreakdown), ObjectiveError> {
    let scores: Vec<f64> = group
        .candidates
        .iter()
        .map(|c| params.preference_score(&group.instance, c))
        .collect::<Result<_, _>>()?;
    let by_rank = group.indices_by_rank();
    let sorted: Vec<f64> = by_rank.iter().map(|&j| scores[j]).collect();
    let rank = ranking_loss(&sorted, config.bt_temperature)?;
    let advantages = linear_advantages(&group.ranks)?;
    let linear = linear_loss(&advantages, &scores)?;
    let seq_kls: Vec<f64> = if config.kl_beta > 0.0 {
        group
            .candidates
            .iter()
            .map(|c| params.sequence_kl(reference, &group.instance, c))
            .collect::<Result<_, _>>()?
    } else {
        vec![0.0; group.len()]
    };
    let klv = kl_loss(&seq_kls, config.kl_beta)?;
    let pairwise = softplus(-(sorted[0] - sorted[sorted.len() - 1]) / config.bt_temperature);
    let breakdown = LossBreakdown::from_components(rank, linear, klv, pairwise);
    Ok((
        GroupEval {
            scores,
            by_rank,
            advantages,
            seq_kls,
        },
        breakdown,
    ))
}

/// Evaluate the full objective on one group. Preference scores are computed
/// from the current policy; ranks come from the group.
pub fn total_loss(
    params: &PolicyParams,
    reference: &ReferencePolicy,
    group: &CandidateGroup,
    config: &TrainConfig,
) -> Result<LossBreakdown, ObjectiveError> {
    eval_group(params, reference, group, config).map(|(_, b)| b)
}

/// Add `weight * d s / d theta` for a token sequence, where `s` is the mean
/// per-token log-probability. `p_rows` caches softmax rows per context.
fn accumulate_score_grad(
    params: &PolicyParams,
    bucket: usize,
    tokens: &[usize],
    weight: f64,
    p_rows: &mut [Option<Vec<f64>>],
    grad: &mut PolicyGrad,
) {
    if weight == 0.0 || tokens.is_empty() {
        return;
    }
    let v = params.vocab_size();
    let coeff = weight / tokens.len() as f64;
    let mut context = params.start_context();
    for &tok in tokens {
        let p = p_rows[context].get_or_insert_with(|| params.conditional_probs(bucket, context));
        for j in 0..v {
            let indicator = if j == tok { 1.0 } else { 0.0 };
            let g = coeff * (indicator - p[j]);
            grad.logits[(context, j)] += g;
            grad.prompt_bias[(bucket, j)] += g;
        }
        context = tok;
    }
}

/// Evaluate the objective and its exact gradient with respect to every
/// logit and prompt-bias entry. The reference policy is a constant.
pub fn grad_total(
    params: &PolicyParams,
    reference: &ReferencePolicy,
    group: &CandidateGroup,
    config: &TrainConfig,
) -> Result<(LossBreakdown, PolicyGrad), ObjectiveError> {
    let (eval, breakdown) = eval_group(params, reference, group, config)?;
    let k = group.len();
    let tau = config.bt_temperature;
    let bucket = params.bucket_for(&group.instance);

    // Gradient in score space: ranking pairs plus the linear term.
    let mut score_grads = vec![0.0_f64; k];
    let pairs = n_pairs(k);
    for a in 0..k {
        for b in (a + 1)..k {
            let ci = eval.by_rank[a];
            let cj = eval.by_rank[b];
            // d softplus(-(s_i - s_j)/tau) / d s_i = -sigma(arg)/tau
            let arg = -(eval.scores[ci] - eval.scores[cj]) / tau;
            let sig = sigmoid(arg);
            score_grads[ci] -= sig / (tau * pairs);
            score_grads[cj] += sig / (tau * pairs);
        }
    }
    for j in 0..k {
        score_grads[j] -= eval.advantages[j] / k as f64;
    }

    let mut grad = PolicyGrad::zeros_like(params);
    let mut p_rows: Vec<Option<Vec<f64>>> = vec![None; params.vocab_size() + 1];
    for (j, cand) in group.candidates.iter().enumerate() {
        accumulate_score_grad(
            params,
            bucket,
            &cand.tokens,
            score_grads[j],
            &mut p_rows,
            &mut grad,
        );
    }

    // KL term: for each visited context c,
    // d KL_c / d z_v = p(v) (log p(v) - log q(v) - KL_c),
    // applied with weight beta / (K * |c_j|) per position.
    if config.kl_beta > 0.0 {
        let v = params.vocab_size();
        let mut kl_vecs: Vec<Option<Vec<f64>>> = vec![None; v + 1];
        for cand in &group.candidates {
            if cand.tokens.is_empty() {
                continue;
            }
            let w = config.kl_beta / (k as f64 * cand.tokens.len() as f64);
            let mut context = params.start_context();
            for &tok in &cand.tokens {
                let vec_c = kl_vecs[context].get_or_insert_with(|| {
                    let lp = params.conditional_log_probs(bucket, context);
                    let lq = reference
                        .params()
                        .conditional_log_probs(bucket, context);
                    let kl_c: f64 = lp
                        .iter()
                        .zip(lq.iter())
                        .map(|(&a, &b)| a.exp() * (a - b))
                        .sum();
                    lp.iter()
                        .zip(lq.iter())
                        .map(|(&a, &b)| a.exp() * (a - b - kl_c))
                        .collect::<Vec<f64>>()
                });
                for j in 0..v {
                    grad.logits[(context, j)] += w * vec_c[j];
                    grad.prompt_bias[(bucket, j)] += w * vec_c[j];
                }
                context = tok;
            }
        }
    }

    Ok((breakdown, grad))
}

/// Pairwise preference loss between a winner and a loser chain:
/// `-ln sigma(beta * ((s_w - s_w_ref) - (s_l - s_l_ref)))`.
pub fn dpo_pair_loss(
    params: &PolicyParams,
    reference: &ReferencePolicy,
    winner: &ReasoningChain,
    loser: &ReasoningChain,
    prompt: &MedicalInstance,
    beta: f64,
) -> Result<f64, ObjectiveError> {
    dpo_gap(params, reference, winner, loser, prompt, beta).map(|x| softplus(-x))
}

fn dpo_gap(
    params: &PolicyParams,
    reference: &ReferencePolicy,
    winner: &ReasoningChain,
    loser: &ReasoningChain,
    prompt: &MedicalInstance,
    beta: f64,
) -> Result<f64, ObjectiveError> {
    if !(beta > 0.0) {
        return Err(ObjectiveError::BadTemperature(beta));
    }
    let s_w = params.preference_score(prompt, winner)?;
    let s_l = params.preference_score(prompt, loser)?;
    let s_w_ref = reference.params().preference_score(prompt, winner)?;
    let s_l_ref = reference.params().preference_score(prompt, loser)?;
    Ok(beta * ((s_w - s_w_ref) - (s_l - s_l_ref)))
}

/// Pairwise preference loss plus its gradient.
pub fn dpo_pair_grad(
    params: &PolicyParams,
    reference: &ReferencePolicy,
    winner: &ReasoningChain,
    loser: &ReasoningChain,
    prompt: &MedicalInstance,
    beta: f64,
) -> Result<(f64, PolicyGrad), ObjectiveError> {
    let x = dpo_gap(params, reference, winner, loser, prompt, beta)?;
    let loss = softplus(-x);
    // d/dx [-ln sigma(x)] = sigma(x) - 1
    let dx = sigmoid(x) - 1.0;
    let bucket = params.bucket_for(prompt);
    let mut grad = PolicyGrad::zeros_like(params);
    let mut p_rows: Vec<Option<Vec<f64>>> = vec![None; params.vocab_size() + 1];
    accumulate_score_grad(params, bucket, &winner.tokens, dx * beta, &mut p_rows, &mut grad);
    accumulate_score_grad(params, bucket, &loser.tokens, -dx * beta, &mut p_rows, &mut grad);
    Ok((loss, grad))
}

/// Supervised fine-tuning loss: negative mean token log-probability of the
/// best chain, i.e. `-preference_score`.
pub fn sft_loss(
    params: &PolicyParams,
    best: &ReasoningChain,
    prompt: &MedicalInstance,
) -> Result<f64, ObjectiveError> {
    Ok(-params.preference_score(prompt, best)?)
}

/// Supervised fine-tuning loss plus its gradient.
pub fn sft_grad(
    params: &PolicyParams,
    best: &ReasoningChain,
    prompt: &MedicalInstance,
) -> Result<(f64, PolicyGrad), ObjectiveError> {
    let loss = sft_loss(params, best, prompt)?;
    let bucket = params.bucket_for(prompt);
    let mut grad = PolicyGrad::zeros_like(params);
    let mut p_rows: Vec<Option<Vec<f64>>> = vec![None; params.vocab_size() + 1];
    accumulate_score_grad(params, bucket, &best.tokens, -1.0, &mut p_rows, &mut grad);
    Ok((loss, grad))
}
