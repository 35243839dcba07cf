//! Ranked-preference optimization toolkit.
//!
//! Implements a complete preference-optimization pipeline for structured
//! reasoning chains: candidate generation and judging, probabilistic
//! refinement, groupwise Bradley-Terry ranking loss with linear reward
//! shaping and KL regularization, a small autoregressive policy for
//! scoring/sampling, and a synthetic benchmark for end-to-end verification.

pub mod datagen;
pub mod domain;
pub mod objective;
pub mod policy;
pub mod scoring;
pub mod trainer;
