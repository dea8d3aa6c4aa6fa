//! Multi-task peer-prediction mechanisms.
//!
//! Payments for information tasks with no ground truth: agents are scored
//! on agreement with a peer on shared "bonus" tasks, minus a penalty term
//! built from disjoint tasks that cancels base-rate agreement. This crate
//! implements the mechanism family end to end:
//!
//! - [`signal_model`] — joint signal distributions, the Delta matrix
//!   (joint minus product of marginals), its sign structure, and world
//!   classification (categorical / clustered / paired permutations).
//! - [`scoring`] — score matrices (agreement-only MSDG, correlated
//!   agreement, custom kernels), the per-batch payment rule, and analytic
//!   expected scores in three cross-checked forms.
//! - [`strategy_analysis`] — brute-force verification of strict
//!   properness, strong truthfulness, and informed truthfulness over all
//!   deterministic strategy profiles, best responses, an LP search for
//!   strictly separating score matrices, and the unintended-signal bound.
//! - [`detail_free`] — the detail-free variant that learns the sign
//!   structure from one half of the tasks to score the other half, with
//!   convergence experiments.
//! - [`simulation`] — synthetic worlds, randomized task assignment, and
//!   Monte-Carlo reconciliation against the analytic scores.
//! - [`ingestion`] — peer-assessment CSV loading and per-question Delta
//!   estimation.
//!
//! Signals and reports are 0-based `usize` indices in memory; CSV and
//! JSON interfaces number them 1..=n.

pub mod detail_free;
pub mod error;
pub mod ingestion;
pub mod matrix;
pub mod scoring;
pub mod seed;
pub mod signal_model;
pub mod simulation;
pub mod strategy_analysis;

pub use error::{Error, Result};
pub use matrix::SquareMatrix;
pub use scoring::{
    assemble_batch, ca_score, expected_score, expected_score_det, expected_score_trace,
    msdg_score, pay_batch, DeterministicStrategy, MixedStrategy, PaymentRecord, PenaltyMode,
    ScoreMatrix, TaskBatch, TaskId,
};
pub use signal_model::{
    classify, delta_of, model_from_json, model_to_json, sign_of, sign_of_matrix, DeltaMatrix,
    JointSignalModel, SignStructure, WorldClassification,
};
pub use strategy_analysis::{
    best_response, enumerate_profiles, enumerate_strategies, strong_truthful_score_exists,
    unintended_signal_bound, verify, FeasibilityResult, TruthfulnessVerdict,
};
