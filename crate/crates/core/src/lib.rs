//! Conformal reliability certificates for black-box stochastic answer
//! generators.
//!
//! Sample an agent K times per query, canonicalize and rank the answers,
//! score each labeled calibration item by where its acceptable answer lands,
//! and turn the scores into a split-conformal threshold. The threshold gives
//! a prediction set size with a finite-sample coverage guarantee.

pub mod calibrate;
pub mod consensus;
pub mod error;
pub mod exec;
pub mod harness;
pub mod scores;
pub mod seed;
pub mod sequential;
pub mod stats;
pub mod synthetic;

pub use calibrate::{
    conformal_threshold, evaluate, prediction_set, prediction_set_adaptive, reliability_level,
    weighted_threshold, Calibration, Certificate, CoverageReport, LabeledConsensus,
};
pub use consensus::{aggregate, AcceptabilitySpec, CanonicalClass, Rank, RankedConsensus, RawSample};
pub use error::{Error, Result};
pub use exec::Execution;
pub use scores::{Score, ScoreKind, ScoreValue};
pub use stats::wilson_ci;
