//! One-run black-box privacy auditing of (DP-)SGD.
//!
//! The crate trains small models with SGD or DP-SGD while recording a
//! replayable tape, plays canary guessing games on the final model, turns
//! the outcome into empirical ε lower bounds, and crafts canaries by
//! differentiating a loss-gap objective through the whole training run.

// validation is written as negated comparisons so that NaN is rejected
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod container;
pub mod epsilon;
pub mod error;
pub mod game;
pub mod harness;
pub mod metacanary;
pub mod model;
pub mod par;
pub mod rng;
pub mod scalar;
pub mod simulate;
pub mod tapefile;
pub mod trainer;

pub use epsilon::{Budget, EpsilonEstimate, Procedure, TradeoffCurve};
pub use error::{AuditError, Result};
pub use game::{GuessRecord, PairAssignment, Split};
pub use metacanary::{CanarySet, MetaConfig};
pub use model::{Activation, Dtype, Example, ModelSpec, ParamVector};
pub use trainer::{ClipNorm, DpSgdConfig, Sampling, SgdConfig, TrainingTape};
