//! LSTM language model with per-time-step gradient correction of its
//! hidden activations ("recoding"), driven by gold-token surprisal or
//! approximate predictive-entropy error signals, plus the oracles that
//! validate the analytic recoding gradients and the error-reduction
//! bounds at desk scale.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod harness;
pub mod math;
pub mod model;
pub(crate) mod parallel;
pub mod recoder;
pub mod rng;
pub mod signals;
pub mod verifier;

pub use error::{Error, Result};
