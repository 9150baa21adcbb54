//! Training loop, perplexity evaluation, per-word tracing and ablation
//! modes behind the command-line interface.

pub mod ablate;
pub mod eval;
pub mod trace;
pub mod train;

pub use ablate::{ablate, AblateMode};
pub use eval::{evaluate_params, EvalReport};
pub use trace::trace_sentences;
pub use train::{train, TrainOutcome};

use crate::config::{SignalKind, TrainConfig};

/// A model decodes through its ensemble mean exactly when it was trained
/// with the ensemble-entropy recoder; its decoder heads are the ensemble.
pub fn model_uses_ensemble(config: &TrainConfig) -> bool {
    config.recoding.enabled && config.signal.kind == SignalKind::Bae
}
