//! Ablation modes: evaluate a recoding-trained model with its recoder
//! stripped, or a baseline-trained model with a recoder grafted on at
//! test time only.

use crate::checkpoint::Checkpoint;
use crate::config::SignalKind;
use crate::corpus::{batchify, Vocabulary};
use crate::error::{Error, Result};
use crate::harness::eval::{evaluate_params, EvalOptions};
use crate::harness::model_uses_ensemble;
use crate::model::params::EnsembleDecoders;
use crate::recoder::StepSizeParams;

use super::eval::EvalReport;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AblateMode {
    /// Disable the recoder of a recoding-trained model.
    Strip,
    /// Attach a fixed-step recoder to a model at evaluation time.
    Graft { signal: SignalKind, alpha: f64 },
}

pub fn ablate(
    ckpt: &Checkpoint,
    mode: AblateMode,
    corpus_lines: &[Vec<String>],
    batch_size: usize,
    seq_len: usize,
) -> Result<EvalReport> {
    let vocab: Vocabulary = ckpt.vocabulary();
    let ids = vocab.encode(corpus_lines);
    let batched = batchify(&ids, batch_size, seq_len)?;
    let uses_ensemble = model_uses_ensemble(&ckpt.config);

    match mode {
        AblateMode::Strip => {
            let opts = EvalOptions {
                config: &ckpt.config,
                recoding: false,
                score_with_ensemble: uses_ensemble,
                seed: ckpt.config.seed,
            };
            evaluate_params(&ckpt.params, &opts, &batched)
        }
        AblateMode::Graft { signal, alpha } => {
            if alpha < 0.0 {
                return Err(Error::Invalid("graft alpha must be >= 0".into()));
            }
            let mut params = ckpt.params.clone();
            let mut config = ckpt.config.clone();
            config.signal.kind = signal;
            config.recoding.enabled = true;
            config.recoding.alpha = alpha;
            // Grafting always uses a fixed step; learned/predicted steps
            // would need training.
            params.step_sizes = StepSizeParams::Fixed {
                alphas: vec![[alpha; 2]; params.dims.layers],
            };

            let mut notes = Vec::new();
            if signal == SignalKind::Bae && params.ensemble.is_none() {
                params.ensemble = Some(EnsembleDecoders::init(
                    params.dims.vocab,
                    params.dims.hidden,
                    config.signal.k,
                    config.signal.prior_scale,
                    config.signal.weight_decay,
                    config.signal.single_anchor,
                    config.seed,
                ));
                notes.push(
                    "grafted ensemble initialized fresh from config (checkpoint had none)"
                        .to_string(),
                );
            }

            let opts = EvalOptions {
                config: &config,
                recoding: true,
                // The grafted model keeps its own decode path; the recoder
                // only corrects states.
                score_with_ensemble: uses_ensemble,
                seed: config.seed,
            };
            let mut report = evaluate_params(&params, &opts, &batched)?;
            report.notes.extend(notes);
            Ok(report)
        }
    }
}
