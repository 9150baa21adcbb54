//! Per-word trace mode: run user sentences one at a time, emit surprisal,
//! the error signal, and their post-recoding counterparts at every step.
//! State carries within a sentence and resets between sentences. The
//! post-recoding surprisal is recomputed from the corrected state even in
//! surprisal mode; it is reported only and never feeds a loss.

use std::collections::BTreeSet;

use crate::checkpoint::Checkpoint;
use crate::error::Result;
use crate::harness::model_uses_ensemble;
use crate::model::cell::RnnState;
use crate::model::forward::{run_row, RunConfig, StepRecord};

#[derive(Debug, Clone)]
pub struct SentenceTrace {
    /// Whitespace-joined original sentence.
    pub sentence: String,
    /// One record per time step; `position` counts from 0 within the
    /// sentence, and the gold token at a step is the next word (the final
    /// step predicts the end-of-sentence marker).
    pub records: Vec<StepRecord>,
    /// Gold token strings aligned with `records`.
    pub gold_tokens: Vec<String>,
}

/// Trace each sentence under the checkpoint's recoder. `recode_at`
/// restricts recoding to the given step positions; `None` recodes at
/// every step (when the checkpoint has recoding enabled at all).
pub fn trace_sentences(
    ckpt: &Checkpoint,
    sentences: &[Vec<String>],
    recode_at: Option<&BTreeSet<usize>>,
) -> Result<Vec<SentenceTrace>> {
    let vocab = ckpt.vocabulary();
    let config = &ckpt.config;
    let uses_ensemble = model_uses_ensemble(config);

    let mut out = Vec::with_capacity(sentences.len());
    for (idx, sentence) in sentences.iter().enumerate() {
        let ids = vocab.encode(std::slice::from_ref(sentence));
        if ids.len() < 2 {
            continue;
        }
        let inputs = &ids[..ids.len() - 1];
        let targets = &ids[1..];

        let cfg = RunConfig {
            signal: &config.signal,
            recoding: config.recoding.enabled,
            score_with_ensemble: uses_ensemble,
            dropout: 0.0,
            train: false,
            trace: true,
            seed: config.seed,
            recode_steps: recode_at,
        };
        let state = RnnState::zeros(config.layers, config.hidden_size);
        let outcome = run_row(&ckpt.params, &cfg, idx as u64, 0, inputs, targets, state, 0)?;
        let records = outcome.records.expect("trace run collects records");
        let gold_tokens = records
            .iter()
            .map(|r| vocab.token(r.gold).to_string())
            .collect();
        out.push(SentenceTrace {
            sentence: sentence.join(" "),
            records,
            gold_tokens,
        });
    }
    Ok(out)
}
