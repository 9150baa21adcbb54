//! The training loop: clipped SGD over batched chunks with recoding per
//! config, per-epoch validation, learning-rate halving on non-improvement
//! and best-validation checkpointing.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::corpus::{batchify, Vocabulary};
use crate::error::{Error, Result};
use crate::harness::eval::{evaluate_params, EvalOptions};
use crate::harness::model_uses_ensemble;
use crate::model::backward::{anchor_gradients, backward_chunk};
use crate::model::cell::RnnState;
use crate::model::forward::{run_chunk, RunConfig};
use crate::model::params::{Dims, EnsembleDecoders, LmParameters};
use crate::model::{anneal_lr, sgd_step};
use crate::recoder::StepSizeParams;
use crate::signals::{amortized_total_loss, anchor_loss};

#[derive(Debug)]
pub struct TrainOutcome {
    pub best_val_ppl: f64,
    pub best_epoch: usize,
    pub final_lr: f64,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
}

/// Build a fresh model for the config and vocabulary.
pub fn init_model(config: &TrainConfig, vocab_size: usize) -> LmParameters {
    let dims = Dims {
        vocab: vocab_size,
        emb: config.emb_size,
        hidden: config.hidden_size,
        layers: config.layers,
    };
    let steps = StepSizeParams::from_config(
        &config.recoding,
        config.layers,
        config.hidden_size,
        config.seed,
    );
    let mut params = LmParameters::init(dims, steps, config.seed);
    if model_uses_ensemble(config) {
        params.ensemble = Some(EnsembleDecoders::init(
            vocab_size,
            config.hidden_size,
            config.signal.k,
            config.signal.prior_scale,
            config.signal.weight_decay,
            config.signal.single_anchor,
            config.seed,
        ));
    }
    params
}

pub fn train(
    config: &TrainConfig,
    train_lines: &[Vec<String>],
    valid_lines: &[Vec<String>],
    out_path: &Path,
    metrics_path: Option<&Path>,
    mut log: impl FnMut(&str),
) -> Result<TrainOutcome> {
    config.validate()?;
    let vocab = Vocabulary::build(train_lines, config.min_count)?;
    let train_ids = vocab.encode(train_lines);
    let valid_ids = vocab.encode(valid_lines);
    let train_batched = batchify(&train_ids, config.batch_size, config.seq_len)?;
    let valid_batched = batchify(&valid_ids, 1, config.seq_len)?;

    let mut params = init_model(config, vocab.len());
    let uses_ensemble = model_uses_ensemble(config);

    let metrics_path: PathBuf = metrics_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out_path.with_extension("metrics.csv"));
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    writeln!(metrics, "epoch,batch,loss,mean_delta,mean_alpha,lr")?;

    let mut lr = config.lr;
    let mut val_history: Vec<f64> = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;

    for epoch in 0..config.epochs {
        let mut states: Vec<RnnState> = (0..config.batch_size)
            .map(|_| RnnState::zeros(config.layers, config.hidden_size))
            .collect();

        for (batch_idx, chunk) in train_batched.chunks.iter().enumerate() {
            let run_cfg = RunConfig {
                signal: &config.signal,
                recoding: config.recoding.enabled,
                score_with_ensemble: uses_ensemble,
                dropout: config.dropout,
                train: true,
                trace: false,
                seed: config.seed,
                recode_steps: None,
            };
            let chunk_tag = (epoch as u64) << 32 | batch_idx as u64;
            let outcome = run_chunk(
                &params,
                &run_cfg,
                chunk_tag,
                chunk,
                config.batch_size,
                config.seq_len,
                states,
            )?;
            states = outcome.states;

            let n_tokens = outcome.tokens;
            let loss = match (&outcome.member_losses, &params.ensemble) {
                (Some(member_ce), Some(ensemble)) => {
                    let anchors = anchor_loss(ensemble, n_tokens)?;
                    amortized_total_loss(member_ce, &anchors)?
                }
                _ => outcome.loss,
            };
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss at epoch {epoch} batch {batch_idx}"
                )));
            }

            let caches = outcome.row_caches.expect("training run collects caches");
            let mut grads = backward_chunk(
                &params,
                &caches,
                config.seq_len,
                run_cfg.loss_from_recoded(),
            )?;
            if uses_ensemble {
                anchor_gradients(&params, &mut grads, n_tokens);
            }
            sgd_step(&mut params, &mut grads, lr, config.clip)?;

            writeln!(
                metrics,
                "{},{},{:.6},{:.6},{:.6},{}",
                epoch, batch_idx, loss, outcome.mean_delta, outcome.mean_alpha, lr
            )?;
        }

        let report = evaluate_params(
            &params,
            &EvalOptions {
                config,
                recoding: config.recoding.enabled,
                score_with_ensemble: uses_ensemble,
                seed: config.seed,
            },
            &valid_batched,
        )?;
        val_history.push(report.perplexity);
        log(&format!(
            "epoch {} done: valid ppl {:.4} (lr {})",
            epoch, report.perplexity, lr
        ));

        if report.perplexity < best_val {
            best_val = report.perplexity;
            best_epoch = epoch;
            Checkpoint::new(config.clone(), &vocab, params.clone()).save(out_path)?;
        }
        lr = anneal_lr(&val_history, lr);
    }
    metrics.flush()?;

    Ok(TrainOutcome {
        best_val_ppl: best_val,
        best_epoch,
        final_lr: lr,
        checkpoint_path: out_path.to_path_buf(),
        metrics_path,
    })
}
