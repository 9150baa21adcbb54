//! Unrolled forward pass over one batched chunk, with the per-step
//! recoding hook between time steps.
//!
//! Per step and row: embed the token, stack the LSTM layers, decode the
//! top hidden state, evaluate the error signal, recode every layer's
//! hidden/cell activations, and carry the recoded state into the next
//! step. Loss wiring differs by signal: the gold-token surprisal signal
//! keeps the pre-recoding distribution for the loss (recomputing it would
//! leak the target), while the entropy signals re-decode the corrected
//! state.

use std::collections::BTreeSet;

use rand::Rng;

use crate::config::{SignalConfig, SignalKind};
use crate::corpus::Chunk;
use crate::error::{Error, Result};
use crate::math::safe_ln;
use crate::model::cell::{lstm_step, CellCache, RnnState};
use crate::model::params::LmParameters;
use crate::model::{decode, decode_ensemble_mean, OutputDistribution};
use crate::recoder::{apply_recoding, signal_gradients, PredictorCache, RecodingGradients};
use crate::rng::{self, stream};
use crate::signals::{bae_signal, mcd_signal, surprisal_signal, SignalOutput};

/// How one run decodes, recodes and wires its losses.
#[derive(Debug, Clone)]
pub struct RunConfig<'a> {
    pub signal: &'a SignalConfig,
    /// Recoder on/off.
    pub recoding: bool,
    /// Score/loss path decodes through the ensemble mean instead of the
    /// base decoder (models trained with the ensemble signal).
    pub score_with_ensemble: bool,
    /// Decoder-input dropout rate; only applied when `train`.
    pub dropout: f64,
    /// Collect BPTT caches and apply dropout.
    pub train: bool,
    /// Collect per-step trace records.
    pub trace: bool,
    pub seed: u64,
    /// Steps (absolute position = offset + t) at which recoding runs.
    /// `None` means every step.
    pub recode_steps: Option<&'a BTreeSet<usize>>,
}

impl RunConfig<'_> {
    /// Entropy signals re-decode the corrected state for the loss; the
    /// surprisal signal must not.
    pub fn loss_from_recoded(&self) -> bool {
        self.recoding && matches!(self.signal.kind, SignalKind::Mcd | SignalKind::Bae)
    }

    fn recode_here(&self, position: usize) -> bool {
        self.recoding
            && match self.recode_steps {
                None => true,
                Some(set) => set.contains(&position),
            }
    }
}

/// Per-step trace quantities (base-2 surprisal as in the trace CSV).
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub position: usize,
    pub gold: u32,
    pub surprisal_bits: f64,
    pub delta: f64,
    pub post_surprisal_bits: f64,
    pub post_delta: f64,
    pub recoded: bool,
    /// Training-loss NLL of this step (nats); only meaningful when `train`.
    pub loss_nll: f64,
}

/// Loss-path distribution(s) kept for the backward pass.
#[derive(Debug, Clone)]
pub enum LossProbs {
    /// Base decoder probs.
    Single(Vec<f64>),
    /// Per-ensemble-member probs.
    Members(Vec<Vec<f64>>),
}

#[derive(Debug, Clone)]
pub struct RecodeCacheEntry {
    pub grads: RecodingGradients,
    pub alphas: Vec<[f64; 2]>,
    pub predictor_caches: Option<Vec<[PredictorCache; 2]>>,
    pub recoded: RnnState,
}

#[derive(Debug, Clone)]
pub struct StepCacheEntry {
    pub cells: Vec<CellCache>,
    pub recode: Option<RecodeCacheEntry>,
    pub loss_probs: LossProbs,
    pub token: u32,
    pub target: u32,
}

#[derive(Debug, Clone)]
pub struct RowCache {
    pub steps: Vec<StepCacheEntry>,
    /// Multiplicative decoder-input dropout mask (entries 0 or 1/keep),
    /// drawn once per chunk and row.
    pub dropout_mask: Option<Vec<f64>>,
}

#[derive(Debug)]
pub struct RowOutcome {
    pub state: RnnState,
    /// Sum over steps of -ln p(target) on the scoring path.
    pub nll_ln_sum: f64,
    /// Sum over steps of the training-loss NLL (mean over members for the
    /// ensemble signal).
    pub loss_nll_sum: f64,
    /// Per-member NLL sums (ensemble loss only).
    pub member_nll_sums: Option<Vec<f64>>,
    pub delta_sum: f64,
    pub alpha_sum: f64,
    pub alpha_count: usize,
    pub steps_run: usize,
    pub records: Option<Vec<StepRecord>>,
    pub cache: Option<RowCache>,
}

fn embed(params: &LmParameters, id: u32) -> Result<Vec<f64>> {
    if id as usize >= params.dims.vocab {
        return Err(Error::Invalid(format!(
            "token id {id} out of range for vocabulary of {}",
            params.dims.vocab
        )));
    }
    Ok(params.embeddings.row(id as usize).to_vec())
}

/// Score-path decode: base decoder or ensemble mean.
fn score_decode(
    params: &LmParameters,
    use_ensemble: bool,
    h: &[f64],
) -> Result<OutputDistribution> {
    if use_ensemble {
        let ensemble = params
            .ensemble
            .as_ref()
            .ok_or_else(|| Error::Invalid("model has no decoder ensemble".into()))?;
        Ok(decode_ensemble_mean(ensemble, h))
    } else {
        Ok(decode(&params.decoder, h))
    }
}

fn signal_at(
    params: &LmParameters,
    cfg: &RunConfig,
    h_top: &[f64],
    gold: u32,
    step_seed: u64,
) -> Result<SignalOutput> {
    match cfg.signal.kind {
        SignalKind::Surprisal => {
            let dist = decode(&params.decoder, h_top);
            Ok(surprisal_signal(&dist.probs, gold, &params.decoder.w))
        }
        SignalKind::Mcd => mcd_signal(
            h_top,
            &params.decoder,
            cfg.signal.k,
            cfg.signal.mc_dropout,
            step_seed,
        ),
        SignalKind::Bae => {
            let ensemble = params.ensemble.as_ref().ok_or_else(|| {
                Error::Invalid("ensemble signal requires ensemble decoders".into())
            })?;
            Ok(bae_signal(h_top, ensemble))
        }
    }
}

fn apply_mask(h: &[f64], mask: Option<&Vec<f64>>) -> Vec<f64> {
    match mask {
        Some(m) => h.iter().zip(m).map(|(x, s)| x * s).collect(),
        None => h.to_vec(),
    }
}

/// Run one batch row for `inputs.len()` steps starting from `state`.
///
/// `chunk_tag` and `row` key the deterministic RNG sub-streams, so the
/// outcome does not depend on which order rows are processed in.
pub fn run_row(
    params: &LmParameters,
    cfg: &RunConfig,
    chunk_tag: u64,
    row: usize,
    inputs: &[u32],
    targets: &[u32],
    mut state: RnnState,
    step_offset: usize,
) -> Result<RowOutcome> {
    debug_assert_eq!(inputs.len(), targets.len());
    let hidden = params.dims.hidden;
    let loss_from_recoded = cfg.loss_from_recoded();

    // Decoder-input dropout: one mask per (chunk, row), train only.
    let dropout_mask: Option<Vec<f64>> = if cfg.train && cfg.dropout > 0.0 {
        let keep = 1.0 - cfg.dropout;
        let mut r = rng::substream(cfg.seed, &[stream::DROPOUT, chunk_tag, row as u64]);
        Some(
            (0..hidden)
                .map(|_| if r.gen_bool(keep) { 1.0 / keep } else { 0.0 })
                .collect(),
        )
    } else {
        None
    };

    let mut nll_ln_sum = 0.0;
    let mut loss_nll_sum = 0.0;
    let mut member_nll_sums: Option<Vec<f64>> = None;
    let mut delta_sum = 0.0;
    let mut alpha_sum = 0.0;
    let mut alpha_count = 0usize;
    let mut records: Option<Vec<StepRecord>> = cfg.trace.then(Vec::new);
    let mut cache: Option<RowCache> = cfg.train.then(|| RowCache {
        steps: Vec::with_capacity(inputs.len()),
        dropout_mask: dropout_mask.clone(),
    });

    for (t, (&token, &gold)) in inputs.iter().zip(targets).enumerate() {
        let position = step_offset + t;
        let x = embed(params, token)?;
        if gold as usize >= params.dims.vocab {
            return Err(Error::Invalid(format!(
                "target id {gold} out of range for vocabulary of {}",
                params.dims.vocab
            )));
        }

        // Layer stack; every layer consumes the recoded state of step t-1.
        let mut cells: Vec<CellCache> = Vec::with_capacity(params.dims.layers);
        let mut layer_input = x;
        for (l, weights) in params.layers.iter().enumerate() {
            let (h_prev, c_prev) = &state.layers[l];
            let cell = lstm_step(weights, &layer_input, h_prev, c_prev);
            layer_input = cell.h.clone();
            cells.push(cell);
        }
        let h_top = &cells[params.dims.layers - 1].h;
        let pre_state = RnnState {
            layers: cells.iter().map(|c| (c.h.clone(), c.c.clone())).collect(),
        };

        // The signal is only evaluated when something consumes it: the
        // recoder or the trace records.
        let step_seed =
            rng::derive_seed(cfg.seed, &[stream::SIGNAL, chunk_tag, row as u64, t as u64]);
        let signal = if cfg.recoding || cfg.trace {
            let s = signal_at(params, cfg, h_top, gold, step_seed)?;
            delta_sum += s.delta;
            Some(s)
        } else {
            None
        };

        // Recoding between steps.
        let recoded_here = cfg.recode_here(position);
        let (next_state, recode_entry) = if recoded_here {
            let signal = signal.as_ref().expect("recoding evaluates the signal");
            let grads = signal_gradients(&params.layers, &cells, &signal.top_grad)?;
            let applied = apply_recoding(&pre_state, &grads, &params.step_sizes)?;
            for pair in &applied.alphas {
                alpha_sum += pair[0] + pair[1];
                alpha_count += 2;
            }
            let entry = RecodeCacheEntry {
                grads,
                alphas: applied.alphas,
                predictor_caches: applied.predictor_caches,
                recoded: applied.state.clone(),
            };
            (applied.state, Some(entry))
        } else {
            (pre_state.clone(), None)
        };

        // Scoring distributions. Pre-recode always exists; the post-recode
        // one equals it exactly when this step was not recoded.
        let needs_pre = !loss_from_recoded || cfg.trace;
        let pre_dist = if needs_pre {
            Some(score_decode(params, cfg.score_with_ensemble, h_top)?)
        } else {
            None
        };
        let h_top_recoded = &next_state.layers[params.dims.layers - 1].0;
        let post_dist = if recoded_here {
            Some(score_decode(
                params,
                cfg.score_with_ensemble,
                h_top_recoded,
            )?)
        } else {
            None
        };

        let score_p = if loss_from_recoded {
            match (&post_dist, &pre_dist) {
                (Some(d), _) => d.probs[gold as usize],
                (None, Some(d)) => d.probs[gold as usize],
                (None, None) => {
                    score_decode(params, cfg.score_with_ensemble, h_top)?.probs[gold as usize]
                }
            }
        } else {
            pre_dist.as_ref().expect("pre-recode distribution").probs[gold as usize]
        };
        nll_ln_sum += -safe_ln(score_p);

        // Training-loss path, decoded from the dropout-masked input.
        let loss_h = if loss_from_recoded {
            h_top_recoded
        } else {
            h_top
        };
        let mut step_loss_nll = 0.0;
        let loss_probs = if cfg.train {
            let dropped = apply_mask(loss_h, dropout_mask.as_ref());
            if cfg.score_with_ensemble {
                let ensemble = params.ensemble.as_ref().ok_or_else(|| {
                    Error::Invalid("ensemble loss requires ensemble decoders".into())
                })?;
                let sums = member_nll_sums.get_or_insert_with(|| vec![0.0; ensemble.size()]);
                let mut members = Vec::with_capacity(ensemble.size());
                let mut mean_nll = 0.0;
                for (k, member) in ensemble.members.iter().enumerate() {
                    let dist = decode(member, &dropped);
                    let nll = -safe_ln(dist.probs[gold as usize]);
                    sums[k] += nll;
                    mean_nll += nll / ensemble.size() as f64;
                    members.push(dist.probs);
                }
                step_loss_nll = mean_nll;
                loss_nll_sum += mean_nll;
                LossProbs::Members(members)
            } else {
                let dist = decode(&params.decoder, &dropped);
                step_loss_nll = -safe_ln(dist.probs[gold as usize]);
                loss_nll_sum += step_loss_nll;
                LossProbs::Single(dist.probs)
            }
        } else {
            LossProbs::Single(Vec::new())
        };

        if let Some(records) = records.as_mut() {
            let delta = signal.as_ref().map(|s| s.delta).unwrap_or(0.0);
            let pre = pre_dist
                .as_ref()
                .expect("trace keeps the pre-recode distribution");
            let pre_bits = -safe_ln(pre.probs[gold as usize]) / std::f64::consts::LN_2;
            let (post_bits, post_delta) = if recoded_here {
                let post = post_dist
                    .as_ref()
                    .expect("recoded step keeps its re-decode");
                let bits = -safe_ln(post.probs[gold as usize]) / std::f64::consts::LN_2;
                // Re-evaluate the signal on the corrected state with the
                // step's masks/members frozen (same sub-stream).
                let post_signal = signal_at(params, cfg, h_top_recoded, gold, step_seed)?;
                (bits, post_signal.delta)
            } else {
                (pre_bits, delta)
            };
            records.push(StepRecord {
                position,
                gold,
                surprisal_bits: pre_bits,
                delta,
                post_surprisal_bits: post_bits,
                post_delta,
                recoded: recoded_here,
                loss_nll: step_loss_nll,
            });
        }

        if let Some(cache) = cache.as_mut() {
            cache.steps.push(StepCacheEntry {
                cells,
                recode: recode_entry,
                loss_probs,
                token,
                target: gold,
            });
        }

        state = next_state;
    }

    Ok(RowOutcome {
        state,
        nll_ln_sum,
        loss_nll_sum,
        member_nll_sums,
        delta_sum,
        alpha_sum,
        alpha_count,
        steps_run: inputs.len(),
        records,
        cache,
    })
}

#[derive(Debug)]
pub struct ChunkOutcome {
    pub states: Vec<RnnState>,
    /// Mean training-loss NLL per scored token (nats); for the ensemble
    /// loss this is already the per-member mean. Anchor terms are added by
    /// the caller.
    pub loss: f64,
    /// Per-member mean NLL (ensemble loss only).
    pub member_losses: Option<Vec<f64>>,
    /// Sum of -ln p(target) on the scoring path.
    pub nll_ln_sum: f64,
    pub tokens: usize,
    pub mean_delta: f64,
    pub mean_alpha: f64,
    pub row_records: Option<Vec<Vec<StepRecord>>>,
    pub row_caches: Option<Vec<RowCache>>,
}

/// Run every row of a chunk. Rows are independent given their states and
/// their RNG sub-streams, so evaluation runs them in parallel when the
/// `parallel` feature is on; results are merged in row order either way.
pub fn run_chunk(
    params: &LmParameters,
    cfg: &RunConfig,
    chunk_tag: u64,
    chunk: &Chunk,
    batch_size: usize,
    seq_len: usize,
    states: Vec<RnnState>,
) -> Result<ChunkOutcome> {
    debug_assert_eq!(states.len(), batch_size);

    let run_one = |(row, state): (usize, RnnState)| -> Result<RowOutcome> {
        let inputs = &chunk.input[row * seq_len..(row + 1) * seq_len];
        let targets = &chunk.target[row * seq_len..(row + 1) * seq_len];
        run_row(params, cfg, chunk_tag, row, inputs, targets, state, 0)
    };

    // Training stays sequential (single-threaded contract); evaluation may
    // fan rows out.
    let outcomes: Vec<RowOutcome> = if cfg.train {
        states
            .into_iter()
            .enumerate()
            .map(run_one)
            .collect::<Result<_>>()?
    } else {
        crate::parallel::ordered_try_map(states.into_iter().enumerate().collect(), &run_one)?
    };

    let tokens = batch_size * seq_len;
    let mut loss_sum = 0.0;
    let mut nll_ln_sum = 0.0;
    let mut delta_sum = 0.0;
    let mut alpha_sum = 0.0;
    let mut alpha_count = 0usize;
    let mut member_losses: Option<Vec<f64>> = None;
    let mut states = Vec::with_capacity(batch_size);
    let mut row_records = cfg.trace.then(Vec::new);
    let mut row_caches = cfg.train.then(Vec::new);

    for outcome in outcomes {
        loss_sum += outcome.loss_nll_sum;
        nll_ln_sum += outcome.nll_ln_sum;
        delta_sum += outcome.delta_sum;
        alpha_sum += outcome.alpha_sum;
        alpha_count += outcome.alpha_count;
        if let Some(sums) = outcome.member_nll_sums {
            let acc = member_losses.get_or_insert_with(|| vec![0.0; sums.len()]);
            for (a, s) in acc.iter_mut().zip(&sums) {
                *a += s;
            }
        }
        states.push(outcome.state);
        if let (Some(rr), Some(r)) = (row_records.as_mut(), outcome.records) {
            rr.push(r);
        }
        if let (Some(rc), Some(c)) = (row_caches.as_mut(), outcome.cache) {
            rc.push(c);
        }
    }

    Ok(ChunkOutcome {
        states,
        loss: loss_sum / tokens as f64,
        member_losses: member_losses.map(|v| v.iter().map(|s| s / tokens as f64).collect()),
        nll_ln_sum,
        tokens,
        mean_delta: delta_sum / tokens as f64,
        mean_alpha: if alpha_count > 0 {
            alpha_sum / alpha_count as f64
        } else {
            0.0
        },
        row_records,
        row_caches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{RecodingConfig, SignalConfig, StepKind};
    use crate::model::params::{Dims, EnsembleDecoders, LmParameters};
    use crate::recoder::StepSizeParams;
    use rand::Rng;

    fn toy(layers: usize, alpha: f64, seed: u64) -> LmParameters {
        LmParameters::init(
            Dims {
                vocab: 11,
                emb: 5,
                hidden: 7,
                layers,
            },
            StepSizeParams::Fixed {
                alphas: vec![[alpha; 2]; layers],
            },
            seed,
        )
    }

    fn ids(n: usize, seed: u64) -> Vec<u32> {
        let mut rng = crate::rng::substream(seed, &[1234]);
        (0..n).map(|_| rng.gen_range(0..11u32)).collect()
    }

    fn eval_cfg(signal: &SignalConfig, recoding: bool) -> RunConfig<'_> {
        RunConfig {
            signal,
            recoding,
            score_with_ensemble: false,
            dropout: 0.0,
            train: false,
            trace: true,
            seed: 5,
            recode_steps: None,
        }
    }

    #[test]
    fn carrying_state_across_chunks_equals_one_long_pass() {
        let params = toy(2, 0.0, 2);
        let signal = SignalConfig::default();
        let cfg = eval_cfg(&signal, false);
        let stream = ids(13, 3);
        let inputs = &stream[..12];
        let targets = &stream[1..13];

        // one long pass
        let long = run_row(
            &params,
            &cfg,
            0,
            0,
            inputs,
            targets,
            RnnState::zeros(2, 7),
            0,
        )
        .unwrap();

        // two chunks of 6 with the state carried
        let first = run_row(
            &params,
            &cfg,
            0,
            0,
            &inputs[..6],
            &targets[..6],
            RnnState::zeros(2, 7),
            0,
        )
        .unwrap();
        let second = run_row(
            &params,
            &cfg,
            1,
            0,
            &inputs[6..],
            &targets[6..],
            first.state,
            6,
        )
        .unwrap();

        let long_recs = long.records.unwrap();
        let mut split_recs = first.records.unwrap();
        split_recs.extend(second.records.unwrap());
        assert_eq!(long_recs.len(), split_recs.len());
        for (a, b) in long_recs.iter().zip(&split_recs) {
            assert!((a.surprisal_bits - b.surprisal_bits).abs() < 1e-12);
        }
        for (la, lb) in long.state.layers.iter().zip(&second.state.layers) {
            assert_eq!(la, lb);
        }
    }

    #[test]
    fn zero_embeddings_make_outputs_input_invariant() {
        let mut params = toy(1, 0.0, 4);
        for v in &mut params.embeddings.data {
            *v = 0.0;
        }
        let signal = SignalConfig::default();
        let cfg = eval_cfg(&signal, false);
        let targets = ids(6, 9);
        let a = run_row(
            &params,
            &cfg,
            0,
            0,
            &[1, 2, 3, 4, 5, 6],
            &targets,
            RnnState::zeros(1, 7),
            0,
        )
        .unwrap();
        let b = run_row(
            &params,
            &cfg,
            0,
            0,
            &[9, 8, 7, 6, 5, 4],
            &targets,
            RnnState::zeros(1, 7),
            0,
        )
        .unwrap();
        assert_eq!(a.nll_ln_sum.to_bits(), b.nll_ln_sum.to_bits());
    }

    #[test]
    fn zero_alpha_recoding_is_bit_identical_to_disabled() {
        for kind in [SignalKind::Surprisal, SignalKind::Mcd] {
            let params = toy(2, 0.0, 6);
            let signal = SignalConfig {
                kind,
                k: 4,
                ..SignalConfig::default()
            };
            let stream = ids(9, 13);
            let on = run_row(
                &params,
                &eval_cfg(&signal, true),
                0,
                0,
                &stream[..8],
                &stream[1..],
                RnnState::zeros(2, 7),
                0,
            )
            .unwrap();
            let off = run_row(
                &params,
                &eval_cfg(&signal, false),
                0,
                0,
                &stream[..8],
                &stream[1..],
                RnnState::zeros(2, 7),
                0,
            )
            .unwrap();
            assert_eq!(on.nll_ln_sum.to_bits(), off.nll_ln_sum.to_bits());
            assert_eq!(on.state, off.state);
            // post fields equal pre fields bit-for-bit at alpha = 0
            for r in on.records.unwrap() {
                assert_eq!(r.surprisal_bits.to_bits(), r.post_surprisal_bits.to_bits());
            }
        }
    }

    /// Surprisal wiring computes the training loss from the pre-recoding
    /// distribution: the first step's loss cannot depend on alpha. The
    /// entropy wirings re-decode the corrected state, so it must.
    #[test]
    fn loss_wiring_asymmetry_between_signal_kinds() {
        let first_step_loss = |kind: SignalKind, alpha: f64| -> f64 {
            let mut params = toy(2, alpha, 8);
            if kind == SignalKind::Bae {
                params.ensemble = Some(EnsembleDecoders::init(11, 7, 3, 0.29, 4.82e-5, true, 7));
            }
            let signal = SignalConfig {
                kind,
                k: 3,
                ..SignalConfig::default()
            };
            let cfg = RunConfig {
                signal: &signal,
                recoding: true,
                score_with_ensemble: kind == SignalKind::Bae,
                dropout: 0.0,
                train: true,
                trace: true,
                seed: 11,
                recode_steps: None,
            };
            let stream = ids(5, 21);
            let out = run_row(
                &params,
                &cfg,
                0,
                0,
                &stream[..4],
                &stream[1..],
                RnnState::zeros(2, 7),
                0,
            )
            .unwrap();
            out.records.unwrap()[0].loss_nll
        };

        for kind in [SignalKind::Surprisal, SignalKind::Mcd, SignalKind::Bae] {
            let at_zero = first_step_loss(kind, 0.0);
            let at_half = first_step_loss(kind, 0.5);
            match kind {
                SignalKind::Surprisal => assert_eq!(
                    at_zero.to_bits(),
                    at_half.to_bits(),
                    "surprisal first-step loss must ignore alpha"
                ),
                _ => assert!(
                    (at_zero - at_half).abs() > 1e-9,
                    "entropy first-step loss must move with alpha"
                ),
            }
        }
    }

    #[test]
    fn chunk_rows_match_individual_row_runs() {
        let params = toy(2, 0.001, 12);
        let signal = SignalConfig {
            kind: SignalKind::Mcd,
            k: 3,
            ..SignalConfig::default()
        };
        let cfg = RunConfig {
            signal: &signal,
            recoding: true,
            score_with_ensemble: false,
            dropout: 0.0,
            train: false,
            trace: false,
            seed: 31,
            recode_steps: None,
        };
        let (b, t) = (3, 5);
        let stream = ids(b * t * 2, 17);
        let chunk = Chunk {
            input: stream[..b * t].to_vec(),
            target: stream[b * t..].to_vec(),
        };
        let states: Vec<RnnState> = (0..b).map(|_| RnnState::zeros(2, 7)).collect();
        let chunked = run_chunk(&params, &cfg, 7, &chunk, b, t, states.clone()).unwrap();

        let mut manual_nll = 0.0;
        for row in 0..b {
            let out = run_row(
                &params,
                &cfg,
                7,
                row,
                &chunk.input[row * t..(row + 1) * t],
                &chunk.target[row * t..(row + 1) * t],
                states[row].clone(),
                0,
            )
            .unwrap();
            manual_nll += out.nll_ln_sum;
            assert_eq!(out.state, chunked.states[row]);
        }
        assert_eq!(manual_nll.to_bits(), chunked.nll_ln_sum.to_bits());
    }

    #[test]
    fn out_of_range_ids_are_rejected() {
        let params = toy(1, 0.0, 2);
        let signal = SignalConfig::default();
        let cfg = eval_cfg(&signal, false);
        let err = run_row(&params, &cfg, 0, 0, &[99], &[0], RnnState::zeros(1, 7), 0).unwrap_err();
        assert!(err.to_string().contains("out of range"));
    }

    #[test]
    fn learned_and_predicted_steps_recode_with_positive_alpha() {
        for step_kind in [StepKind::Learned, StepKind::Predicted] {
            let rec = RecodingConfig {
                enabled: true,
                step_kind,
                alpha: 0.01,
                alpha_overrides: vec![],
            };
            let steps = StepSizeParams::from_config(&rec, 2, 7, 3);
            let params = LmParameters::init(
                Dims {
                    vocab: 11,
                    emb: 5,
                    hidden: 7,
                    layers: 2,
                },
                steps,
                3,
            );
            let signal = SignalConfig::default();
            let cfg = eval_cfg(&signal, true);
            let stream = ids(6, 23);
            let out = run_row(
                &params,
                &cfg,
                0,
                0,
                &stream[..5],
                &stream[1..],
                RnnState::zeros(2, 7),
                0,
            )
            .unwrap();
            assert!(out.alpha_count > 0);
            assert!(out.alpha_sum > 0.0, "softplus keeps steps positive");
        }
    }
}
