//! Multi-layer LSTM language model: parameters, cell, decoding, loss and
//! the SGD/annealing training primitives. The unrolled forward/backward
//! passes live in `forward` and `backward`.

pub mod backward;
pub mod cell;
pub mod forward;
pub mod params;

pub use cell::{lstm_step, CellCache, RnnState};
pub use params::{Decoder, Dims, EnsembleDecoders, GateWeights, LayerWeights, LmParameters};

use crate::error::{Error, Result};
use crate::math::{safe_ln, softmax};

/// Decoder output at one step: raw logits and the normalized distribution.
#[derive(Debug, Clone)]
pub struct OutputDistribution {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

/// logits = W h + b, probs = softmax(logits).
pub fn decode(decoder: &Decoder, h: &[f64]) -> OutputDistribution {
    let mut logits = decoder.w.matvec(h);
    for (z, b) in logits.iter_mut().zip(&decoder.b) {
        *z += b;
    }
    let probs = softmax(&logits);
    OutputDistribution { logits, probs }
}

/// Ensemble predictive distribution: the mean of the member softmaxes.
/// The stored logits are the mean distribution's logs, so softmax of the
/// logits reproduces the probs.
pub fn decode_ensemble_mean(ensemble: &EnsembleDecoders, h: &[f64]) -> OutputDistribution {
    let k = ensemble.size() as f64;
    let vocab = ensemble.members[0].w.rows;
    let mut probs = vec![0.0; vocab];
    for member in &ensemble.members {
        let dist = decode(member, h);
        for (acc, p) in probs.iter_mut().zip(&dist.probs) {
            *acc += p / k;
        }
    }
    let logits = probs.iter().map(|&p| safe_ln(p)).collect();
    OutputDistribution { logits, probs }
}

/// Mean negative log likelihood of the targets: -(1/T) sum ln p[target].
/// Probabilities are floored at 1e-12 before the log.
pub fn cross_entropy(probs: &[Vec<f64>], targets: &[u32]) -> f64 {
    assert_eq!(probs.len(), targets.len(), "cross_entropy: length mismatch");
    if probs.is_empty() {
        return 0.0;
    }
    let total: f64 = probs
        .iter()
        .zip(targets)
        .map(|(p, &t)| -safe_ln(p[t as usize]))
        .sum();
    total / probs.len() as f64
}

/// Rescale gradients in place so their global L2 norm is at most `clip`.
/// Returns the pre-clip norm. Direction is preserved; a norm already below
/// the threshold is left untouched.
pub fn clip_gradients(grads: &mut LmParameters, clip: f64) -> Result<f64> {
    let mut sq = 0.0;
    for tensor in grads.trainable_tensors() {
        for &g in tensor {
            sq += g * g;
        }
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::Divergence("non-finite gradient norm".into()));
    }
    if norm > clip && norm > 0.0 {
        let scale = clip / norm;
        for tensor in grads.trainable_tensors_mut() {
            for g in tensor {
                *g *= scale;
            }
        }
    }
    Ok(norm)
}

/// Clipped SGD: rescale the gradients to `clip`, then theta -= lr * g.
pub fn sgd_step(
    params: &mut LmParameters,
    grads: &mut LmParameters,
    lr: f64,
    clip: f64,
) -> Result<f64> {
    if !(lr >= 0.0) {
        return Err(Error::Invalid("lr must be >= 0".into()));
    }
    let norm = clip_gradients(grads, clip)?;
    let mut param_slices = params.trainable_tensors_mut();
    let grad_slices = grads.trainable_tensors();
    debug_assert_eq!(param_slices.len(), grad_slices.len());
    for (p, g) in param_slices.iter_mut().zip(grad_slices) {
        for (pv, gv) in p.iter_mut().zip(g.iter()) {
            *pv -= lr * gv;
        }
    }
    if !params.all_finite() {
        return Err(Error::Divergence(
            "non-finite parameters after update".into(),
        ));
    }
    Ok(norm)
}

/// Halve the learning rate when the newest validation perplexity fails to
/// beat the best one seen before it; ties count as no improvement.
pub fn anneal_lr(history: &[f64], lr: f64) -> f64 {
    if history.len() < 2 {
        return lr;
    }
    let latest = history[history.len() - 1];
    let best_before = history[..history.len() - 1]
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if latest < best_before {
        lr
    } else {
        lr / 2.0
    }
}
