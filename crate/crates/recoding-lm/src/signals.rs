//! Error signals driving the recoder, with closed-form top-layer
//! gradients.
//!
//! Three signals: gold-token surprisal o^(-o) - 1, predictive entropy
//! estimated with K dropout-masked decoder passes, and predictive entropy
//! of an anchored decoder ensemble. Natural logarithms throughout. The K
//! mask/member evaluations are independent; each draws its own RNG
//! sub-stream from the step seed, so parallel and sequential evaluation
//! produce the same (delta, gradient) pair.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math::{safe_ln, softmax, Mat};
use crate::model::params::{Decoder, EnsembleDecoders};
use crate::parallel;
use crate::rng;

/// A signal evaluation: the scalar error, its gradient w.r.t. the
/// top-layer hidden state, and the distribution(s) it was computed from.
#[derive(Debug, Clone)]
pub struct SignalOutput {
    pub delta: f64,
    pub top_grad: Vec<f64>,
    pub aux_probs: Vec<Vec<f64>>,
}

/// Shannon entropy in nats with the 0 ln 0 := 0 convention.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .map(|&p| if p > 0.0 { p * safe_ln(p) } else { 0.0 })
        .sum::<f64>()
}

/// Gold-token surprisal signal: delta = p^(-p) - 1 where p is the gold
/// probability. Zero at p = 1, zero in the limit p -> 0, maximal at
/// p = 1/e. The gradient follows the closed form through the softmax
/// Jacobian and the decoder weights.
pub fn surprisal_signal(probs: &[f64], gold: u32, decoder_w: &Mat) -> SignalOutput {
    let p = probs[gold as usize].max(crate::math::PROB_EPS);
    let ln_p = p.ln();
    let p_pow = (-p * ln_p).exp(); // p^(-p)
    let delta = p_pow - 1.0;

    // d delta / d p = -(ln p + 1) p^(-p); softmax row collapses to
    // p * (e_gold - probs); together: scale * (W[gold,:] - probsᵀ W).
    let scale = -(ln_p + 1.0) * p_pow * p;
    let w_mean = decoder_w.matvec_transpose(probs);
    let gold_row = decoder_w.row(gold as usize);
    let top_grad: Vec<f64> = gold_row
        .iter()
        .zip(&w_mean)
        .map(|(wg, wm)| scale * (wg - wm))
        .collect();

    SignalOutput {
        delta,
        top_grad,
        aux_probs: vec![probs.to_vec()],
    }
}

/// Entropy and gradient shared by both predictive-entropy signals.
/// `member_probs[k]` comes from decoder weights `weight_of(k)`.
fn entropy_signal_from_members(
    member_probs: Vec<Vec<f64>>,
    grad_of: impl Fn(usize, &[f64]) -> Vec<f64> + Sync + Send,
    sequential: bool,
) -> SignalOutput {
    let k = member_probs.len();
    let vocab = member_probs[0].len();
    let mut mean = vec![0.0; vocab];
    for probs in &member_probs {
        for (m, p) in mean.iter_mut().zip(probs) {
            *m += p / k as f64;
        }
    }
    let delta = entropy(&mean);

    // u = ln(mean) + 1; per member the softmax Jacobian gives
    // r_j = -o_j (u_j - u.o); gradient = (1/K) sum_k W_kᵀ r^(k).
    let u: Vec<f64> = mean.iter().map(|&p| safe_ln(p) + 1.0).collect();
    let member_grad = |i: usize| {
        let probs = &member_probs[i];
        let s: f64 = u.iter().zip(probs).map(|(a, b)| a * b).sum();
        let r: Vec<f64> = probs
            .iter()
            .zip(&u)
            .map(|(&o, &uj)| -o * (uj - s))
            .collect();
        grad_of(i, &r)
    };
    let per_member: Vec<Vec<f64>> = if sequential {
        parallel::map_range_seq(k, member_grad)
    } else {
        parallel::map_range(k, member_grad)
    };
    let n = per_member[0].len();
    let mut top_grad = vec![0.0; n];
    for g in &per_member {
        for (acc, v) in top_grad.iter_mut().zip(g) {
            *acc += v / k as f64;
        }
    }

    SignalOutput {
        delta,
        top_grad,
        aux_probs: member_probs,
    }
}

/// Logits under a fresh dropout mask; mask bits are drawn row-major with
/// keep probability 1-p, no inverted scaling. The same RNG stream replayed
/// from the same seed reproduces the same mask.
fn masked_logits(decoder: &Decoder, h: &[f64], keep: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let vocab = decoder.w.rows;
    let mut logits = Vec::with_capacity(vocab);
    for j in 0..vocab {
        let row = decoder.w.row(j);
        let mut z = decoder.b[j];
        for (w, x) in row.iter().zip(h) {
            if rng.gen_bool(keep) {
                z += w * x;
            }
        }
        logits.push(z);
    }
    logits
}

/// (W mask)ᵀ r with the mask replayed from the same stream as
/// `masked_logits`.
fn masked_grad(decoder: &Decoder, r: &[f64], keep: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; decoder.w.cols];
    for j in 0..decoder.w.rows {
        let rj = r[j];
        let row = decoder.w.row(j);
        for (acc, w) in out.iter_mut().zip(row) {
            if rng.gen_bool(keep) {
                *acc += rj * w;
            }
        }
    }
    out
}

/// Predictive-entropy signal estimated with K dropout-masked decoder
/// passes. `step_seed` pins the K mask sub-streams.
pub fn mcd_signal(
    h_top: &[f64],
    decoder: &Decoder,
    k: usize,
    drop_rate: f64,
    step_seed: u64,
) -> Result<SignalOutput> {
    if k == 0 {
        return Err(Error::Invalid("mcd signal needs k >= 1".into()));
    }
    if !(0.0..1.0).contains(&drop_rate) {
        return Err(Error::Invalid("dropout rate must lie in [0, 1)".into()));
    }
    let keep = 1.0 - drop_rate;

    let member_probs: Vec<Vec<f64>> = parallel::map_range(k, |i| {
        let mut rng = rng::substream(step_seed, &[i as u64]);
        softmax(&masked_logits(decoder, h_top, keep, &mut rng))
    });
    Ok(entropy_signal_from_members(
        member_probs,
        |i, r| {
            let mut rng = rng::substream(step_seed, &[i as u64]);
            masked_grad(decoder, r, keep, &mut rng)
        },
        false,
    ))
}

/// Sequential reference for the dropout-entropy signal; used by the bench
/// suite and the parallel-equality tests.
pub fn mcd_signal_seq(
    h_top: &[f64],
    decoder: &Decoder,
    k: usize,
    drop_rate: f64,
    step_seed: u64,
) -> Result<SignalOutput> {
    if k == 0 {
        return Err(Error::Invalid("mcd signal needs k >= 1".into()));
    }
    if !(0.0..1.0).contains(&drop_rate) {
        return Err(Error::Invalid("dropout rate must lie in [0, 1)".into()));
    }
    let keep = 1.0 - drop_rate;
    let member_probs: Vec<Vec<f64>> = parallel::map_range_seq(k, |i| {
        let mut rng = rng::substream(step_seed, &[i as u64]);
        softmax(&masked_logits(decoder, h_top, keep, &mut rng))
    });
    Ok(entropy_signal_from_members(
        member_probs,
        |i, r| {
            let mut rng = rng::substream(step_seed, &[i as u64]);
            masked_grad(decoder, r, keep, &mut rng)
        },
        true,
    ))
}

/// Predictive-entropy signal over the anchored decoder ensemble.
pub fn bae_signal(h_top: &[f64], ensemble: &EnsembleDecoders) -> SignalOutput {
    let member_probs: Vec<Vec<f64>> = parallel::map_range(ensemble.size(), |i| {
        let member = &ensemble.members[i];
        let mut logits = member.w.matvec(h_top);
        for (z, b) in logits.iter_mut().zip(&member.b) {
            *z += b;
        }
        softmax(&logits)
    });
    entropy_signal_from_members(
        member_probs,
        |i, r| ensemble.members[i].w.matvec_transpose(r),
        false,
    )
}

/// Sequential reference for the ensemble signal; bench/equality twin of
/// `bae_signal`.
pub fn bae_signal_seq(h_top: &[f64], ensemble: &EnsembleDecoders) -> SignalOutput {
    let member_probs: Vec<Vec<f64>> = parallel::map_range_seq(ensemble.size(), |i| {
        let member = &ensemble.members[i];
        let mut logits = member.w.matvec(h_top);
        for (z, b) in logits.iter_mut().zip(&member.b) {
            *z += b;
        }
        softmax(&logits)
    });
    entropy_signal_from_members(
        member_probs,
        |i, r| ensemble.members[i].w.matvec_transpose(r),
        true,
    )
}

/// Per-member anchored weight-decay loss
/// (1/n_tokens) * ||sqrt(weight_decay) (W_k - anchor_k)||_F.
/// Only the weight matrices are anchored.
pub fn anchor_loss(ensemble: &EnsembleDecoders, n_tokens: usize) -> Result<Vec<f64>> {
    if n_tokens == 0 {
        return Err(Error::Invalid("anchor loss needs n_tokens >= 1".into()));
    }
    let gamma_sqrt = ensemble.weight_decay.sqrt();
    Ok(ensemble
        .members
        .iter()
        .zip(&ensemble.anchors)
        .map(|(member, anchor)| {
            let sq: f64 = member
                .w
                .data
                .iter()
                .zip(&anchor.data)
                .map(|(w, a)| (w - a) * (w - a))
                .sum();
            gamma_sqrt * sq.sqrt() / n_tokens as f64
        })
        .collect())
}

/// Amortized ensemble training loss: (1/K) sum_k (ce_k + anchor_k).
pub fn amortized_total_loss(ce_losses: &[f64], anchor_losses: &[f64]) -> Result<f64> {
    if ce_losses.len() != anchor_losses.len() || ce_losses.is_empty() {
        return Err(Error::Invalid("loss term length mismatch".into()));
    }
    let k = ce_losses.len() as f64;
    Ok(ce_losses
        .iter()
        .zip(anchor_losses)
        .map(|(c, a)| c + a)
        .sum::<f64>()
        / k)
}
