//! Backpropagation through time over one chunk, truncated at the chunk
//! boundary. The recoding gradient is treated as a constant vector in the
//! training graph: h' = h - alpha * g backpropagates as the identity plus
//! the alpha path, and no second-order terms flow through g itself. That
//! keeps the learned/predicted step-size parameters trainable without
//! differentiating through the signal computation.

use crate::error::Result;
use crate::math::{dot, sigmoid, softplus_deriv};
use crate::model::forward::{LossProbs, RowCache};
use crate::model::params::LmParameters;
use crate::recoder::{StepSizeParams, KIND_CELL, KIND_HIDDEN};

/// Accumulate parameter gradients of the chunk training loss into a
/// zeroed parameter-shaped container. `loss_from_recoded` must match the
/// forward run that produced the caches.
pub fn backward_chunk(
    params: &LmParameters,
    caches: &[RowCache],
    seq_len: usize,
    loss_from_recoded: bool,
) -> Result<LmParameters> {
    let mut grads = params.zeros_like();
    let batch_size = caches.len();
    let token_coef = 1.0 / (batch_size * seq_len) as f64;

    for row_cache in caches {
        backward_row(params, row_cache, token_coef, loss_from_recoded, &mut grads)?;
    }
    Ok(grads)
}

fn backward_row(
    params: &LmParameters,
    cache: &RowCache,
    token_coef: f64,
    loss_from_recoded: bool,
    grads: &mut LmParameters,
) -> Result<()> {
    let hidden = params.dims.hidden;
    let num_layers = params.dims.layers;
    let top = num_layers - 1;
    let mask = cache.dropout_mask.as_ref();

    // Gradients w.r.t. the post-recode state flowing in from step t+1.
    let mut d_h_next = vec![vec![0.0; hidden]; num_layers];
    let mut d_c_next = vec![vec![0.0; hidden]; num_layers];

    for entry in cache.steps.iter().rev() {
        // ---- loss decode backward -------------------------------------
        // The loss read softmax(W (m . h_loss) + b) where m is the dropout
        // mask and h_loss is the pre- or post-recode top hidden state.
        let h_loss: &[f64] = if loss_from_recoded {
            match &entry.recode {
                Some(r) => &r.recoded.layers[top].0,
                None => &entry.cells[top].h,
            }
        } else {
            &entry.cells[top].h
        };
        let dropped: Vec<f64> = match mask {
            Some(m) => h_loss.iter().zip(m).map(|(x, s)| x * s).collect(),
            None => h_loss.to_vec(),
        };

        let mut d_h_loss = vec![0.0; hidden];
        match &entry.loss_probs {
            LossProbs::Single(probs) => {
                let decoder = &params.decoder;
                let gd = &mut grads.decoder;
                let mut d_logits = vec![0.0; probs.len()];
                for (j, &p) in probs.iter().enumerate() {
                    let indicator = if j == entry.target as usize { 1.0 } else { 0.0 };
                    d_logits[j] = (p - indicator) * token_coef;
                }
                gd.w.add_outer(&d_logits, &dropped, 1.0);
                for (g, d) in gd.b.iter_mut().zip(&d_logits) {
                    *g += d;
                }
                let back = decoder.w.matvec_transpose(&d_logits);
                for (acc, v) in d_h_loss.iter_mut().zip(back) {
                    *acc += v;
                }
            }
            LossProbs::Members(member_probs) => {
                let ensemble = params
                    .ensemble
                    .as_ref()
                    .expect("ensemble loss without ensemble");
                let ge = grads.ensemble.as_mut().expect("gradient ensemble missing");
                let k = member_probs.len() as f64;
                for ((probs, member), gm) in member_probs
                    .iter()
                    .zip(&ensemble.members)
                    .zip(&mut ge.members)
                {
                    let mut d_logits = vec![0.0; probs.len()];
                    for (j, &p) in probs.iter().enumerate() {
                        let indicator = if j == entry.target as usize { 1.0 } else { 0.0 };
                        d_logits[j] = (p - indicator) * token_coef / k;
                    }
                    gm.w.add_outer(&d_logits, &dropped, 1.0);
                    for (g, d) in gm.b.iter_mut().zip(&d_logits) {
                        *g += d;
                    }
                    let back = member.w.matvec_transpose(&d_logits);
                    for (acc, v) in d_h_loss.iter_mut().zip(back) {
                        *acc += v;
                    }
                }
            }
        }
        if let Some(m) = mask {
            for (d, s) in d_h_loss.iter_mut().zip(m) {
                *d *= s;
            }
        }

        // ---- recode backward (gradient treated as a constant) ----------
        let mut d_h = d_h_next;
        let d_c = d_c_next;
        if loss_from_recoded {
            for (acc, v) in d_h[top].iter_mut().zip(&d_h_loss) {
                *acc += v;
            }
        }
        if let Some(rec) = &entry.recode {
            // h' = h - alpha_h g_h and c' = c - alpha_c g_c: identity into
            // (h, c) plus d(alpha) = -<d_h', g>.
            match (&params.step_sizes, &mut grads.step_sizes) {
                (StepSizeParams::Fixed { .. }, _) => {}
                (StepSizeParams::Learned { raws }, StepSizeParams::Learned { raws: raw_grads }) => {
                    for l in 0..num_layers {
                        let d_alpha_h = -dot(&d_h[l], &rec.grads.layers[l].0);
                        let d_alpha_c = -dot(&d_c[l], &rec.grads.layers[l].1);
                        raw_grads[l][KIND_HIDDEN] +=
                            d_alpha_h * softplus_deriv(raws[l][KIND_HIDDEN]);
                        raw_grads[l][KIND_CELL] += d_alpha_c * softplus_deriv(raws[l][KIND_CELL]);
                    }
                }
                (
                    StepSizeParams::Predicted { nets },
                    StepSizeParams::Predicted { nets: net_grads },
                ) => {
                    let caches = rec
                        .predictor_caches
                        .as_ref()
                        .expect("predicted step sizes require predictor caches");
                    for l in 0..num_layers {
                        let d_alpha_h = -dot(&d_h[l], &rec.grads.layers[l].0);
                        let d_alpha_c = -dot(&d_c[l], &rec.grads.layers[l].1);
                        let pc = &caches[l];
                        nets[l][KIND_HIDDEN].backward(
                            &pc[KIND_HIDDEN],
                            d_alpha_h * sigmoid(pc[KIND_HIDDEN].z3),
                            &mut net_grads[l][KIND_HIDDEN],
                        );
                        nets[l][KIND_CELL].backward(
                            &pc[KIND_CELL],
                            d_alpha_c * sigmoid(pc[KIND_CELL].z3),
                            &mut net_grads[l][KIND_CELL],
                        );
                    }
                }
                _ => unreachable!("parameter/gradient step-size kinds diverged"),
            }
        }
        if !loss_from_recoded {
            for (acc, v) in d_h[top].iter_mut().zip(&d_h_loss) {
                *acc += v;
            }
        }

        // ---- cell backward, top layer down ------------------------------
        d_h_next = vec![vec![0.0; hidden]; num_layers];
        d_c_next = vec![vec![0.0; hidden]; num_layers];
        for l in (0..num_layers).rev() {
            let cell = &entry.cells[l];
            let weights = &params.layers[l];
            let gw = &mut grads.layers[l];

            let dh_total = &d_h[l];
            let mut dc_total = vec![0.0; hidden];
            for i in 0..hidden {
                dc_total[i] = d_c[l][i]
                    + dh_total[i] * cell.output[i] * (1.0 - cell.tanh_c[i] * cell.tanh_c[i]);
            }

            let mut d_forget_pre = vec![0.0; hidden];
            let mut d_input_pre = vec![0.0; hidden];
            let mut d_output_pre = vec![0.0; hidden];
            let mut d_cand_pre = vec![0.0; hidden];
            for i in 0..hidden {
                d_output_pre[i] =
                    dh_total[i] * cell.tanh_c[i] * cell.output[i] * (1.0 - cell.output[i]);
                d_forget_pre[i] =
                    dc_total[i] * cell.c_prev[i] * cell.forget[i] * (1.0 - cell.forget[i]);
                d_input_pre[i] =
                    dc_total[i] * cell.candidate[i] * cell.input[i] * (1.0 - cell.input[i]);
                d_cand_pre[i] =
                    dc_total[i] * cell.input[i] * (1.0 - cell.candidate[i] * cell.candidate[i]);
            }

            let gate_pairs = [
                (&weights.forget, &mut gw.forget, &d_forget_pre),
                (&weights.input, &mut gw.input, &d_input_pre),
                (&weights.output, &mut gw.output, &d_output_pre),
                (&weights.cell, &mut gw.cell, &d_cand_pre),
            ];

            let mut d_h_prev = vec![0.0; hidden];
            let mut d_x = vec![0.0; cell.x.len()];
            for (w, g, d_pre) in gate_pairs {
                g.w_h.add_outer(d_pre, &cell.h_prev, 1.0);
                g.w_x.add_outer(d_pre, &cell.x, 1.0);
                for (gb, d) in g.b.iter_mut().zip(d_pre.iter()) {
                    *gb += d;
                }
                for (acc, v) in d_h_prev.iter_mut().zip(w.w_h.matvec_transpose(d_pre)) {
                    *acc += v;
                }
                for (acc, v) in d_x.iter_mut().zip(w.w_x.matvec_transpose(d_pre)) {
                    *acc += v;
                }
            }

            // carry to step t-1 (h_prev there is the post-recode state)
            d_h_next[l] = d_h_prev;
            for i in 0..hidden {
                d_c_next[l][i] = dc_total[i] * cell.forget[i];
            }

            if l > 0 {
                for (acc, v) in d_h[l - 1].iter_mut().zip(&d_x) {
                    *acc += v;
                }
            } else {
                let row = grads.embeddings.row_mut(entry.token as usize);
                for (acc, v) in row.iter_mut().zip(&d_x) {
                    *acc += v;
                }
            }
        }
    }
    Ok(())
}

/// Gradients of the amortized anchor terms
/// (1/K) sum_k (sqrt(decay)/n_tokens) ||W_k - anchor_k||_F.
pub fn anchor_gradients(params: &LmParameters, grads: &mut LmParameters, n_tokens: usize) {
    let (Some(ensemble), Some(ge)) = (&params.ensemble, grads.ensemble.as_mut()) else {
        return;
    };
    let k = ensemble.size() as f64;
    let scale = ensemble.weight_decay.sqrt() / n_tokens as f64 / k;
    for ((member, anchor), gm) in ensemble
        .members
        .iter()
        .zip(&ensemble.anchors)
        .zip(&mut ge.members)
    {
        let mut sq = 0.0;
        for (w, a) in member.w.data.iter().zip(&anchor.data) {
            sq += (w - a) * (w - a);
        }
        let norm = sq.sqrt();
        if norm == 0.0 {
            continue;
        }
        for ((g, w), a) in gm.w.data.iter_mut().zip(&member.w.data).zip(&anchor.data) {
            *g += scale * (w - a) / norm;
        }
    }
}
