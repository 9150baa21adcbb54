//! The gated recurrence: one LSTM step, its cached intermediates, and the
//! per-layer hidden/cell state carried across time steps.

use serde::{Deserialize, Serialize};

use crate::math::sigmoid;
use crate::model::params::LayerWeights;

/// Per-layer (h, c) pair. What `forward` threads through time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnState {
    /// layers[l] = (h, c)
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl RnnState {
    pub fn zeros(layers: usize, hidden: usize) -> Self {
        RnnState {
            layers: (0..layers)
                .map(|_| (vec![0.0; hidden], vec![0.0; hidden]))
                .collect(),
        }
    }
}

/// Everything one cell step produces, kept for the backward passes and the
/// within-step recoding chain rule.
#[derive(Debug, Clone)]
pub struct CellCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    /// Gate activations (post-sigmoid).
    pub forget: Vec<f64>,
    pub input: Vec<f64>,
    pub output: Vec<f64>,
    /// Candidate cell (post-tanh).
    pub candidate: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

/// One LSTM step: sigmoid gates over affine maps of (h_prev, x), candidate
/// tanh cell, convex cell update, gated tanh output.
pub fn lstm_step(weights: &LayerWeights, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> CellCache {
    assert_eq!(
        weights.forget.w_x.cols,
        x.len(),
        "lstm_step: input width mismatch"
    );
    assert_eq!(
        weights.forget.w_h.cols,
        h_prev.len(),
        "lstm_step: hidden width mismatch"
    );
    assert_eq!(
        h_prev.len(),
        c_prev.len(),
        "lstm_step: state width mismatch"
    );

    let forget: Vec<f64> = weights
        .forget
        .preact(h_prev, x)
        .into_iter()
        .map(sigmoid)
        .collect();
    let input: Vec<f64> = weights
        .input
        .preact(h_prev, x)
        .into_iter()
        .map(sigmoid)
        .collect();
    let output: Vec<f64> = weights
        .output
        .preact(h_prev, x)
        .into_iter()
        .map(sigmoid)
        .collect();
    let candidate: Vec<f64> = weights
        .cell
        .preact(h_prev, x)
        .into_iter()
        .map(f64::tanh)
        .collect();

    let c: Vec<f64> = (0..h_prev.len())
        .map(|i| forget[i] * c_prev[i] + input[i] * candidate[i])
        .collect();
    let tanh_c: Vec<f64> = c.iter().map(|&v| v.tanh()).collect();
    let h: Vec<f64> = (0..h_prev.len()).map(|i| output[i] * tanh_c[i]).collect();

    CellCache {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        forget,
        input,
        output,
        candidate,
        c,
        tanh_c,
        h,
    }
}
