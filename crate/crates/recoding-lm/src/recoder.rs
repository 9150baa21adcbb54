//! Gradient-based activation correction ("recoding"): at every time step
//! each layer's hidden and cell vectors are nudged one gradient step down
//! the error signal, h' = h - alpha * grad, before the next step consumes
//! them. Step sizes are fixed constants, softplus-mapped learned scalars,
//! or softplus outputs of small per-layer predictor networks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{relu, softplus, sub_scaled, Mat};
use crate::model::cell::{CellCache, RnnState};
use crate::model::params::{LayerWeights, INIT_RANGE};
use crate::rng::{self, stream};

/// Activation-kind index into the per-layer step-size tables.
pub const KIND_HIDDEN: usize = 0;
pub const KIND_CELL: usize = 1;

/// Hidden widths of the step-size predictor network.
pub const PREDICTOR_WIDTHS: (usize, usize) = (300, 100);

/// Two-hidden-layer feed-forward step-size predictor. The softplus that
/// keeps the step positive is applied by the caller on the scalar output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPredictor {
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
    pub w3: Mat,
    pub b3: Vec<f64>,
}

/// Intermediates of one predictor evaluation, kept for its backward pass.
#[derive(Debug, Clone)]
pub struct PredictorCache {
    pub input: Vec<f64>,
    pub z1: Vec<f64>,
    pub a1: Vec<f64>,
    pub z2: Vec<f64>,
    pub a2: Vec<f64>,
    /// Pre-softplus scalar output.
    pub z3: f64,
}

impl StepPredictor {
    pub fn init(input_width: usize, rng: &mut impl Rng) -> Self {
        let (h1, h2) = PREDICTOR_WIDTHS;
        let m = |rows: usize, cols: usize, rng: &mut dyn rand::RngCore| {
            Mat::from_fn(rows, cols, |_, _| rng.gen_range(-INIT_RANGE..=INIT_RANGE))
        };
        StepPredictor {
            w1: m(h1, input_width, rng),
            b1: vec![0.0; h1],
            w2: m(h2, h1, rng),
            b2: vec![0.0; h2],
            w3: m(1, h2, rng),
            b3: vec![0.0; 1],
        }
    }

    pub fn zeros_like(&self) -> Self {
        StepPredictor {
            w1: Mat::zeros(self.w1.rows, self.w1.cols),
            b1: vec![0.0; self.b1.len()],
            w2: Mat::zeros(self.w2.rows, self.w2.cols),
            b2: vec![0.0; self.b2.len()],
            w3: Mat::zeros(self.w3.rows, self.w3.cols),
            b3: vec![0.0; self.b3.len()],
        }
    }

    /// Forward pass returning the pre-softplus output and the cache.
    pub fn forward(&self, input: &[f64]) -> PredictorCache {
        let mut z1 = self.w1.matvec(input);
        for (z, b) in z1.iter_mut().zip(&self.b1) {
            *z += b;
        }
        let a1: Vec<f64> = z1.iter().map(|&z| relu(z)).collect();
        let mut z2 = self.w2.matvec(&a1);
        for (z, b) in z2.iter_mut().zip(&self.b2) {
            *z += b;
        }
        let a2: Vec<f64> = z2.iter().map(|&z| relu(z)).collect();
        let z3 = self.w3.matvec(&a2)[0] + self.b3[0];
        PredictorCache {
            input: input.to_vec(),
            z1,
            a1,
            z2,
            a2,
            z3,
        }
    }

    /// Accumulate parameter gradients for dL/d(pre-softplus output).
    /// The input is treated as a constant: nothing flows back into it.
    pub fn backward(&self, cache: &PredictorCache, d_out: f64, grads: &mut StepPredictor) {
        grads.b3[0] += d_out;
        for (g, a) in grads.w3.row_mut(0).iter_mut().zip(&cache.a2) {
            *g += d_out * a;
        }
        let mut d_a2 = self.w3.matvec_transpose(&[d_out]);
        for (d, z) in d_a2.iter_mut().zip(&cache.z2) {
            if *z <= 0.0 {
                *d = 0.0;
            }
        }
        for (g, d) in grads.b2.iter_mut().zip(&d_a2) {
            *g += d;
        }
        grads.w2.add_outer(&d_a2, &cache.a1, 1.0);
        let mut d_a1 = self.w2.matvec_transpose(&d_a2);
        for (d, z) in d_a1.iter_mut().zip(&cache.z1) {
            if *z <= 0.0 {
                *d = 0.0;
            }
        }
        for (g, d) in grads.b1.iter_mut().zip(&d_a1) {
            *g += d;
        }
        grads.w1.add_outer(&d_a1, &cache.input, 1.0);
    }
}

/// Step-size state for every (layer, activation kind) pair. Lives inside
/// `LmParameters` so it serializes with the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StepSizeParams {
    /// Configured constants; not trainable.
    Fixed { alphas: Vec<[f64; 2]> },
    /// Raw scalars; effective step = softplus(raw).
    Learned { raws: Vec<[f64; 2]> },
    /// Per-(layer, kind) predictor networks; effective step =
    /// softplus(net(h_layer)).
    Predicted { nets: Vec<[StepPredictor; 2]> },
}

/// raw such that softplus(raw) = y (y floored at 1e-8).
pub fn inverse_softplus(y: f64) -> f64 {
    let y = y.max(1e-8);
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

impl StepSizeParams {
    /// Build from config: a global alpha replicated per (layer, kind), with
    /// per-slot overrides applied on top.
    pub fn from_config(
        cfg: &crate::config::RecodingConfig,
        layers: usize,
        hidden: usize,
        seed: u64,
    ) -> Self {
        let mut table = vec![[cfg.alpha; 2]; layers];
        for &(l, k, a) in &cfg.alpha_overrides {
            table[l][k] = a;
        }
        match cfg.step_kind {
            crate::config::StepKind::Fixed => StepSizeParams::Fixed { alphas: table },
            crate::config::StepKind::Learned => StepSizeParams::Learned {
                raws: table
                    .iter()
                    .map(|pair| [inverse_softplus(pair[0]), inverse_softplus(pair[1])])
                    .collect(),
            },
            crate::config::StepKind::Predicted => {
                let mut r = rng::substream(seed, &[stream::INIT, 0x5745]);
                StepSizeParams::Predicted {
                    nets: (0..layers)
                        .map(|_| {
                            [
                                StepPredictor::init(hidden, &mut r),
                                StepPredictor::init(hidden, &mut r),
                            ]
                        })
                        .collect(),
                }
            }
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            StepSizeParams::Fixed { alphas } => StepSizeParams::Fixed {
                alphas: vec![[0.0; 2]; alphas.len()],
            },
            StepSizeParams::Learned { raws } => StepSizeParams::Learned {
                raws: vec![[0.0; 2]; raws.len()],
            },
            StepSizeParams::Predicted { nets } => StepSizeParams::Predicted {
                nets: nets
                    .iter()
                    .map(|pair| [pair[0].zeros_like(), pair[1].zeros_like()])
                    .collect(),
            },
        }
    }

    pub fn collect_trainable<'a>(&'a self, out: &mut Vec<&'a [f64]>) {
        match self {
            StepSizeParams::Fixed { .. } => {}
            StepSizeParams::Learned { raws } => {
                for pair in raws {
                    out.push(&pair[..]);
                }
            }
            StepSizeParams::Predicted { nets } => {
                for pair in nets {
                    for net in pair {
                        out.push(&net.w1.data);
                        out.push(&net.b1);
                        out.push(&net.w2.data);
                        out.push(&net.b2);
                        out.push(&net.w3.data);
                        out.push(&net.b3);
                    }
                }
            }
        }
    }

    pub fn collect_trainable_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        match self {
            StepSizeParams::Fixed { .. } => {}
            StepSizeParams::Learned { raws } => {
                for pair in raws {
                    out.push(&mut pair[..]);
                }
            }
            StepSizeParams::Predicted { nets } => {
                for pair in nets {
                    for net in pair {
                        out.push(&mut net.w1.data);
                        out.push(&mut net.b1);
                        out.push(&mut net.w2.data);
                        out.push(&mut net.b2);
                        out.push(&mut net.w3.data);
                        out.push(&mut net.b3);
                    }
                }
            }
        }
    }

    /// Effective step size for (layer, kind). For the predicted strategy the
    /// layer's hidden activation is the (constant) predictor input; the
    /// returned cache is needed to train the predictor.
    pub fn step_size(
        &self,
        layer: usize,
        kind: usize,
        hidden: &[f64],
    ) -> (f64, Option<PredictorCache>) {
        match self {
            StepSizeParams::Fixed { alphas } => (alphas[layer][kind], None),
            StepSizeParams::Learned { raws } => (softplus(raws[layer][kind]), None),
            StepSizeParams::Predicted { nets } => {
                let cache = nets[layer][kind].forward(hidden);
                (softplus(cache.z3), Some(cache))
            }
        }
    }
}

/// Per-layer recoding gradients: d(delta)/d(h) and d(delta)/d(c) of the
/// current step.
#[derive(Debug, Clone)]
pub struct RecodingGradients {
    /// layers[l] = (g_h, g_c)
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

/// The update rule itself: activation - alpha * grad.
pub fn recode(activation: &[f64], grad: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if activation.len() != grad.len() {
        return Err(Error::Invalid(format!(
            "recode: shape mismatch ({} vs {})",
            activation.len(),
            grad.len()
        )));
    }
    Ok(sub_scaled(activation, grad, alpha))
}

/// Propagate the top-layer signal gradient down to every layer's hidden and
/// cell activations of the current step. Only within-step paths are
/// followed: the previous step's states are constants here.
///
/// For the top layer g_h is the incoming gradient itself and
/// g_c = g_h . o-gate . tanh'(c). For lower layers the gradient arrives
/// through the input weights of the layer above.
pub fn signal_gradients(
    layers: &[LayerWeights],
    caches: &[CellCache],
    top_grad: &[f64],
) -> Result<RecodingGradients> {
    if layers.len() != caches.len() || layers.is_empty() {
        return Err(Error::Invalid(
            "signal_gradients: missing step caches".into(),
        ));
    }
    let num_layers = layers.len();
    let mut out = vec![(Vec::new(), Vec::new()); num_layers];

    let mut d_h = top_grad.to_vec();
    for l in (0..num_layers).rev() {
        let cache = &caches[l];
        let weights = &layers[l];

        // c -> h path: h = o . tanh(c)
        let d_c: Vec<f64> = (0..d_h.len())
            .map(|i| d_h[i] * cache.output[i] * (1.0 - cache.tanh_c[i] * cache.tanh_c[i]))
            .collect();

        if l > 0 {
            // gradient w.r.t. this layer's input x = h of layer l-1
            let n = d_h.len();
            let mut d_forget_pre = vec![0.0; n];
            let mut d_input_pre = vec![0.0; n];
            let mut d_output_pre = vec![0.0; n];
            let mut d_cand_pre = vec![0.0; n];
            for i in 0..n {
                d_output_pre[i] =
                    d_h[i] * cache.tanh_c[i] * cache.output[i] * (1.0 - cache.output[i]);
                d_forget_pre[i] =
                    d_c[i] * cache.c_prev[i] * cache.forget[i] * (1.0 - cache.forget[i]);
                d_input_pre[i] =
                    d_c[i] * cache.candidate[i] * cache.input[i] * (1.0 - cache.input[i]);
                d_cand_pre[i] =
                    d_c[i] * cache.input[i] * (1.0 - cache.candidate[i] * cache.candidate[i]);
            }
            let mut d_x = weights.forget.w_x.matvec_transpose(&d_forget_pre);
            for (acc, v) in d_x
                .iter_mut()
                .zip(weights.input.w_x.matvec_transpose(&d_input_pre))
            {
                *acc += v;
            }
            for (acc, v) in d_x
                .iter_mut()
                .zip(weights.output.w_x.matvec_transpose(&d_output_pre))
            {
                *acc += v;
            }
            for (acc, v) in d_x
                .iter_mut()
                .zip(weights.cell.w_x.matvec_transpose(&d_cand_pre))
            {
                *acc += v;
            }
            out[l] = (std::mem::take(&mut d_h), d_c);
            d_h = d_x;
        } else {
            out[l] = (std::mem::take(&mut d_h), d_c);
        }
    }
    Ok(RecodingGradients { layers: out })
}

/// Result of recoding a full state stack.
#[derive(Debug, Clone)]
pub struct AppliedRecoding {
    pub state: RnnState,
    /// alphas[l] = [alpha_h, alpha_c]
    pub alphas: Vec<[f64; 2]>,
    /// Predictor caches per (layer, kind) when the predicted strategy runs.
    pub predictor_caches: Option<Vec<[PredictorCache; 2]>>,
}

/// Recode every layer's hidden and cell activations with their own step
/// sizes. The returned state is what the next time step consumes.
pub fn apply_recoding(
    state: &RnnState,
    grads: &RecodingGradients,
    steps: &StepSizeParams,
) -> Result<AppliedRecoding> {
    let mut layers = Vec::with_capacity(state.layers.len());
    let mut alphas = Vec::with_capacity(state.layers.len());
    let mut caches: Vec<[PredictorCache; 2]> = Vec::new();
    let predicted = matches!(steps, StepSizeParams::Predicted { .. });

    for (l, ((h, c), (g_h, g_c))) in state.layers.iter().zip(&grads.layers).enumerate() {
        let (alpha_h, cache_h) = steps.step_size(l, KIND_HIDDEN, h);
        let (alpha_c, cache_c) = steps.step_size(l, KIND_CELL, h);
        let h_new = recode(h, g_h, alpha_h)?;
        let c_new = recode(c, g_c, alpha_c)?;
        layers.push((h_new, c_new));
        alphas.push([alpha_h, alpha_c]);
        if predicted {
            caches.push([cache_h.unwrap(), cache_c.unwrap()]);
        }
    }
    Ok(AppliedRecoding {
        state: RnnState { layers },
        alphas,
        predictor_caches: if predicted { Some(caches) } else { None },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::cell::lstm_step;
    use crate::model::params::{Dims, LmParameters};

    #[test]
    fn recode_is_identity_at_zero_step() {
        let a = vec![0.3, -0.7];
        let g = vec![10.0, -3.0];
        assert_eq!(recode(&a, &g, 0.0).unwrap(), a);
    }

    #[test]
    fn recode_arithmetic() {
        let out = recode(&[1.0, 1.0], &[2.0, -2.0], 0.5).unwrap();
        assert_eq!(out, vec![0.0, 2.0]);
    }

    #[test]
    fn recode_reaches_quadratic_minimum_at_inverse_lipschitz_step() {
        // delta(h) = |h|^2 has grad 2h and L = 2; one step at alpha = 1/L lands at 0.
        let h = vec![0.4, -1.2, 3.0];
        let grad: Vec<f64> = h.iter().map(|x| 2.0 * x).collect();
        let out = recode(&h, &grad, 0.5).unwrap();
        for v in out {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn recode_rejects_shape_mismatch() {
        assert!(recode(&[1.0], &[1.0, 2.0], 0.1).is_err());
    }

    #[test]
    fn step_size_fixed_and_learned_values() {
        let fixed = StepSizeParams::Fixed {
            alphas: vec![[5.0, 5.0]],
        };
        assert_eq!(fixed.step_size(0, KIND_HIDDEN, &[]).0, 5.0);

        let learned = StepSizeParams::Learned {
            raws: vec![[0.0, 0.0]],
        };
        let (a, _) = learned.step_size(0, KIND_CELL, &[]);
        assert!((a - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn zero_predictor_outputs_ln2_regardless_of_input() {
        let net = StepPredictor::init(4, &mut crate::rng::substream(1, &[9])).zeros_like();
        let steps = StepSizeParams::Predicted {
            nets: vec![[net.clone(), net]],
        };
        for input in [[0.0, 0.0, 0.0, 0.0], [1.0, -2.0, 0.5, 9.0]] {
            let (a, _) = steps.step_size(0, KIND_HIDDEN, &input);
            assert!((a - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn learned_step_is_monotone_in_raw_parameter() {
        let mut prev = 0.0;
        for i in 0..20 {
            let raw = -5.0 + i as f64 * 0.7;
            let a = softplus(raw);
            assert!(a > prev);
            prev = a;
        }
    }

    #[test]
    fn inverse_softplus_round_trips() {
        for &a in &[1e-6, 0.001, 0.5, 1.0, 5.0, 40.0] {
            assert!((softplus(inverse_softplus(a)) - a).abs() / a < 1e-9);
        }
    }

    fn toy_params(layers: usize) -> LmParameters {
        let dims = Dims {
            vocab: 11,
            emb: 5,
            hidden: 7,
            layers,
        };
        LmParameters::init(
            dims,
            StepSizeParams::Fixed {
                alphas: vec![[0.0; 2]; layers],
            },
            17,
        )
    }

    fn run_stack(params: &LmParameters, x: &[f64], state: &RnnState) -> Vec<CellCache> {
        let mut caches = Vec::new();
        let mut input = x.to_vec();
        for (l, lw) in params.layers.iter().enumerate() {
            let (h_prev, c_prev) = &state.layers[l];
            let cache = lstm_step(lw, &input, h_prev, c_prev);
            input = cache.h.clone();
            caches.push(cache);
        }
        caches
    }

    #[test]
    fn single_layer_gradients_match_stated_form() {
        let params = toy_params(1);
        let state = RnnState::zeros(1, 7);
        let x = vec![0.1, -0.2, 0.3, 0.05, -0.4];
        let caches = run_stack(&params, &x, &state);
        let top: Vec<f64> = (0..7).map(|i| (i as f64 * 0.3).sin()).collect();
        let grads = signal_gradients(&params.layers, &caches, &top).unwrap();
        assert_eq!(grads.layers[0].0, top);
        for i in 0..7 {
            let expect =
                top[i] * caches[0].output[i] * (1.0 - caches[0].tanh_c[i] * caches[0].tanh_c[i]);
            assert!((grads.layers[0].1[i] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_top_gradient_gives_all_zeros() {
        let params = toy_params(2);
        let state = RnnState::zeros(2, 7);
        let caches = run_stack(&params, &[0.3; 5], &state);
        let grads = signal_gradients(&params.layers, &caches, &[0.0; 7]).unwrap();
        for (g_h, g_c) in &grads.layers {
            assert!(g_h.iter().all(|&v| v == 0.0));
            assert!(g_c.iter().all(|&v| v == 0.0));
        }
    }

    /// Two-layer chain rule against central finite differences of a
    /// quadratic error on the top hidden state.
    #[test]
    fn two_layer_chain_matches_finite_differences() {
        let params = toy_params(2);
        let mut state = RnnState::zeros(2, 7);
        // non-trivial previous state
        for (li, (h, c)) in state.layers.iter_mut().enumerate() {
            for i in 0..7 {
                h[i] = ((li * 7 + i) as f64 * 0.21).sin() * 0.4;
                c[i] = ((li * 7 + i) as f64 * 0.13).cos() * 0.6;
            }
        }
        let x: Vec<f64> = (0..5).map(|i| (i as f64 * 0.37).cos() * 0.5).collect();
        let caches = run_stack(&params, &x, &state);

        // delta(h_top) = |h_top|^2
        let delta_of_top = |h: &[f64]| -> f64 { h.iter().map(|v| v * v).sum() };
        let top_grad: Vec<f64> = caches[1].h.iter().map(|v| 2.0 * v).collect();
        let grads = signal_gradients(&params.layers, &caches, &top_grad).unwrap();

        // recompute delta when activation (layer, kind, index) is perturbed,
        // following only within-step paths
        let eval = |layer: usize, kind: usize, idx: usize, eps: f64| -> f64 {
            let mut h0 = caches[0].h.clone();
            let mut c0 = caches[0].c.clone();
            let mut h1 = caches[1].h.clone();
            let mut c1 = caches[1].c.clone();
            match (layer, kind) {
                (0, KIND_HIDDEN) => h0[idx] += eps,
                (0, KIND_CELL) => {
                    c0[idx] += eps;
                    for i in 0..7 {
                        h0[i] = caches[0].output[i] * c0[i].tanh();
                    }
                }
                (1, KIND_HIDDEN) => h1[idx] += eps,
                (1, KIND_CELL) => {
                    c1[idx] += eps;
                    for i in 0..7 {
                        h1[i] = caches[1].output[i] * c1[i].tanh();
                    }
                }
                _ => unreachable!(),
            }
            if layer == 0 {
                // layer 1 re-runs on the perturbed h0
                let (h_prev, c_prev) = &state.layers[1];
                let c = lstm_step(&params.layers[1], &h0, h_prev, c_prev);
                delta_of_top(&c.h)
            } else {
                delta_of_top(&h1)
            }
        };

        let eps = 1e-6;
        for layer in 0..2 {
            for kind in 0..2 {
                let analytic = if kind == KIND_HIDDEN {
                    &grads.layers[layer].0
                } else {
                    &grads.layers[layer].1
                };
                for idx in 0..7 {
                    let num =
                        (eval(layer, kind, idx, eps) - eval(layer, kind, idx, -eps)) / (2.0 * eps);
                    let err = crate::math::rel_err(analytic[idx], num, 1e-8);
                    assert!(
                        err < 1e-4,
                        "layer {layer} kind {kind} idx {idx}: analytic {} vs numeric {num}",
                        analytic[idx]
                    );
                }
            }
        }
    }

    #[test]
    fn apply_recoding_with_zero_steps_is_identity() {
        let params = toy_params(2);
        let state = RnnState::zeros(2, 7);
        let caches = run_stack(&params, &[0.5; 5], &state);
        let stepped = RnnState {
            layers: caches.iter().map(|c| (c.h.clone(), c.c.clone())).collect(),
        };
        let top: Vec<f64> = (0..7).map(|i| i as f64).collect();
        let grads = signal_gradients(&params.layers, &caches, &top).unwrap();
        let steps = StepSizeParams::Fixed {
            alphas: vec![[0.0; 2]; 2],
        };
        let applied = apply_recoding(&stepped, &grads, &steps).unwrap();
        assert_eq!(applied.state, stepped);
    }

    #[test]
    fn per_slot_alphas_can_recode_cells_only() {
        let params = toy_params(2);
        let state = RnnState::zeros(2, 7);
        let caches = run_stack(&params, &[0.5; 5], &state);
        let stepped = RnnState {
            layers: caches.iter().map(|c| (c.h.clone(), c.c.clone())).collect(),
        };
        let top: Vec<f64> = (0..7).map(|i| 1.0 + i as f64).collect();
        let grads = signal_gradients(&params.layers, &caches, &top).unwrap();
        let steps = StepSizeParams::Fixed {
            alphas: vec![[0.0, 0.001], [0.0, 0.001]],
        };
        let applied = apply_recoding(&stepped, &grads, &steps).unwrap();
        for l in 0..2 {
            assert_eq!(applied.state.layers[l].0, stepped.layers[l].0);
            assert_ne!(applied.state.layers[l].1, stepped.layers[l].1);
        }
    }
}
