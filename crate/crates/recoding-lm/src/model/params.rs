//! Model parameters: embeddings, per-layer gate weights, decoder and the
//! optional decoder ensemble. The same struct doubles as the gradient
//! container (`zeros_like`), so clipping and SGD walk both in lockstep.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Mat;
use crate::recoder::StepSizeParams;
use crate::rng::{self, stream};

/// Uniform init range for all weights; biases start at zero.
pub const INIT_RANGE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub vocab: usize,
    pub emb: usize,
    pub hidden: usize,
    pub layers: usize,
}

impl Dims {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.emb == 0 || self.hidden == 0 || self.layers == 0 {
            return Err(Error::Invalid(
                "model dimensions must be >= 1 (vocab >= 2)".into(),
            ));
        }
        Ok(())
    }

    /// Input width of layer `l`: embeddings feed layer 0, hidden size above.
    pub fn input_width(&self, layer: usize) -> usize {
        if layer == 0 {
            self.emb
        } else {
            self.hidden
        }
    }
}

/// One gate: recurrent weights, input weights and a single merged bias.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateWeights {
    pub w_h: Mat,
    pub w_x: Mat,
    pub b: Vec<f64>,
}

impl GateWeights {
    fn init(hidden: usize, input: usize, rng: &mut impl Rng) -> Self {
        GateWeights {
            w_h: Mat::from_fn(hidden, hidden, |_, _| {
                rng.gen_range(-INIT_RANGE..=INIT_RANGE)
            }),
            w_x: Mat::from_fn(hidden, input, |_, _| {
                rng.gen_range(-INIT_RANGE..=INIT_RANGE)
            }),
            b: vec![0.0; hidden],
        }
    }

    fn zeros(hidden: usize, input: usize) -> Self {
        GateWeights {
            w_h: Mat::zeros(hidden, hidden),
            w_x: Mat::zeros(hidden, input),
            b: vec![0.0; hidden],
        }
    }

    /// Pre-activation W_h h + W_x x + b.
    pub fn preact(&self, h_prev: &[f64], x: &[f64]) -> Vec<f64> {
        let mut z = self.w_h.matvec(h_prev);
        let zx = self.w_x.matvec(x);
        for ((a, b), bias) in z.iter_mut().zip(&zx).zip(&self.b) {
            *a += b + bias;
        }
        z
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerWeights {
    pub forget: GateWeights,
    pub input: GateWeights,
    pub output: GateWeights,
    pub cell: GateWeights,
}

impl LayerWeights {
    fn init(hidden: usize, input: usize, rng: &mut impl Rng) -> Self {
        LayerWeights {
            forget: GateWeights::init(hidden, input, rng),
            input: GateWeights::init(hidden, input, rng),
            output: GateWeights::init(hidden, input, rng),
            cell: GateWeights::init(hidden, input, rng),
        }
    }

    fn zeros(hidden: usize, input: usize) -> Self {
        LayerWeights {
            forget: GateWeights::zeros(hidden, input),
            input: GateWeights::zeros(hidden, input),
            output: GateWeights::zeros(hidden, input),
            cell: GateWeights::zeros(hidden, input),
        }
    }
}

/// Softmax decoder head: logits = W h + b.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Decoder {
    pub w: Mat,
    pub b: Vec<f64>,
}

impl Decoder {
    pub fn zeros(vocab: usize, hidden: usize) -> Self {
        Decoder {
            w: Mat::zeros(vocab, hidden),
            b: vec![0.0; vocab],
        }
    }
}

/// K decoder replicas with fixed anchor weights drawn from the prior.
/// Anchors are never updated after initialization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleDecoders {
    pub members: Vec<Decoder>,
    pub anchors: Vec<Mat>,
    pub prior_scale: f64,
    pub weight_decay: f64,
}

impl EnsembleDecoders {
    /// Member weights and anchors are sampled i.i.d. from N(0, prior_scale^2);
    /// member biases start at zero. With `single_anchor` all members share
    /// one anchor draw (the amortized variant).
    pub fn init(
        vocab: usize,
        hidden: usize,
        k: usize,
        prior_scale: f64,
        weight_decay: f64,
        single_anchor: bool,
        seed: u64,
    ) -> Self {
        let mut rng = rng::substream(seed, &[stream::ENSEMBLE]);
        let normal = Normal::new(0.0, prior_scale).expect("prior scale must be finite");
        let sample_mat = |rng: &mut rand_chacha::ChaCha8Rng| {
            Mat::from_fn(vocab, hidden, |_, _| normal.sample(rng))
        };
        let members: Vec<Decoder> = (0..k)
            .map(|_| Decoder {
                w: sample_mat(&mut rng),
                b: vec![0.0; vocab],
            })
            .collect();
        let anchors: Vec<Mat> = if single_anchor {
            let a = sample_mat(&mut rng);
            (0..k).map(|_| a.clone()).collect()
        } else {
            (0..k).map(|_| sample_mat(&mut rng)).collect()
        };
        EnsembleDecoders {
            members,
            anchors,
            prior_scale,
            weight_decay,
        }
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LmParameters {
    pub dims: Dims,
    pub embeddings: Mat,
    pub layers: Vec<LayerWeights>,
    pub decoder: Decoder,
    pub ensemble: Option<EnsembleDecoders>,
    pub step_sizes: StepSizeParams,
}

impl LmParameters {
    /// Fresh model: weights uniform in [-INIT_RANGE, INIT_RANGE], biases zero.
    pub fn init(dims: Dims, step_sizes: StepSizeParams, seed: u64) -> Self {
        let mut rng = rng::substream(seed, &[stream::INIT]);
        let embeddings = Mat::from_fn(dims.vocab, dims.emb, |_, _| {
            rng.gen_range(-INIT_RANGE..=INIT_RANGE)
        });
        let layers = (0..dims.layers)
            .map(|l| LayerWeights::init(dims.hidden, dims.input_width(l), &mut rng))
            .collect();
        let decoder = Decoder {
            w: Mat::from_fn(dims.vocab, dims.hidden, |_, _| {
                rng.gen_range(-INIT_RANGE..=INIT_RANGE)
            }),
            b: vec![0.0; dims.vocab],
        };
        LmParameters {
            dims,
            embeddings,
            layers,
            decoder,
            ensemble: None,
            step_sizes,
        }
    }

    /// Same shapes, all entries zero. Used as the gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        LmParameters {
            dims: self.dims,
            embeddings: Mat::zeros(self.embeddings.rows, self.embeddings.cols),
            layers: (0..self.dims.layers)
                .map(|l| LayerWeights::zeros(self.dims.hidden, self.dims.input_width(l)))
                .collect(),
            decoder: Decoder::zeros(self.dims.vocab, self.dims.hidden),
            ensemble: self.ensemble.as_ref().map(|e| EnsembleDecoders {
                members: e
                    .members
                    .iter()
                    .map(|m| Decoder::zeros(m.w.rows, m.w.cols))
                    .collect(),
                anchors: e
                    .anchors
                    .iter()
                    .map(|a| Mat::zeros(a.rows, a.cols))
                    .collect(),
                prior_scale: e.prior_scale,
                weight_decay: e.weight_decay,
            }),
            step_sizes: self.step_sizes.zeros_like(),
        }
    }

    /// All trainable tensors in a fixed order. Anchors and fixed step sizes
    /// stay out: the former never train, the latter are configuration.
    pub fn trainable_tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.embeddings.data];
        for lw in &self.layers {
            for gate in [&lw.forget, &lw.input, &lw.output, &lw.cell] {
                out.push(&gate.w_h.data);
                out.push(&gate.w_x.data);
                out.push(&gate.b);
            }
        }
        out.push(&self.decoder.w.data);
        out.push(&self.decoder.b);
        if let Some(e) = &self.ensemble {
            for m in &e.members {
                out.push(&m.w.data);
                out.push(&m.b);
            }
        }
        self.step_sizes.collect_trainable(&mut out);
        out
    }

    pub fn trainable_tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.embeddings.data];
        for lw in &mut self.layers {
            for gate in [&mut lw.forget, &mut lw.input, &mut lw.output, &mut lw.cell] {
                out.push(&mut gate.w_h.data);
                out.push(&mut gate.w_x.data);
                out.push(&mut gate.b);
            }
        }
        out.push(&mut self.decoder.w.data);
        out.push(&mut self.decoder.b);
        if let Some(e) = &mut self.ensemble {
            for m in &mut e.members {
                out.push(&mut m.w.data);
                out.push(&mut m.b);
            }
        }
        self.step_sizes.collect_trainable_mut(&mut out);
        out
    }

    pub fn all_finite(&self) -> bool {
        self.trainable_tensors()
            .iter()
            .all(|t| t.iter().all(|x| x.is_finite()))
    }
}
