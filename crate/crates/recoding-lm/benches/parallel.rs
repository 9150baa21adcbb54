//! Data-parallel kernels against their sequential twins. With the default
//! `parallel` feature the dispatch functions fan out over rayon; built
//! with `--no-default-features` both sides run sequentially and should
//! coincide. Outputs are bit-identical either way (ordered reduction).

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use recoding_lm::config::SignalConfig;
use recoding_lm::corpus::Chunk;
use recoding_lm::math::Mat;
use recoding_lm::model::cell::RnnState;
use recoding_lm::model::forward::{run_chunk, run_row, RunConfig};
use recoding_lm::model::params::{Decoder, Dims, EnsembleDecoders, LmParameters};
use recoding_lm::recoder::StepSizeParams;
use recoding_lm::signals::{bae_signal, bae_signal_seq, mcd_signal, mcd_signal_seq};
use recoding_lm::verifier::{finite_diff_grad, finite_diff_grad_seq};

fn bench_decoder(vocab: usize, hidden: usize) -> Decoder {
    let mut rng = recoding_lm::rng::substream(11, &[1]);
    use rand::Rng;
    Decoder {
        w: Mat::from_fn(vocab, hidden, |_, _| rng.gen_range(-0.5..0.5)),
        b: (0..vocab).map(|_| rng.gen_range(-0.1..0.1)).collect(),
    }
}

fn bench_hidden(n: usize) -> Vec<f64> {
    (0..n).map(|i| ((i as f64) * 0.37).sin() * 0.7).collect()
}

fn mcd_kernel(c: &mut Criterion) {
    let decoder = bench_decoder(2000, 256);
    let h = bench_hidden(256);
    let mut group = c.benchmark_group("mcd_signal_k15");
    group.sample_size(20);
    group.bench_function(BenchmarkId::new("dispatch", "k15"), |b| {
        b.iter(|| mcd_signal(black_box(&h), &decoder, 15, 0.42, 99).unwrap())
    });
    group.bench_function(BenchmarkId::new("sequential", "k15"), |b| {
        b.iter(|| mcd_signal_seq(black_box(&h), &decoder, 15, 0.42, 99).unwrap())
    });
    group.finish();
}

fn bae_kernel(c: &mut Criterion) {
    let ensemble = EnsembleDecoders::init(2000, 256, 15, 0.29, 4.82e-5, true, 5);
    let h = bench_hidden(256);
    let mut group = c.benchmark_group("bae_signal_k15");
    group.sample_size(20);
    group.bench_function(BenchmarkId::new("dispatch", "k15"), |b| {
        b.iter(|| bae_signal(black_box(&h), &ensemble))
    });
    group.bench_function(BenchmarkId::new("sequential", "k15"), |b| {
        b.iter(|| bae_signal_seq(black_box(&h), &ensemble))
    });
    group.finish();
}

fn finite_diff_kernel(c: &mut Criterion) {
    let decoder = bench_decoder(500, 192);
    let h = bench_hidden(192);
    let f = |hv: &[f64]| {
        let mut logits = decoder.w.matvec(hv);
        for (z, b) in logits.iter_mut().zip(&decoder.b) {
            *z += b;
        }
        let probs = recoding_lm::math::softmax(&logits);
        recoding_lm::signals::entropy(&probs)
    };
    let mut group = c.benchmark_group("finite_diff_192");
    group.sample_size(10);
    group.bench_function("dispatch", |b| {
        b.iter(|| finite_diff_grad(&f, black_box(&h), 1e-5).unwrap())
    });
    group.bench_function("sequential", |b| {
        b.iter(|| finite_diff_grad_seq(&f, black_box(&h), 1e-5).unwrap())
    });
    group.finish();
}

fn eval_rows_kernel(c: &mut Criterion) {
    let dims = Dims {
        vocab: 500,
        emb: 128,
        hidden: 128,
        layers: 2,
    };
    let params = LmParameters::init(
        dims,
        StepSizeParams::Fixed {
            alphas: vec![[0.001; 2]; 2],
        },
        3,
    );
    let signal = SignalConfig {
        kind: recoding_lm::config::SignalKind::Mcd,
        k: 8,
        ..SignalConfig::default()
    };
    let cfg = RunConfig {
        signal: &signal,
        recoding: true,
        score_with_ensemble: false,
        dropout: 0.0,
        train: false,
        trace: false,
        seed: 17,
        recode_steps: None,
    };
    let (batch, t) = (8usize, 16usize);
    use rand::Rng;
    let mut rng = recoding_lm::rng::substream(23, &[4]);
    let chunk = Chunk {
        input: (0..batch * t).map(|_| rng.gen_range(0..500u32)).collect(),
        target: (0..batch * t).map(|_| rng.gen_range(0..500u32)).collect(),
    };

    let mut group = c.benchmark_group("eval_chunk_8x16");
    group.sample_size(10);
    group.bench_function("dispatch", |b| {
        b.iter(|| {
            let states: Vec<RnnState> = (0..batch).map(|_| RnnState::zeros(2, 128)).collect();
            run_chunk(&params, &cfg, 0, black_box(&chunk), batch, t, states).unwrap()
        })
    });
    group.bench_function("row_loop", |b| {
        b.iter(|| {
            let mut nll = 0.0;
            for row in 0..batch {
                let out = run_row(
                    &params,
                    &cfg,
                    0,
                    row,
                    &chunk.input[row * t..(row + 1) * t],
                    &chunk.target[row * t..(row + 1) * t],
                    RnnState::zeros(2, 128),
                    0,
                )
                .unwrap();
                nll += out.nll_ln_sum;
            }
            nll
        })
    });
    group.finish();
}

criterion_group!(
    kernels,
    mcd_kernel,
    bae_kernel,
    finite_diff_kernel,
    eval_rows_kernel
);
criterion_main!(kernels);
