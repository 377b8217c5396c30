use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use vist_bench::{wave, wave_f64};
use vist_core::loss::{rolling_soft_dtw_raw, soft_dtw, soft_dtw_grad, SoftDtwConfig};
use vist_core::model::{Mode, ModelConfig, VistModel};
use vist_core::signals::{sd_kl, SdKlConfig};
use vist_core::tensor::kernels::{conv3d_backward, conv3d_forward, Conv3dSpec};
use vist_core::Graph;

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv3d");
    let x = wave(&[2, 16, 48, 16, 16], 0.1);
    let cases = [
        ("spatial_3x3", vec![16, 16, 1, 3, 3], Conv3dSpec { pad: [(0, 0), (1, 1), (1, 1)], ..Default::default() }),
        (
            "temporal_k13_d2",
            vec![16, 16, 13, 1, 1],
            Conv3dSpec { dilation: [2, 1, 1], ..Default::default() }.causal_t(24),
        ),
        ("pointwise", vec![16, 16, 1, 1, 1], Conv3dSpec::default()),
    ];
    for (name, wshape, spec) in cases {
        let w = wave(&wshape, 0.7);
        let y = conv3d_forward(&x, &w, spec).unwrap();
        g.bench_function(BenchmarkId::new("forward", name), |b| {
            b.iter(|| conv3d_forward(black_box(&x), black_box(&w), spec).unwrap())
        });
        g.bench_function(BenchmarkId::new("backward", name), |b| {
            b.iter(|| conv3d_backward(black_box(&x), black_box(&w), spec, black_box(&y), true, true).unwrap())
        });
    }
    g.finish();
}

fn dtw(c: &mut Criterion) {
    let mut g = c.benchmark_group("soft_dtw");
    for len in [6, 12] {
        let (a, b) = (wave_f64(len * 16, 0.0), wave_f64(len * 16, 1.3));
        g.bench_function(BenchmarkId::new("value", len), |bn| {
            bn.iter(|| soft_dtw(black_box(&a), black_box(&b), 16, 1.0).unwrap())
        });
        g.bench_function(BenchmarkId::new("value_and_grad", len), |bn| {
            bn.iter(|| soft_dtw_grad(black_box(&a), black_box(&b), 16, 1.0).unwrap())
        });
    }
    let (a, b) = (wave_f64(2 * 128 * 16, 0.0), wave_f64(2 * 128 * 16, 0.4));
    let cfg = SoftDtwConfig::default();
    g.bench_function("rolling_window12_clip128", |bn| {
        bn.iter(|| rolling_soft_dtw_raw(black_box(&a), black_box(&b), (2, 128, 16), 12, &cfg).unwrap())
    });
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let (a, b) = (wave_f64(1800, 0.0), wave_f64(1800, 2.0));
    let cfg = SdKlConfig::default();
    c.bench_function("sd_kl_1800_bins", |bn| bn.iter(|| sd_kl(black_box(&a), black_box(&b), &cfg).unwrap()));
}

fn model(c: &mut Criterion) {
    let cfg = ModelConfig {
        hidden: 8,
        prior_channels: 8,
        ..ModelConfig::default()
    };
    let m = VistModel::<f32>::new(cfg.clone()).unwrap();
    let prior = wave(&[2, cfg.prior_channels, 48, cfg.grid, cfg.grid], 0.3);
    let rf = wave(&[cfg.neurons, cfg.grid, cfg.grid], 0.9);
    let mut g = c.benchmark_group("model");
    g.sample_size(10);
    g.bench_function("train_step_batch2_clip48", |b| {
        b.iter(|| {
            let graph = Graph::<f32>::new();
            let (fwd, _) = m
                .forward(&graph, graph.constant(prior.clone()), graph.constant(rf.clone()), Mode::Train, true)
                .unwrap();
            graph.backward(fwd.output.sum()).unwrap()
        })
    });
    let one = wave(&[1, cfg.prior_channels, 240, cfg.grid, cfg.grid], 0.3);
    g.bench_function("predict_240_frames_chunk64", |b| {
        b.iter(|| m.predict_chunked(black_box(&one), &rf, 64).unwrap())
    });
    g.finish();
}

criterion_group!(benches, conv, dtw, metrics, model);
criterion_main!(benches);
