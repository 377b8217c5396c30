mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vist_core::model::ParamStore;
use vist_core::train::{
    gather_batch, sample_clips, train, AdamW, AdamWConfig, LrSchedule, Swa, TrainConfig, METRICS_HEADER,
};
use vist_core::Tensor;

#[test]
fn adamw_follows_the_textbook_recursion() {
    let cfg = AdamWConfig {
        beta1: 0.8,
        beta2: 0.95,
        eps: 1e-6,
        weight_decay: 0.3,
    };
    let mut store = ParamStore::<f64>::default();
    store.insert("w", Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap(), true);
    store.insert("buf", Tensor::new([1], vec![7.0]).unwrap(), false);
    let mut opt = AdamW::new(cfg, &store);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut w, mut m, mut v) = (vec![0.5, -1.0, 2.0], [0.0; 3], [0.0; 3]);
    for t in 1..=25 {
        let g: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lr = 0.01 * t as f64;
        opt.step(&mut store, &[Some(Tensor::new([3], g.clone()).unwrap()), None], lr).unwrap();
        for i in 0..3 {
            w[i] -= lr * cfg.weight_decay * w[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = m[i] / (1.0 - cfg.beta1.powi(t));
            let vh = v[i] / (1.0 - cfg.beta2.powi(t));
            w[i] -= lr * mh / (vh.sqrt() + cfg.eps);
        }
        for (a, b) in store.get("w").unwrap().data().iter().zip(&w) {
            assert!((a - b).abs() < 1e-12, "step {t}: {a} vs {b}");
        }
    }
    assert_eq!(store.get("buf").unwrap().data(), &[7.0]);
}

#[test]
fn weight_average_is_the_plain_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut swa = Swa::<f64>::default();
    let snapshots: Vec<Vec<f64>> = (0..7).map(|_| (0..5).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
    for s in &snapshots {
        let mut p = ParamStore::default();
        p.insert("w", Tensor::new([5], s.clone()).unwrap(), true);
        swa.update(&p);
    }
    let avg = swa.average.unwrap();
    for (i, a) in avg.get("w").unwrap().data().iter().enumerate() {
        let mean = snapshots.iter().map(|s| s[i]).sum::<f64>() / 7.0;
        assert!((a - mean).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn schedule_is_continuous_and_bounded(peak in 1e-4..1e-1f64, ratio in 0.0..1.0f64, warmup in 0usize..50, extra in 1usize..500) {
        let s = LrSchedule { peak, last: peak * ratio, warmup, total: warmup + extra };
        let max_jump = peak / (warmup.max(1) as f64) + peak * std::f64::consts::PI / extra as f64;
        let mut prev = s.at(0);
        for step in 1..=s.total + 3 {
            let lr = s.at(step);
            prop_assert!(lr >= 0.0 && lr <= peak * (1.0 + 1e-12));
            prop_assert!((lr - prev).abs() <= max_jump * (1.0 + 1e-9));
            if step > warmup {
                prop_assert!(lr <= prev + 1e-15);
            }
            prev = lr;
        }
        prop_assert!((s.at(warmup) - peak).abs() <= 1e-15 * peak);
        prop_assert!((s.at(s.total) - s.last).abs() <= 1e-12 * peak);
    }
}

#[test]
fn clip_starts_are_uniform() {
    // 10 admissible starts, 20000 draws: chi-square with 9 degrees of
    // freedom stays below 27.88 with probability 0.999
    let starts = sample_clips(49, 40, 20_000, 5).unwrap();
    let mut counts = [0usize; 10];
    for s in starts {
        counts[s] += 1;
    }
    let expected = 2000.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    assert!(chi2 < 27.88, "chi2 {chi2}, counts {counts:?}");
    assert!(sample_clips(10, 11, 1, 0).is_err());
}

#[test]
fn batches_are_aligned_windows() {
    let data = common::small_data(1);
    let (x, y) = gather_batch(&data.a, &[0, 17], 24).unwrap();
    let c = data.channels();
    assert_eq!(x.shape(), &[2, c, 24, 4, 4]);
    assert_eq!(y.shape(), &[2, 24, 4]);
    assert_eq!(&y.data()[24 * 4..24 * 4 + 4], data.a.rates.narrow(0, 17, 1).unwrap().data());
    assert_eq!(x.narrow(0, 1, 1).unwrap().into_shape([c, 24, 4, 4]).unwrap(), data.a.prior.narrow(1, 17, 24).unwrap());
}

#[test]
fn one_epoch_logs_every_split_and_column() {
    let data = common::small_data(2);
    let mut seen = Vec::new();
    let out = train(&common::small_model(), &common::small_train(0, 1), &data, |r| seen.push(r.csv_line())).unwrap();
    let csv = out.metrics_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    let cols = METRICS_HEADER.split(',').count();
    let labels: Vec<(String, String)> = lines[1..]
        .iter()
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            assert_eq!(f.len(), cols, "{l}");
            (f[0].to_string(), f[1].to_string())
        })
        .collect();
    let want: Vec<(String, String)> = [("1", "train"), ("1", "within"), ("1", "cross"), ("swa", "within"), ("swa", "cross")]
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect();
    assert_eq!(labels, want);
    assert_eq!(seen, lines[1..]);
    for l in &lines[2..] {
        let f: Vec<&str> = l.split(',').collect();
        for v in &f[2..] {
            assert!(v.parse::<f64>().is_ok_and(f64::is_finite), "{l}");
        }
    }
    assert!(out.within.per_neuron_cc.iter().all(|c| c.is_finite()));
}

#[test]
fn training_reduces_the_loss() {
    let data = common::small_data(3);
    let cfg = TrainConfig {
        samples_per_epoch: 48,
        ..common::small_train(1, 5)
    };
    let out = train(&common::small_model(), &cfg, &data, |_| {}).unwrap();
    let l = &out.train_loss;
    assert_eq!(l.len(), 5);
    assert!(l[4] < l[0], "{l:?}");
}

#[test]
fn identical_seeds_give_identical_logs() {
    vist_core::exec::configure_threads(0);
    let data = common::small_data(4);
    let run = |seed| {
        train(&common::small_model(), &common::small_train(seed, 2), &data, |_| {})
            .unwrap()
            .metrics_csv()
    };
    let (a, b) = (run(7), run(7));
    assert_eq!(a, b);
    assert_ne!(a, run(8));
}
