mod common;

use common::{enumerated_soft_dtw, hard_dtw, rel};
use proptest::prelude::*;
use vist_core::loss::{rolling_soft_dtw_raw, soft_dtw, vist_loss, LossWeights, SoftDtwConfig};
use vist_core::{Graph, Tensor};

#[test]
fn matches_enumeration_fd_and_hard_limit() {
    common::soft_dtw_oracle(17).assert();
}

fn seqs(max_len: usize, dim: usize) -> impl Strategy<Value = Vec<f64>> {
    (1..=max_len).prop_flat_map(move |n| prop::collection::vec(-3.0..3.0f64, n * dim))
}

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, usize)> {
    (1usize..=3).prop_flat_map(|d| (seqs(5, d), seqs(5, d), Just(d)))
}

proptest! {
    #[test]
    fn symmetric((a, b, d) in pair(), gamma in 0.01..3.0f64) {
        let (ab, ba) = (soft_dtw(&a, &b, d, gamma).unwrap(), soft_dtw(&b, &a, d, gamma).unwrap());
        prop_assert!(rel(ab, ba, 1e-12) < 1e-12, "{ab} vs {ba}");
    }

    #[test]
    fn decreases_with_smoothing((a, b, d) in pair(), g1 in 0.01..3.0f64, g2 in 0.01..3.0f64) {
        let (lo, hi) = if g1 < g2 { (g1, g2) } else { (g2, g1) };
        let (sharp, smooth) = (soft_dtw(&a, &b, d, lo).unwrap(), soft_dtw(&a, &b, d, hi).unwrap());
        prop_assert!(smooth <= sharp + 1e-12 * sharp.abs().max(1.0));
        prop_assert!(sharp <= hard_dtw(&a, &b, d) + 1e-12);
    }

    #[test]
    fn joint_value_ignores_feature_order((a, b, d) in pair(), gamma in 0.1..2.0f64) {
        let flip = |x: &[f64]| x.chunks(d).flat_map(|r| r.iter().rev().copied()).collect::<Vec<_>>();
        let (v, w) = (soft_dtw(&a, &b, d, gamma).unwrap(), soft_dtw(&flip(&a), &flip(&b), d, gamma).unwrap());
        prop_assert!(rel(v, w, 1e-12) < 1e-12);
    }

    #[test]
    fn small_pairs_match_enumeration((a, b, d) in (1usize..=2).prop_flat_map(|d| (seqs(4, d), seqs(4, d), Just(d))),
                                     gamma in 0.05..2.0f64) {
        let v = soft_dtw(&a, &b, d, gamma).unwrap();
        prop_assert!(rel(v, enumerated_soft_dtw(&a, &b, d, gamma), 1e-12) < 1e-9);
    }
}

/// Rolling value recomputed window by window from the plain discrepancy.
fn rolling_reference(target: &[f64], pred: &[f64], (n, t, c): (usize, usize, usize), w: usize, cfg: &SoftDtwConfig) -> f64 {
    let mut total = 0.0;
    for s in 0..n {
        for start in 0..t - w {
            let at = |x: &[f64]| x[(s * t + start) * c..(s * t + start + w) * c].to_vec();
            let (ty, py) = (at(target), at(pred));
            total += if cfg.per_neuron {
                (0..c)
                    .map(|k| {
                        let col = |x: &[f64]| (0..w).map(|i| x[i * c + k]).collect::<Vec<_>>();
                        soft_dtw(&col(&ty), &col(&py), 1, cfg.smoothing).unwrap()
                    })
                    .sum::<f64>()
            } else {
                soft_dtw(&ty, &py, c, cfg.smoothing).unwrap()
            };
        }
    }
    total / (n * (t - w)) as f64
}

#[test]
fn rolling_windows_compose_from_single_alignments() {
    let dims = (2, 11, 3);
    let len = dims.0 * dims.1 * dims.2;
    let target: Vec<f64> = (0..len).map(|i| (i as f64 * 0.37).sin()).collect();
    let pred: Vec<f64> = (0..len).map(|i| (i as f64 * 0.53).cos()).collect();
    for per_neuron in [false, true] {
        let cfg = SoftDtwConfig {
            smoothing: 0.7,
            windows: vec![4],
            per_neuron,
        };
        let got = rolling_soft_dtw_raw(&target, &pred, dims, 4, &cfg).unwrap().value;
        let want = rolling_reference(&target, &pred, dims, 4, &cfg);
        assert!(rel(got, want, 1e-12) < 1e-12, "per_neuron {per_neuron}: {got} vs {want}");
    }
}

#[test]
fn composite_loss_is_the_weighted_sum_of_its_terms() {
    let g = Graph::<f64>::new();
    let y = g.constant(Tensor::from_fn([2, 14, 3], |i| (i as f64 * 0.21).sin().abs()));
    let p = g.constant(Tensor::from_fn([2, 14, 3], |i| (i as f64 * 0.43).cos()));
    let w = LossWeights {
        alpha: 0.3,
        beta: 0.7,
        gamma: 0.05,
    };
    let cfg = SoftDtwConfig {
        windows: vec![3, 6],
        ..SoftDtwConfig::default()
    };
    let terms = vist_loss(y, p, &w, &cfg).unwrap();
    let (yv, pv) = (y.value(), p.value());
    let n = yv.len() as f64;
    let rmse: f64 = yv
        .data()
        .chunks(42)
        .zip(pv.data().chunks(42))
        .map(|(a, b)| (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 42.0).sqrt())
        .sum::<f64>()
        / 2.0;
    let neg: f64 = pv.data().iter().map(|v| (-v).max(0.0)).sum::<f64>() / n;
    let sdtw: f64 = cfg
        .windows
        .iter()
        .map(|&win| rolling_reference(yv.data(), pv.data(), (2, 14, 3), win, &cfg))
        .sum();
    let want = w.alpha * rmse + w.beta * neg + w.gamma * sdtw;
    assert!(rel(terms.total.value().item(), want, 1e-12) < 1e-12);
    assert_eq!(terms.sdtw.iter().map(|(k, _)| *k).collect::<Vec<_>>(), vec![3, 6]);
}
