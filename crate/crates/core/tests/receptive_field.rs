mod common;

use proptest::prelude::*;
use vist_core::rf::{self, Gaussian2d};
use vist_core::Tensor;

#[test]
fn white_noise_sta_recovers_the_field() {
    common::rf_recovery(4).assert();
}

/// Block means computed pixel by pixel with exact integer block edges.
fn block_means(map: &Tensor<f64>, g: usize) -> Vec<f64> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut out = vec![0.0; g * g];
    for (k, o) in out.iter_mut().enumerate() {
        let (bi, bj) = (k / g, k % g);
        let (r0, r1, c0, c1) = (bi * h / g, (bi + 1) * h / g, bj * w / g, (bj + 1) * w / g);
        let mut s = 0.0;
        for r in r0..r1 {
            for c in c0..c1 {
                s += map.data()[r * w + c];
            }
        }
        *o = s / ((r1 - r0) * (c1 - c0)) as f64;
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn gaussian_fit_recovers_noise_free_parameters(cx in 8.0..16.0f64, cy in 8.0..16.0f64,
                                                   sx in 1.5..4.0f64, sy in 1.5..4.0f64,
                                                   angle in -0.7..0.7f64) {
        let truth = Gaussian2d { cx, cy, sx, sy, angle, amplitude: 1.0 };
        let fit = rf::fit_gaussian2d(&truth.render(24, 24)).unwrap();
        let p = fit.params;
        prop_assert!((p.cx - cx).abs() < 1e-3 && (p.cy - cy).abs() < 1e-3, "{p:?}");
        prop_assert!(fit.residual < 1e-8);
    }

    #[test]
    fn normalized_maps_have_unit_norm_and_keep_direction(v in prop::collection::vec(-3.0..3.0f64, 36)) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
        let map = Tensor::new([6, 6], v).unwrap();
        let m = rf::normalize_rf(&map).unwrap();
        prop_assert!((m.norm() - 1.0).abs() < 1e-12);
        prop_assert!(common::pearson(m.data(), map.data()) > 1.0 - 1e-12);
    }

    #[test]
    fn area_mean_conserves_mass(h in 3usize..20, w in 3usize..20, g in 1usize..4, seed in 0u64..1000) {
        let map = Tensor::from_fn([h, w], |i| ((i as u64 * 2654435761 + seed) % 97) as f64 / 97.0);
        let got = rf::area_mean(&map, g).unwrap();
        let cell = (h as f64 / g as f64) * (w as f64 / g as f64);
        prop_assert!((got.sum() * cell - map.sum()).abs() < 1e-9);
    }

    #[test]
    fn area_mean_matches_block_reference(h in 4usize..20, g in 1usize..4, seed in 0u64..1000) {
        prop_assume!(h % g == 0);
        let map = Tensor::from_fn([h, h], |i| ((i as u64 * 2654435761 + seed) % 97) as f64 / 97.0);
        let got = rf::area_mean(&map, g).unwrap();
        for (a, b) in got.data().iter().zip(block_means(&map, g)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn separable_sta_is_split_into_its_factors() {
    let spatial = Gaussian2d {
        cx: 5.0,
        cy: 4.0,
        sx: 1.5,
        sy: 2.0,
        angle: 0.3,
        amplitude: 1.0,
    }
    .render(10, 10);
    let temporal = [0.1, 0.8, -0.4, -0.2, 0.05];
    let sta = Tensor::from_fn([temporal.len(), 10, 10], |i| temporal[i / 100] * spatial.data()[i % 100]);
    let sep = rf::svd_separate(&sta).unwrap();
    let cc = common::pearson(sep.spatial.data(), spatial.data());
    assert!(cc > 1.0 - 1e-9, "{cc}");
    let back = sep.reconstruct();
    for (a, b) in back.data().iter().zip(sta.data()) {
        assert!((a - b).abs() < 1e-10);
    }
}
