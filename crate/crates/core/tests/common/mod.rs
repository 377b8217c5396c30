//! Oracles and checks shared by the integration tests and the acceptance
//! harness. Every check returns a [`Check`] instead of panicking so the
//! harness can report all of them.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::{Duration, Instant};
use vist_core::gradcheck;
use vist_core::loss::{soft_dtw, soft_dtw_grad};
use vist_core::model::{Mode, ModelConfig, VistModel, CMST_KERNELS};
use vist_core::prior::PatchEmbedConfig;
use vist_core::rf::{self, Gaussian2d};
use vist_core::signals::{sd_kl, SdKlConfig};
use vist_core::synth::{self, PopulationSpec, StimulusSpec};
use vist_core::train::{LossKind, PriorChoice, TrainConfig, TrainData};
use vist_core::{Graph, Tensor};

pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name,
            passed,
            detail: detail.into(),
        }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }

    pub fn assert(&self) {
        assert!(self.passed, "{}", self.line());
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t0 = Instant::now();
    let out = f();
    (out, t0.elapsed())
}

pub fn rel(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Costs of every monotone alignment path between `a` (`p x dim`) and `b`
/// (`q x dim`), found by walking all step sequences.
pub fn path_costs(a: &[f64], b: &[f64], dim: usize) -> Vec<f64> {
    let (p, q) = (a.len() / dim, b.len() / dim);
    let cost = |i: usize, j: usize| -> f64 {
        (0..dim).map(|k| (a[i * dim + k] - b[j * dim + k]).powi(2)).sum()
    };
    let mut out = Vec::new();
    let mut stack = vec![(0usize, 0usize, cost(0, 0))];
    while let Some((i, j, c)) = stack.pop() {
        if i == p - 1 && j == q - 1 {
            out.push(c);
            continue;
        }
        for (di, dj) in [(1, 0), (0, 1), (1, 1)] {
            let (ni, nj) = (i + di, j + dj);
            if ni < p && nj < q {
                stack.push((ni, nj, c + cost(ni, nj)));
            }
        }
    }
    out
}

/// `-gamma * log(sum over paths of exp(-cost / gamma))`.
pub fn enumerated_soft_dtw(a: &[f64], b: &[f64], dim: usize, gamma: f64) -> f64 {
    let costs = path_costs(a, b, dim);
    let m = costs.iter().cloned().fold(f64::INFINITY, f64::min);
    let s: f64 = costs.iter().map(|c| (-(c - m) / gamma).exp()).sum();
    m - gamma * s.ln()
}

pub fn hard_dtw(a: &[f64], b: &[f64], dim: usize) -> f64 {
    path_costs(a, b, dim).into_iter().fold(f64::INFINITY, f64::min)
}

/// A random pair of sequences of length 1..=4 with 1..=3 features.
pub fn random_pair(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, usize) {
    let dim = rng.random_range(1..=3);
    let (p, q) = (rng.random_range(1..=4), rng.random_range(1..=4));
    let a = (0..p * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let b = (0..q * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    (a, b, dim)
}

pub fn soft_dtw_oracle(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut value_err, mut grad_err, mut hard_err) = (0.0f64, 0.0f64, 0.0f64);
    let h = 1e-6;
    for _ in 0..200 {
        let (a, b, dim) = random_pair(&mut rng);
        let gamma = rng.random_range(0.1..2.0);
        let v = soft_dtw(&a, &b, dim, gamma).unwrap();
        value_err = value_err.max(rel(v, enumerated_soft_dtw(&a, &b, dim, gamma), 1e-12));
        let g = soft_dtw_grad(&a, &b, dim, gamma).unwrap();
        for (which, grad) in [(0, &g.grad_a), (1, &g.grad_b)] {
            for i in 0..grad.len() {
                let at = |d: f64| {
                    let (mut x, mut y) = (a.clone(), b.clone());
                    if which == 0 {
                        x[i] += d;
                    } else {
                        y[i] += d;
                    }
                    soft_dtw(&x, &y, dim, gamma).unwrap()
                };
                let fd = (at(h) - at(-h)) / (2.0 * h);
                grad_err = grad_err.max(rel(grad[i], fd, 1e-6));
            }
        }
        let sharp = soft_dtw(&a, &b, dim, 1e-3).unwrap();
        hard_err = hard_err.max((sharp - hard_dtw(&a, &b, dim)).abs());
    }
    Check::new(
        "soft-DTW oracle",
        value_err < 1e-9 && grad_err < 1e-4 && hard_err < 1e-2,
        format!(
            "200 pairs: enumeration rel err {value_err:.2e} (< 1e-9), gradient rel err {grad_err:.2e} (< 1e-4), |gamma=1e-3 - hard DTW| {hard_err:.2e} (< 1e-2)"
        ),
    )
}

pub fn gradient_suite(seed: u64) -> Check {
    let (cases, dt) = timed(|| gradcheck::run_suite(seed));
    match cases {
        Err(e) => Check::new("gradient suite", false, format!("error: {e}")),
        Ok(cases) => {
            let failing: Vec<String> = cases
                .iter()
                .filter(|c| !c.passed())
                .map(|c| format!("{}: {}", c.name, c.report))
                .collect();
            let worst = |name: &str| {
                cases
                    .iter()
                    .filter(|c| (c.name == "full_model") == (name == "model"))
                    .map(|c| c.report.max_rel_err)
                    .fold(0.0, f64::max)
            };
            Check::new(
                "gradient suite",
                failing.is_empty() && dt < Duration::from_secs(60),
                format!(
                    "{} cases, worst op rel err {:.2e} (< {:.0e}), model rel err {:.2e} (< {:.0e}), {:.1} s (< 60 s){}",
                    cases.len(),
                    worst("op"),
                    gradcheck::OP_TOL,
                    worst("model"),
                    gradcheck::MODEL_TOL,
                    dt.as_secs_f64(),
                    if failing.is_empty() {
                        String::new()
                    } else {
                        format!("; failing: {}", failing.join("; "))
                    }
                ),
            )
        }
    }
}

/// Default architecture with narrow priors and feature stack, every
/// trainable tensor and running statistic redrawn so no zero gate or
/// identity normalization hides a path.
pub fn perturbed_model(seed: u64) -> VistModel<f32> {
    let cfg = ModelConfig {
        prior_channels: 4,
        hidden: 4,
        seed,
        ..ModelConfig::default()
    };
    let mut m = VistModel::<f32>::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xca5a);
    for p in m.params.iter_mut() {
        let var = p.name.ends_with("running_var");
        for v in p.value.data_mut() {
            *v = if var {
                rng.random_range(0.5..2.0)
            } else {
                rng.random_range(-0.5..0.5)
            };
        }
    }
    m
}

pub fn uniform_f32(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0f32..1.0))
}

pub fn causality(seed: u64) -> Check {
    let model = perturbed_model(seed);
    let c = &model.cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_len = 24;
    let rf = uniform_f32(&mut rng, &[c.neurons, c.grid, c.grid]);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let x = uniform_f32(&mut rng, &[1, c.prior_channels, t_len, c.grid, c.grid]);
        let t = rng.random_range(0..t_len - 1);
        let mut y = x.clone();
        let frame = c.grid * c.grid;
        for ch in 0..c.prior_channels {
            let base = ch * t_len * frame;
            for v in &mut y.data_mut()[base + (t + 1) * frame..base + t_len * frame] {
                *v += rng.random_range(-5.0f32..5.0);
            }
        }
        let (px, py) = (model.predict(&x, &rf).unwrap(), model.predict(&y, &rf).unwrap());
        let n = (t + 1) * c.neurons;
        for (a, b) in px.data()[..n].iter().zip(&py.data()[..n]) {
            worst = worst.max((a - b).abs() as f64);
        }
    }
    Check::new(
        "causality",
        worst < 1e-6,
        format!("50 (input, t) pairs in eval mode, max change at or before t {worst:.2e} (< 1e-6)"),
    )
}

pub fn adaln_identity(seed: u64) -> Check {
    let model = VistModel::<f32>::new(ModelConfig {
        seed,
        ..ModelConfig::default()
    })
    .unwrap();
    let c = &model.cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform_f32(&mut rng, &[2, c.neurons, 5, c.grid, c.grid]);
    let rf = uniform_f32(&mut rng, &[c.neurons, c.grid, c.grid]);
    let g = Graph::<f32>::new();
    let p = model.params.bind(&g, false);
    let y = model.adaln(&p, g.constant(x.clone()), g.constant(rf)).unwrap().value();
    let differing = x
        .data()
        .iter()
        .zip(y.data())
        .filter(|(a, b)| a.to_bits() != b.to_bits())
        .count();
    Check::new(
        "AdaLN-Zero identity",
        y.shape() == x.shape() && differing == 0,
        format!("fresh module on {:?}: {differing} of {} values differ bitwise", x.shape(), x.len()),
    )
}

pub fn cmst_schedule() -> Check {
    let model = VistModel::<f32>::new(ModelConfig::default()).unwrap();
    let c = &model.cfg;
    let expected: Vec<Vec<usize>> = CMST_KERNELS.iter().map(|k| k.to_vec()).collect();
    let schedule = model.cmst_schedule();
    let spatial_ok = model
        .params
        .iter()
        .filter(|p| p.name.starts_with("cmst.") && p.name.ends_with(".spatial.weight"))
        .all(|p| p.value.shape()[3..] == [3, 3]);
    let branches = model
        .params
        .iter()
        .filter(|p| p.name.ends_with(".spatial.weight"))
        .count();
    let g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros([1, c.prior_channels, 2, c.grid, c.grid]));
    let rf = g.constant(Tensor::zeros([c.neurons, c.grid, c.grid]));
    model.forward(&g, x, rf, Mode::Eval, false).unwrap();
    let mut chain = vec![g.labelled("adaln")[0].1.shape()[3]];
    for l in 0..c.levels() {
        chain.push(g.labelled(&format!("cmst.{l}"))[0].1.shape()[3]);
    }
    let want_branches: usize = expected.iter().map(|k| k.len()).sum();
    Check::new(
        "CMST schedule",
        schedule == expected && spatial_ok && branches == want_branches && chain == [16, 8, 4, 2, 1],
        format!(
            "temporal kernels {schedule:?}, spatial kernel 3 on all {branches} branches: {spatial_ok}, side chain {chain:?}"
        ),
    )
}

pub fn sd_kl_properties(seed: u64) -> Check {
    let cfg = SdKlConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut identical, mut scaled_ok) = (0.0f64, true);
    for _ in 0..50 {
        let len = rng.random_range(20..200);
        let trace = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..len)
                .map(|_| if rng.random_bool(0.4) { 0.0 } else { rng.random_range(0.1..5.0) })
                .collect()
        };
        let (mut a, b) = (trace(&mut rng), trace(&mut rng));
        a[0] = 1.0;
        identical = identical.max(sd_kl(&a, &a, &cfg).unwrap());
        let k = rng.random_range(0.01..100.0);
        let scale = |v: &[f64]| v.iter().map(|x| x * k).collect::<Vec<_>>();
        let base = sd_kl(&a, &b, &cfg).unwrap();
        for s in [sd_kl(&scale(&a), &scale(&b), &cfg).unwrap(), sd_kl(&a, &scale(&b), &cfg).unwrap()] {
            scaled_ok &= s.to_bits() == base.to_bits();
        }
    }
    let silent = vec![0.0; 30];
    let mut firing = vec![0.0; 30];
    firing[3] = 2.0;
    let empty = [sd_kl(&firing, &silent, &cfg).unwrap(), sd_kl(&silent, &firing, &cfg).unwrap()];
    Check::new(
        "SD-KL conventions",
        identical < 1e-6 && empty == [1000.0, 1000.0] && scaled_ok,
        format!(
            "identical max {identical:.2e} (< 1e-6), empty vs nonempty {empty:?} (= 1000), scaling bitwise invariant: {scaled_ok}"
        ),
    )
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

pub fn rf_recovery(seed: u64) -> Check {
    let side = 32;
    let ((cc, dist), dt) = timed(|| {
        let neuron = synth::random_population(&PopulationSpec::desk(1, side, seed)).unwrap().remove(0);
        let probe = synth::noise_calibrated(&neuron, side).unwrap();
        let noise = vist_core::prior::normalize_video(
            &synth::gen_video(&StimulusSpec::white_noise(20_000, side, seed ^ 0x4e)).unwrap(),
        );
        let (raster, _) = synth::simulate_population(&noise, &[probe], 1, seed).unwrap();
        let spikes: Vec<f64> = raster.counts().iter().map(|&c| c as f64).collect();
        let est = rf::estimate_rf(&noise, &spikes, neuron.temporal.len()).unwrap();
        let truth = neuron.spatial_rf(side).unwrap();
        let cc = pearson(est.spatial.data(), truth.data());
        let Gaussian2d { cx, cy, .. } = neuron.gaussian_px(side);
        (cc, (est.gaussian.cx - cx).hypot(est.gaussian.cy - cy))
    });
    Check::new(
        "RF recovery",
        cc > 0.8 && dist < 1.0 && dt < Duration::from_secs(120),
        format!(
            "20k white-noise bins at {side}px: map correlation {cc:.3} (> 0.8), centre error {dist:.3} px (< 1), {:.1} s (< 120 s)",
            dt.as_secs_f64()
        ),
    )
}

/// Desk dataset for the training criteria: the default synthetic
/// population and movies, shortened to 900 frames each, with an
/// 8-channel stand-in prior.
pub fn desk_data() -> TrainData {
    let mut cfg = synth::SynthConfig::desk(0);
    cfg.movie_a.frames = 900;
    cfg.movie_b.frames = 900;
    let ds = synth::make_dataset(&cfg).unwrap();
    let prior = PatchEmbedConfig {
        channels: 8,
        ..PatchEmbedConfig::default()
    };
    TrainData::from_dataset(&ds, &PriorChoice::StandIn(prior)).unwrap()
}

pub fn desk_model() -> ModelConfig {
    ModelConfig {
        hidden: 8,
        ..ModelConfig::default()
    }
}

/// Ten epochs of 64 two-clip batches of 48 frames.
pub fn desk_train(seed: u64, loss: LossKind) -> TrainConfig {
    TrainConfig {
        batch: 2,
        clip_len: 48,
        samples_per_epoch: 64,
        peak_lr: 2e-2,
        final_lr: 2e-3,
        seed,
        loss,
        ..TrainConfig::desk()
    }
}

/// Four neurons watching 240-frame 32-pixel movies through a 4x4 stand-in
/// prior: a dataset small enough for many short training runs.
pub fn small_data(seed: u64) -> TrainData {
    let mut cfg = synth::SynthConfig::desk(seed);
    cfg.population.neurons = 4;
    cfg.movie_a.frames = 240;
    cfg.movie_b.frames = 160;
    for side in [&mut cfg.movie_a.side, &mut cfg.movie_b.side, &mut cfg.population.side] {
        *side = 32;
    }
    cfg.trials = 5;
    let ds = synth::make_dataset(&cfg).unwrap();
    let prior = PatchEmbedConfig {
        grid: 4,
        patch: 8,
        channels: 4,
        seed,
    };
    TrainData::from_dataset(&ds, &PriorChoice::StandIn(prior)).unwrap()
}

pub fn small_model() -> ModelConfig {
    ModelConfig {
        hidden: 4,
        c3tcn_layers: 2,
        cmst_kernels: vec![vec![1, 5], vec![1, 3]],
        ..ModelConfig::default()
    }
}

pub fn small_train(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        warmup_epochs: 1.min(epochs - 1),
        swa_last: 2.min(epochs),
        batch: 2,
        clip_len: 24,
        samples_per_epoch: 8,
        peak_lr: 2e-2,
        final_lr: 2e-3,
        seed,
        eval_chunk: 64,
        ..TrainConfig::desk()
    }
}
