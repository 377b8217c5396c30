//! Synthetic retina: grayscale stimulus movies, white noise for receptive
//! field mapping, and a linear-nonlinear-Poisson ganglion cell population
//! with known receptive fields.
//!
//! Every random draw comes from a ChaCha stream selected by a fixed stream
//! id, so independent parts of a dataset can be generated in any order.

use crate::error::{Error, Result};
use crate::exec;
use crate::kv::KeyValues;
use crate::prior::normalize_video;
use crate::rf::{self, Gaussian2d, ReceptiveField};
use crate::signals::{average_trials, RateMatrix, SpikeRaster, DEFAULT_BIN_MS};
use crate::tensor::{io, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StimulusKind {
    /// Soft Gaussian blobs drifting slowly over a gray background.
    Blobs,
    /// Fast drifting gratings crossed by moving opaque occluders.
    Gratings,
    /// Independent binary pixels, 0 or 255.
    WhiteNoise,
    /// Temporally correlated 1/f noise mixed with drifting blobs.
    PinkNoiseMix,
}

impl fmt::Display for StimulusKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StimulusKind::Blobs => "blobs",
            StimulusKind::Gratings => "gratings",
            StimulusKind::WhiteNoise => "whitenoise",
            StimulusKind::PinkNoiseMix => "pink_noise_mix",
        })
    }
}

impl FromStr for StimulusKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(StimulusKind::Blobs),
            "gratings" => Ok(StimulusKind::Gratings),
            "whitenoise" => Ok(StimulusKind::WhiteNoise),
            "pink_noise_mix" => Ok(StimulusKind::PinkNoiseMix),
            _ => Err(Error::config(format!("unknown stimulus kind `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StimulusSpec {
    pub kind: StimulusKind,
    pub frames: usize,
    pub side: usize,
    pub fps: f64,
    pub seed: u64,
    /// Typical motion in pixels per frame.
    pub speed: f64,
}

impl StimulusSpec {
    /// Slow drifting blobs with little frame-to-frame change.
    pub fn movie_a(frames: usize, side: usize, seed: u64) -> Self {
        StimulusSpec {
            kind: StimulusKind::Blobs,
            frames,
            side,
            fps: 30.0,
            seed,
            speed: 0.8,
        }
    }

    /// Fast gratings and occluders with large frame-to-frame change.
    pub fn movie_b(frames: usize, side: usize, seed: u64) -> Self {
        StimulusSpec {
            kind: StimulusKind::Gratings,
            frames,
            side,
            fps: 30.0,
            seed,
            speed: 3.0,
        }
    }

    pub fn white_noise(frames: usize, side: usize, seed: u64) -> Self {
        StimulusSpec {
            kind: StimulusKind::WhiteNoise,
            frames,
            side,
            fps: 30.0,
            seed,
            speed: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.side == 0 {
            return Err(Error::config("stimulus needs at least one frame and pixel"));
        }
        if !(self.speed >= 0.0 && self.speed.is_finite()) || !(self.fps > 0.0) {
            return Err(Error::config("stimulus speed must be >= 0 and fps > 0"));
        }
        Ok(())
    }

    fn write_kv(&self, kv: &mut KeyValues, prefix: &str) {
        kv.set(&format!("{prefix}.kind"), self.kind)
            .set(&format!("{prefix}.frames"), self.frames)
            .set(&format!("{prefix}.side"), self.side)
            .set(&format!("{prefix}.fps"), self.fps)
            .set(&format!("{prefix}.seed"), self.seed)
            .set(&format!("{prefix}.speed"), self.speed);
    }
}

/// Shortest signed offset on a ring of circumference `n`.
fn wrap(d: f64, n: f64) -> f64 {
    d - n * (d / n).round()
}

struct Blob {
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    radius: f64,
    contrast: f64,
}

fn random_blobs(rng: &mut ChaCha8Rng, count: usize, side: f64, speed: f64) -> Vec<Blob> {
    (0..count)
        .map(|_| {
            let dir = rng.random_range(0.0..2.0 * PI);
            let v = speed * rng.random_range(0.5..1.5);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            Blob {
                x: rng.random_range(0.0..side),
                y: rng.random_range(0.0..side),
                vx: v * dir.cos(),
                vy: v * dir.sin(),
                radius: rng.random_range(side / 12.0..side / 5.0),
                contrast: sign * rng.random_range(0.3..0.5),
            }
        })
        .collect()
}

fn blob_field(blobs: &[Blob], t: f64, side: usize, out: &mut [f64]) {
    let n = side as f64;
    for b in blobs {
        let (cx, cy) = (b.x + b.vx * t, b.y + b.vy * t);
        let k = -0.5 / (b.radius * b.radius);
        for (i, o) in out.iter_mut().enumerate() {
            let dx = wrap((i % side) as f64 - cx, n);
            let dy = wrap((i / side) as f64 - cy, n);
            *o += b.contrast * (k * (dx * dx + dy * dy)).exp();
        }
    }
}

/// Bilinear lookup on a periodic `cells x cells` lattice spanning `side`.
fn lattice_sample(grid: &[f64], cells: usize, side: usize, out: &mut [f64], weight: f64) {
    let scale = cells as f64 / side as f64;
    for (i, o) in out.iter_mut().enumerate() {
        let gx = (i % side) as f64 * scale;
        let gy = (i / side) as f64 * scale;
        let (x0, y0) = (gx.floor() as usize % cells, gy.floor() as usize % cells);
        let (x1, y1) = ((x0 + 1) % cells, (y0 + 1) % cells);
        let (fx, fy) = (gx.fract(), gy.fract());
        let v = grid[y0 * cells + x0] * (1.0 - fx) * (1.0 - fy)
            + grid[y0 * cells + x1] * fx * (1.0 - fy)
            + grid[y1 * cells + x0] * (1.0 - fx) * fy
            + grid[y1 * cells + x1] * fx * fy;
        *o += weight * v;
    }
}

/// Generates a `[T, side, side]` movie with values in `[0, 255]`.
pub fn gen_video(spec: &StimulusSpec) -> Result<Tensor<f32>> {
    spec.validate()?;
    let (t_len, side) = (spec.frames, spec.side);
    let px = side * side;
    let n = side as f64;
    let mut rng = stream(spec.seed, 0);
    let mut field = vec![0.0f64; t_len * px];
    match spec.kind {
        StimulusKind::WhiteNoise => {
            for v in &mut field {
                *v = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
            }
        }
        StimulusKind::Blobs => {
            let blobs = random_blobs(&mut rng, 8, n, spec.speed);
            exec::for_each_chunk(&mut field, px, |t, frame| {
                frame.fill(0.5);
                blob_field(&blobs, t as f64, side, frame);
            });
        }
        StimulusKind::Gratings => {
            let gratings: Vec<(f64, f64, f64, f64, f64)> = (0..2)
                .map(|_| {
                    let theta = rng.random_range(0.0..PI);
                    let period = rng.random_range(n / 6.0..n / 3.0);
                    let v = spec.speed * rng.random_range(0.7..1.3);
                    let phase = rng.random_range(0.0..2.0 * PI);
                    (theta, period, v, phase, 0.25)
                })
                .collect();
            // occluders: (x, y, vx, vy, half-width, half-height, luminance)
            let occluders: Vec<[f64; 7]> = (0..3)
                .map(|_| {
                    let dir = rng.random_range(0.0..2.0 * PI);
                    let v = 2.0 * spec.speed * rng.random_range(0.5..1.5);
                    [
                        rng.random_range(0.0..n),
                        rng.random_range(0.0..n),
                        v * dir.cos(),
                        v * dir.sin(),
                        rng.random_range(n / 12.0..n / 6.0),
                        rng.random_range(n / 12.0..n / 6.0),
                        if rng.random_bool(0.5) { 1.0 } else { 0.0 },
                    ]
                })
                .collect();
            exec::for_each_chunk(&mut field, px, |t, frame| {
                let t = t as f64;
                for (i, o) in frame.iter_mut().enumerate() {
                    let (x, y) = ((i % side) as f64, (i / side) as f64);
                    let mut v = 0.5;
                    for &(theta, period, speed, phase, c) in &gratings {
                        let u = x * theta.cos() + y * theta.sin() - speed * t;
                        v += c * (2.0 * PI * u / period + phase).sin();
                    }
                    for oc in &occluders {
                        let dx = wrap(x - oc[0] - oc[2] * t, n);
                        let dy = wrap(y - oc[1] - oc[3] * t, n);
                        if dx.abs() <= oc[4] && dy.abs() <= oc[5] {
                            v = oc[6];
                        }
                    }
                    *o = v;
                }
            });
        }
        StimulusKind::PinkNoiseMix => {
            let blobs = random_blobs(&mut rng, 4, n, spec.speed);
            // one AR(1) lattice per octave, coarser octaves evolving slower
            let octaves: Vec<usize> = (1..)
                .map(|o| 1usize << o)
                .take_while(|&c| c <= side.max(2))
                .collect();
            let weight = 0.15 / (octaves.len() as f64).sqrt();
            let mut grids: Vec<Vec<f64>> = octaves
                .iter()
                .map(|&c| (0..c * c).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            for t in 0..t_len {
                let frame = &mut field[t * px..(t + 1) * px];
                frame.fill(0.5);
                for (o, &c) in octaves.iter().enumerate() {
                    let rho = 1.0 - (spec.speed + 0.05).min(1.0) * (o + 1) as f64 / octaves.len() as f64 * 0.5;
                    let innov = (1.0 - rho * rho).sqrt();
                    for g in &mut grids[o] {
                        *g = rho * *g + innov * rng.random_range(-1.0..1.0);
                    }
                    lattice_sample(&grids[o], c, side, frame, weight);
                }
                blob_field(&blobs, t as f64, side, frame);
            }
        }
    }
    Tensor::new(
        [t_len, side, side],
        field
            .into_iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0) as f32)
            .collect(),
    )
}

/// Mean absolute difference between consecutive frames.
pub fn mean_frame_difference(video: &Tensor<f32>) -> f64 {
    let sh = video.shape();
    let px = sh[1] * sh[2];
    let d = video.data();
    if sh[0] < 2 {
        return 0.0;
    }
    let total: f64 = (px..d.len()).map(|i| (d[i] - d[i - px]).abs() as f64).sum();
    total / (d.len() - px) as f64
}

pub const DEFAULT_TAU: usize = rf::DEFAULT_TAU;

/// Gamma-shaped lobe `(t/scale)^3 exp(-t/scale)` sampled at `0..tau`.
fn gamma_lobe(tau: usize, scale: f64) -> Vec<f64> {
    (0..tau)
        .map(|t| {
            let u = t as f64 / scale;
            u.powi(3) * (-u).exp()
        })
        .collect()
}

/// Unit-norm biphasic kernel indexed by lag (0 = current frame): a fast
/// positive lobe minus a slower negative one carrying `rebound` of its mass.
pub fn biphasic_kernel(tau: usize, fast: f64, slow: f64, rebound: f64) -> Vec<f64> {
    let (a, b) = (gamma_lobe(tau, fast), gamma_lobe(tau, slow));
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    let k: Vec<f64> = a
        .iter()
        .zip(&b)
        .map(|(x, y)| x / sa - rebound * y / sb)
        .collect();
    let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
    k.into_iter().map(|v| v / norm).collect()
}

/// Ground-truth linear-nonlinear-Poisson cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthNeuron {
    /// Receptive field in unit coordinates: centre in `[0, 1]`, sigmas as a
    /// fraction of the frame side. Amplitude is ignored.
    pub rf: Gaussian2d,
    /// Filter indexed by lag; negative weights make an OFF cell.
    pub temporal: Vec<f64>,
    pub gain: f64,
    pub threshold: f64,
    /// Spikes per bin cap.
    pub max_rate: f64,
}

impl SynthNeuron {
    /// Gaussian in pixel coordinates for a `side x side` frame.
    pub fn gaussian_px(&self, side: usize) -> Gaussian2d {
        let n = side as f64;
        Gaussian2d {
            cx: self.rf.cx * n - 0.5,
            cy: self.rf.cy * n - 0.5,
            sx: self.rf.sx * n,
            sy: self.rf.sy * n,
            angle: self.rf.angle,
            amplitude: 1.0,
        }
    }

    /// Unit-norm spatial map at `side x side`.
    pub fn spatial_rf(&self, side: usize) -> Result<Tensor<f64>> {
        rf::normalize_rf(&self.gaussian_px(side).render(side, side))
    }

    /// Ground truth in the form produced by receptive-field estimation.
    pub fn receptive_field(&self, side: usize) -> Result<ReceptiveField> {
        let spatial = self.spatial_rf(side)?;
        let g = self.gaussian_px(side);
        let amplitude = spatial.data().iter().cloned().fold(0.0, f64::max);
        Ok(ReceptiveField {
            spatial,
            temporal: self.temporal.clone(),
            gaussian: Gaussian2d { amplitude, ..g }.canonical(),
            residual: 0.0,
            converged: true,
        })
    }

    fn rate(&self, drive: f64) -> f64 {
        let x = self.gain * drive - self.threshold;
        // softplus without overflow
        let sp = if x > 30.0 { x } else { x.exp().ln_1p() };
        sp.clamp(0.0, self.max_rate)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PopulationSpec {
    pub neurons: usize,
    pub tau: usize,
    /// Frame side the gains are calibrated for.
    pub side: usize,
    pub max_rate: f64,
    pub seed: u64,
}

impl PopulationSpec {
    pub fn desk(neurons: usize, side: usize, seed: u64) -> Self {
        PopulationSpec {
            neurons,
            tau: DEFAULT_TAU,
            side,
            max_rate: 6.0,
            seed,
        }
    }
}

/// Random ON/OFF population tiling the central part of the frame.
///
/// Gains are divided by the RF mass at `spec.side`, so a uniform contrast
/// step `c` over the field moves the softplus argument by about
/// `c * gain_factor * sum(temporal)` with the factor drawn from `[10, 16]`.
/// Thresholds put the mean-gray rate at `softplus(b0)` with `b0` in
/// `[-1.5, -0.5]`.
pub fn random_population(spec: &PopulationSpec) -> Result<Vec<SynthNeuron>> {
    if spec.neurons == 0 || spec.tau == 0 {
        return Err(Error::config("population needs >= 1 neuron and tau >= 1"));
    }
    let mut rng = stream(spec.seed, 1);
    let cols = (spec.neurons as f64).sqrt().ceil() as usize;
    let rows = spec.neurons.div_ceil(cols);
    let mut out = Vec::with_capacity(spec.neurons);
    for i in 0..spec.neurons {
        let (r, c) = (i / cols, i % cols);
        let cell = |k: usize, m: usize| 0.2 + 0.6 * (k as f64 + 0.5) / m as f64;
        let jitter = 0.25 * 0.6 / cols.max(rows) as f64;
        let sigma = rng.random_range(0.04..0.08);
        let aspect: f64 = rng.random_range(0.75..1.33);
        let polarity = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let rf = Gaussian2d {
            cx: cell(c, cols) + rng.random_range(-jitter..jitter),
            cy: cell(r, rows) + rng.random_range(-jitter..jitter),
            sx: sigma * aspect.sqrt(),
            sy: sigma / aspect.sqrt(),
            angle: rng.random_range(-PI / 4.0..PI / 4.0),
            amplitude: 1.0,
        };
        let fast = rng.random_range(0.8..1.2);
        let temporal: Vec<f64> = biphasic_kernel(spec.tau, fast, 2.0 * fast, rng.random_range(0.75..0.95))
            .into_iter()
            .map(|v| polarity * v)
            .collect();
        let mut n = SynthNeuron {
            rf,
            temporal,
            gain: 0.0,
            threshold: 0.0,
            max_rate: spec.max_rate,
        };
        let mass: f64 = n.spatial_rf(spec.side)?.sum();
        n.gain = rng.random_range(10.0..16.0) / mass;
        let gray_drive = 0.5 * mass * n.temporal.iter().sum::<f64>();
        n.threshold = n.gain * gray_drive - rng.random_range(-1.5..-0.5);
        out.push(n);
    }
    Ok(out)
}

/// Noise-free rate of every neuron, `neurons x T`, for a `[T, H, W]` video
/// with values in `[0, 1]`. Frames before the first are taken equal to it.
pub fn ground_truth_rates(video: &Tensor<f64>, neurons: &[SynthNeuron]) -> Result<Vec<Vec<f64>>> {
    let &[t_len, h, w] = video.shape() else {
        return Err(Error::config(format!("video must be [T, H, W], got {:?}", video.shape())));
    };
    if h != w {
        return Err(Error::config(format!("video frames must be square, got {h}x{w}")));
    }
    for n in neurons {
        if n.temporal.len() > t_len {
            return Err(Error::config(format!(
                "temporal kernel of {} lags exceeds the {t_len}-frame video",
                n.temporal.len()
            )));
        }
    }
    let px = h * w;
    let rates = exec::map_indexed(neurons.len(), |i| -> Result<Vec<f64>> {
        let n = &neurons[i];
        let map = n.spatial_rf(h)?;
        let m = map.data();
        let proj: Vec<f64> = video
            .data()
            .chunks(px)
            .map(|f| f.iter().zip(m).map(|(a, b)| a * b).sum())
            .collect();
        Ok((0..t_len)
            .map(|t| {
                let drive: f64 = n
                    .temporal
                    .iter()
                    .enumerate()
                    .map(|(lag, k)| k * proj[t.saturating_sub(lag)])
                    .sum();
                n.rate(drive)
            })
            .collect())
    });
    rates.into_iter().collect()
}

/// Poisson spikes for `trials` repeats of the same video, plus the
/// ground-truth rates. Trial `r` draws from its own stream.
pub fn simulate_population(
    video: &Tensor<f64>,
    neurons: &[SynthNeuron],
    trials: usize,
    seed: u64,
) -> Result<(SpikeRaster, RateMatrix)> {
    if trials == 0 {
        return Err(Error::config("at least one trial is required"));
    }
    let rates = ground_truth_rates(video, neurons)?;
    let bins = video.shape()[0];
    let per_trial = exec::map_indexed(trials, |r| {
        let mut rng = stream(seed, 1000 + r as u64);
        let mut counts = Vec::with_capacity(neurons.len() * bins);
        for row in &rates {
            for &lambda in row {
                let c = if lambda > 0.0 {
                    Poisson::new(lambda).expect("finite positive rate").sample(&mut rng) as u32
                } else {
                    0
                };
                counts.push(c);
            }
        }
        counts
    });
    let raster = SpikeRaster::new(trials, neurons.len(), bins, DEFAULT_BIN_MS, per_trial.concat())?;
    let truth = RateMatrix::new(neurons.len(), bins, DEFAULT_BIN_MS, rates.concat())?;
    Ok((raster, truth))
}

/// Where dataset receptive fields come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RfSource {
    /// The generating Gaussians.
    Truth,
    /// Spike-triggered average of a simulated white-noise experiment.
    Sta,
}

impl fmt::Display for RfSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RfSource::Truth => "truth",
            RfSource::Sta => "sta",
        })
    }
}

impl FromStr for RfSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "truth" => Ok(RfSource::Truth),
            "sta" => Ok(RfSource::Sta),
            _ => Err(Error::config(format!("rf source must be `truth` or `sta`, got `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub movie_a: StimulusSpec,
    pub movie_b: StimulusSpec,
    pub population: PopulationSpec,
    pub trials: usize,
    pub seed: u64,
    pub rf_source: RfSource,
    pub noise_side: usize,
    pub noise_bins: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::desk(0)
    }
}

impl SynthConfig {
    /// 16 neurons, two 1800-frame 96-pixel movies, 20 trials.
    pub fn desk(seed: u64) -> Self {
        SynthConfig {
            movie_a: StimulusSpec::movie_a(1800, 96, seed.wrapping_add(11)),
            movie_b: StimulusSpec::movie_b(1800, 96, seed.wrapping_add(12)),
            population: PopulationSpec::desk(16, 96, seed.wrapping_add(13)),
            trials: 20,
            seed,
            rf_source: RfSource::Truth,
            noise_side: 32,
            noise_bins: 20_000,
        }
    }

    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "neurons",
        "side",
        "frames_a",
        "frames_b",
        "kind_a",
        "kind_b",
        "speed_a",
        "speed_b",
        "trials",
        "tau",
        "max_rate",
        "rf_source",
        "noise_side",
        "noise_bins",
    ];

    /// Desk defaults for `seed` overridden by the keys present in `kv`.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut c = Self::desk(kv.parse_opt("seed")?.unwrap_or(0));
        if let Some(v) = kv.parse_opt("neurons")? {
            c.population.neurons = v;
        }
        if let Some(side) = kv.parse_opt::<usize>("side")? {
            c.movie_a.side = side;
            c.movie_b.side = side;
            c.population.side = side;
        }
        macro_rules! take {
            ($key:literal, $field:expr) => {
                if let Some(v) = kv.parse_opt($key)? {
                    $field = v;
                }
            };
        }
        take!("frames_a", c.movie_a.frames);
        take!("frames_b", c.movie_b.frames);
        take!("kind_a", c.movie_a.kind);
        take!("kind_b", c.movie_b.kind);
        take!("speed_a", c.movie_a.speed);
        take!("speed_b", c.movie_b.speed);
        take!("trials", c.trials);
        take!("tau", c.population.tau);
        take!("max_rate", c.population.max_rate);
        take!("rf_source", c.rf_source);
        take!("noise_side", c.noise_side);
        take!("noise_bins", c.noise_bins);
        Ok(c)
    }

    fn manifest(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("seed", self.seed);
        self.movie_a.write_kv(&mut kv, "movie_a");
        self.movie_b.write_kv(&mut kv, "movie_b");
        kv.set("population.neurons", self.population.neurons)
            .set("population.tau", self.population.tau)
            .set("population.side", self.population.side)
            .set("population.max_rate", self.population.max_rate)
            .set("population.seed", self.population.seed)
            .set("trials", self.trials)
            .set("trial_seed", self.seed.wrapping_add(14))
            .set("rf_source", self.rf_source)
            .set("noise_side", self.noise_side)
            .set("noise_bins", self.noise_bins)
            .set("noise_seed", self.seed.wrapping_add(15))
            .set("bin_ms", DEFAULT_BIN_MS);
        kv
    }
}

/// One simulated recording of a movie.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    /// `[T, side, side]`, values in `[0, 255]`.
    pub video: Tensor<f32>,
    /// Trial-averaged spike counts.
    pub rates: RateMatrix,
    pub truth: RateMatrix,
    pub raster: SpikeRaster,
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub neurons: Vec<SynthNeuron>,
    pub movie_a: Recording,
    pub movie_b: Recording,
    /// Spatial maps at the movie side (`Truth`) or the noise side (`Sta`).
    pub rfs: Vec<ReceptiveField>,
}

fn record(spec: &StimulusSpec, neurons: &[SynthNeuron], trials: usize, seed: u64) -> Result<Recording> {
    let video = gen_video(spec)?;
    let (raster, truth) = simulate_population(&normalize_video(&video), neurons, trials, seed)?;
    Ok(Recording {
        rates: average_trials(&raster)?,
        video,
        truth,
        raster,
    })
}

/// Softplus gain applied to the white-noise drive, whose standard
/// deviation is `0.5` for any unit-norm field and kernel.
pub const NOISE_GAIN: f64 = 3.0;

/// Copy of `n` recalibrated for binary white noise at `side`: gain
/// [`NOISE_GAIN`] and a mean-luminance rate of `softplus(0)`, about 0.7
/// spikes per bin.
pub fn noise_calibrated(n: &SynthNeuron, side: usize) -> Result<SynthNeuron> {
    let mass: f64 = n.spatial_rf(side)?.sum();
    let mean_drive = 0.5 * mass * n.temporal.iter().sum::<f64>();
    Ok(SynthNeuron {
        gain: NOISE_GAIN,
        threshold: NOISE_GAIN * mean_drive,
        ..n.clone()
    })
}

/// Simulated white-noise experiment and STA-based RF estimate per neuron.
pub fn estimate_population_rfs(
    neurons: &[SynthNeuron],
    side: usize,
    bins: usize,
    seed: u64,
) -> Result<Vec<ReceptiveField>> {
    let noise = normalize_video(&gen_video(&StimulusSpec::white_noise(bins, side, seed))?);
    let probed = neurons
        .iter()
        .map(|n| noise_calibrated(n, side))
        .collect::<Result<Vec<_>>>()?;
    let (raster, _) = simulate_population(&noise, &probed, 1, seed)?;
    let tau = neurons.iter().map(|n| n.temporal.len()).max().unwrap_or(DEFAULT_TAU);
    (0..neurons.len())
        .map(|i| {
            let spikes: Vec<f64> = (0..bins).map(|b| raster.count(0, i, b) as f64).collect();
            rf::estimate_rf(&noise, &spikes, tau)
        })
        .collect()
}

/// Simulates both movies and the receptive fields.
pub fn make_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    let neurons = random_population(&cfg.population)?;
    let trial_seed = cfg.seed.wrapping_add(14);
    let movie_a = record(&cfg.movie_a, &neurons, cfg.trials, trial_seed)?;
    let movie_b = record(&cfg.movie_b, &neurons, cfg.trials, trial_seed.wrapping_add(1 << 32))?;
    let rfs = match cfg.rf_source {
        RfSource::Truth => neurons
            .iter()
            .map(|n| n.receptive_field(cfg.movie_a.side))
            .collect::<Result<_>>()?,
        RfSource::Sta => estimate_population_rfs(&neurons, cfg.noise_side, cfg.noise_bins, cfg.seed.wrapping_add(15))?,
    };
    Ok(SynthDataset {
        config: cfg.clone(),
        neurons,
        movie_a,
        movie_b,
        rfs,
    })
}

pub const MANIFEST: &str = "manifest.kv";

impl SynthDataset {
    /// Writes every artifact into `dir` as VIST files plus `manifest.kv`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (tag, rec) in [("a", &self.movie_a), ("b", &self.movie_b)] {
            io::save(&rec.video, dir.join(format!("video_{tag}.vist")))?;
            rec.rates.save(dir.join(format!("rates_{tag}.vist")))?;
            rec.truth.save(dir.join(format!("truth_{tag}.vist")))?;
            rec.raster.save(dir.join(format!("raster_{tag}.vist")))?;
        }
        rf::save_rfs(&self.rfs, dir.join("rfs.vist"))?;
        self.config.manifest().save(dir.join(MANIFEST))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_blobs_repeat() {
        let mut spec = StimulusSpec::movie_a(4, 16, 3);
        spec.speed = 0.0;
        let v = gen_video(&spec).unwrap();
        let px = 256;
        let d = v.data();
        assert!((1..4).all(|t| d[t * px..(t + 1) * px] == d[..px]));
    }

    #[test]
    fn kernel_is_unit_norm_and_biphasic() {
        let k = biphasic_kernel(15, 1.0, 2.0, 0.7);
        assert!((k.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(k.iter().any(|&v| v > 0.0) && k.iter().any(|&v| v < 0.0));
    }

    #[test]
    fn kernel_longer_than_video() {
        let n = random_population(&PopulationSpec::desk(1, 8, 0)).unwrap();
        let v = Tensor::zeros([5, 8, 8]);
        assert!(matches!(ground_truth_rates(&v, &n), Err(Error::Config(_))));
    }

    #[test]
    fn kinds_round_trip() {
        for k in [
            StimulusKind::Blobs,
            StimulusKind::Gratings,
            StimulusKind::WhiteNoise,
            StimulusKind::PinkNoiseMix,
        ] {
            assert_eq!(k.to_string().parse::<StimulusKind>().unwrap(), k);
        }
    }
}
