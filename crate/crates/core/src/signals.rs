//! Spike trains, firing rates and the evaluation metrics: Pearson
//! correlation and the spike-duration KL divergence (SD-KL).

use crate::error::{Error, Result};
use crate::kv::{sidecar_path, KeyValues};
use crate::tensor::{io, Tensor};
use std::path::Path;

pub const DEFAULT_BIN_MS: f64 = 33.0;

/// Spike counts laid out `trials x neurons x bins`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeRaster {
    pub trials: usize,
    pub neurons: usize,
    pub bins: usize,
    pub bin_ms: f64,
    counts: Vec<u32>,
}

impl SpikeRaster {
    pub fn new(trials: usize, neurons: usize, bins: usize, bin_ms: f64, counts: Vec<u32>) -> Result<Self> {
        if !(bin_ms > 0.0) {
            return Err(Error::data(format!("bin width must be positive, got {bin_ms}")));
        }
        if counts.len() != trials * neurons * bins {
            return Err(Error::data(format!(
                "raster {trials}x{neurons}x{bins} needs {} counts, got {}",
                trials * neurons * bins,
                counts.len()
            )));
        }
        Ok(SpikeRaster {
            trials,
            neurons,
            bins,
            bin_ms,
            counts,
        })
    }

    pub fn count(&self, trial: usize, neuron: usize, bin: usize) -> u32 {
        self.counts[(trial * self.neurons + neuron) * self.bins + bin]
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let t = Tensor::<f32>::new(
            [self.trials, self.neurons, self.bins],
            self.counts.iter().map(|&c| c as f32).collect(),
        )?;
        io::save(&t, &path)?;
        let mut kv = KeyValues::new();
        kv.set("kind", "raster")
            .set("neurons", self.neurons)
            .set("trials", self.trials)
            .set("bin_ms", self.bin_ms);
        kv.save(sidecar_path(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let t = io::load::<f32>(&path)?;
        let kv = KeyValues::load(sidecar_path(&path))?;
        let [trials, neurons, bins] = match t.shape() {
            &[a, b, c] => [a, b, c],
            s => return Err(Error::format("ndim", format!("raster must be 3-D, got {s:?}"))),
        };
        if kv.parse_req::<usize>("neurons")? != neurons || kv.parse_req::<usize>("trials")? != trials {
            return Err(Error::format("neurons", "sidecar disagrees with tensor shape"));
        }
        let counts = t
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as u32)
                } else {
                    Err(Error::format("payload", format!("non-integral spike count {v}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(trials, neurons, bins, kv.parse_req("bin_ms")?, counts)
    }
}

/// Firing rates laid out `neurons x bins` (mean spikes per bin).
#[derive(Clone, Debug, PartialEq)]
pub struct RateMatrix {
    pub neurons: usize,
    pub bins: usize,
    pub bin_ms: f64,
    data: Vec<f64>,
}

impl RateMatrix {
    pub fn new(neurons: usize, bins: usize, bin_ms: f64, data: Vec<f64>) -> Result<Self> {
        if data.len() != neurons * bins {
            return Err(Error::data(format!(
                "rate matrix {neurons}x{bins} needs {} values, got {}",
                neurons * bins,
                data.len()
            )));
        }
        Ok(RateMatrix {
            neurons,
            bins,
            bin_ms,
            data,
        })
    }

    /// From a time-major `[T, neurons]` tensor such as a model prediction.
    pub fn from_time_major<S: crate::Scalar>(t: &Tensor<S>, bin_ms: f64) -> Result<Self> {
        let &[bins, neurons] = t.shape() else {
            return Err(Error::data(format!(
                "expected a [T, neurons] tensor, got {:?}",
                t.shape()
            )));
        };
        let tr = t.permute(&[1, 0])?;
        Self::new(neurons, bins, bin_ms, tr.to_f64_vec())
    }

    /// Time-major `[T, neurons]` copy.
    pub fn to_time_major<S: crate::Scalar>(&self) -> Tensor<S> {
        Tensor::from_fn([self.bins, self.neurons], |i| {
            S::cast(self.data[(i % self.neurons) * self.bins + i / self.neurons])
        })
    }

    pub fn row(&self, neuron: usize) -> &[f64] {
        &self.data[neuron * self.bins..(neuron + 1) * self.bins]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn select(&self, neurons: &[usize]) -> Self {
        let data = neurons.iter().flat_map(|&n| self.row(n).iter().copied()).collect();
        RateMatrix {
            neurons: neurons.len(),
            bins: self.bins,
            bin_ms: self.bin_ms,
            data,
        }
    }

    /// Bins `[start, start+len)` of every neuron.
    pub fn slice_bins(&self, start: usize, len: usize) -> Self {
        let data = (0..self.neurons)
            .flat_map(|n| self.row(n)[start..start + len].iter().copied())
            .collect();
        RateMatrix {
            neurons: self.neurons,
            bins: len,
            bin_ms: self.bin_ms,
            data,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::save(&Tensor::<f64>::new([self.neurons, self.bins], self.data.clone())?, &path)?;
        let mut kv = KeyValues::new();
        kv.set("kind", "rates")
            .set("neurons", self.neurons)
            .set("bins", self.bins)
            .set("bin_ms", self.bin_ms);
        kv.save(sidecar_path(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let t = io::load::<f64>(&path)?;
        let kv = KeyValues::load(sidecar_path(&path))?;
        let &[neurons, bins] = t.shape() else {
            return Err(Error::format("ndim", format!("rates must be 2-D, got {:?}", t.shape())));
        };
        if kv.parse_req::<usize>("neurons")? != neurons {
            return Err(Error::format("neurons", "sidecar disagrees with tensor shape"));
        }
        Self::new(neurons, bins, kv.parse_req("bin_ms")?, t.into_data())
    }
}

/// Counts spike times into bins of `bin_ms`; `spike_times[trial][neuron]`
/// must be sorted and lie in `[0, duration_ms)`. A trailing partial bin is
/// kept.
pub fn bin_spikes(spike_times: &[Vec<Vec<f64>>], duration_ms: f64, bin_ms: f64) -> Result<SpikeRaster> {
    if !(bin_ms > 0.0) || !(duration_ms >= 0.0) {
        return Err(Error::data(format!(
            "invalid bin width {bin_ms} or duration {duration_ms}"
        )));
    }
    let trials = spike_times.len();
    let neurons = spike_times.first().map_or(0, |t| t.len());
    let bins = (duration_ms / bin_ms).ceil() as usize;
    let mut counts = vec![0u32; trials * neurons * bins];
    for (tr, per_neuron) in spike_times.iter().enumerate() {
        if per_neuron.len() != neurons {
            return Err(Error::data(format!(
                "trial {tr} has {} neurons, expected {neurons}",
                per_neuron.len()
            )));
        }
        for (n, times) in per_neuron.iter().enumerate() {
            let mut prev = f64::NEG_INFINITY;
            for &t in times {
                if !(0.0..duration_ms).contains(&t) {
                    return Err(Error::data(format!(
                        "spike at {t} ms outside [0, {duration_ms}) (trial {tr}, neuron {n})"
                    )));
                }
                if t < prev {
                    return Err(Error::data(format!(
                        "unsorted spike times (trial {tr}, neuron {n})"
                    )));
                }
                prev = t;
                let b = ((t / bin_ms) as usize).min(bins - 1);
                counts[(tr * neurons + n) * bins + b] += 1;
            }
        }
    }
    SpikeRaster::new(trials, neurons, bins, bin_ms, counts)
}

pub fn average_trials(raster: &SpikeRaster) -> Result<RateMatrix> {
    if raster.trials == 0 {
        return Err(Error::data("cannot average a raster with zero trials"));
    }
    let per = raster.neurons * raster.bins;
    let mut sum = vec![0.0f64; per];
    for tr in 0..raster.trials {
        for (s, &c) in sum.iter_mut().zip(&raster.counts[tr * per..(tr + 1) * per]) {
            *s += c as f64;
        }
    }
    let r = raster.trials as f64;
    sum.iter_mut().for_each(|s| *s /= r);
    RateMatrix::new(raster.neurons, raster.bins, raster.bin_ms, sum)
}

/// Lengths of maximal runs of bins strictly above `threshold`.
pub fn extract_durations_above(row: &[f64], threshold: f64) -> Vec<usize> {
    let mut out = Vec::new();
    let mut run = 0usize;
    for &v in row {
        if v > threshold {
            run += 1;
        } else if run > 0 {
            out.push(run);
            run = 0;
        }
    }
    if run > 0 {
        out.push(run);
    }
    out
}

/// Lengths of maximal runs of strictly positive bins.
pub fn extract_durations(row: &[f64]) -> Vec<usize> {
    extract_durations_above(row, 0.0)
}

/// A density sampled on a uniform grid, normalized to sum 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Density {
    pub grid: Vec<f64>,
    pub p: Vec<f64>,
    pub bandwidth: f64,
}

/// Smallest admissible kernel bandwidth, in bins.
pub const MIN_BANDWIDTH: f64 = 0.5;

/// Scott's rule `n^(-1/5) * s` with `s` the sample standard deviation,
/// floored at [`MIN_BANDWIDTH`].
pub fn scott_bandwidth(durations: &[usize]) -> f64 {
    let n = durations.len();
    if n < 2 {
        return MIN_BANDWIDTH;
    }
    let nf = n as f64;
    let mean = durations.iter().map(|&d| d as f64).sum::<f64>() / nf;
    let var = durations
        .iter()
        .map(|&d| (d as f64 - mean).powi(2))
        .sum::<f64>()
        / (nf - 1.0);
    (nf.powf(-0.2) * var.sqrt()).max(MIN_BANDWIDTH)
}

pub fn uniform_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    let step = (hi - lo) / (points - 1) as f64;
    (0..points).map(|k| lo + step * k as f64).collect()
}

fn kde_on(durations: &[usize], grid: &[f64], h: f64) -> Result<Vec<f64>> {
    let inv = 1.0 / (2.0 * h * h);
    let mut p: Vec<f64> = grid
        .iter()
        .map(|&x| {
            durations
                .iter()
                .map(|&d| (-(x - d as f64).powi(2) * inv).exp())
                .sum()
        })
        .collect();
    let total: f64 = p.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Estimation(
            "density vanishes on the evaluation grid".into(),
        ));
    }
    p.iter_mut().for_each(|v| *v /= total);
    Ok(p)
}

/// Gaussian KDE of `durations` on `grid_points` uniform points spanning
/// `[grid_min, grid_max]`.
pub fn kde(durations: &[usize], grid_min: f64, grid_max: f64, grid_points: usize) -> Result<Density> {
    if durations.is_empty() {
        return Err(Error::EmptyDurations);
    }
    if grid_points < 2 || !(grid_max > grid_min) {
        return Err(Error::config(format!(
            "kde grid needs >= 2 points over a nonempty range, got {grid_points} over [{grid_min}, {grid_max}]"
        )));
    }
    let grid = uniform_grid(grid_min, grid_max, grid_points);
    let bandwidth = scott_bandwidth(durations);
    let p = kde_on(durations, &grid, bandwidth)?;
    Ok(Density { grid, p, bandwidth })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SdKlConfig {
    pub grid_points: usize,
    /// Probability floor applied to both densities before the log.
    pub eps: f64,
    pub clip_max: f64,
    /// Bins strictly above this rate count as firing.
    pub threshold: f64,
    /// Pool durations over neurons instead of averaging per-neuron scores.
    pub pooled: bool,
}

impl Default for SdKlConfig {
    fn default() -> Self {
        SdKlConfig {
            grid_points: 256,
            eps: 1e-12,
            clip_max: 1000.0,
            threshold: 0.0,
            pooled: false,
        }
    }
}

/// KL(predicted || target) between the KDE-smoothed duration distributions.
pub fn sd_kl_durations(target: &[usize], predicted: &[usize], cfg: &SdKlConfig) -> Result<f64> {
    match (target.is_empty(), predicted.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(cfg.clip_max),
        _ => {}
    }
    let (ht, hp) = (scott_bandwidth(target), scott_bandwidth(predicted));
    let pad = ht.max(hp);
    let all = target.iter().chain(predicted);
    let lo = *all.clone().min().expect("nonempty") as f64 - pad;
    let hi = *all.max().expect("nonempty") as f64 + pad;
    let grid = uniform_grid(lo, hi, cfg.grid_points.max(2));
    let pt = kde_on(target, &grid, ht)?;
    let pp = kde_on(predicted, &grid, hp)?;
    let kl: f64 = pp
        .iter()
        .zip(&pt)
        .map(|(&p, &q)| {
            let (p, q) = (p.max(cfg.eps), q.max(cfg.eps));
            p * (p / q).ln()
        })
        .sum();
    Ok(kl.clamp(0.0, cfg.clip_max))
}

pub fn sd_kl(target: &[f64], predicted: &[f64], cfg: &SdKlConfig) -> Result<f64> {
    if target.len() != predicted.len() {
        return Err(Error::data(format!(
            "sd_kl length mismatch: {} vs {}",
            target.len(),
            predicted.len()
        )));
    }
    sd_kl_durations(
        &extract_durations_above(target, cfg.threshold),
        &extract_durations_above(predicted, cfg.threshold),
        cfg,
    )
}

fn check_same(a: &RateMatrix, b: &RateMatrix) -> Result<()> {
    if a.neurons != b.neurons || a.bins != b.bins {
        return Err(Error::data(format!(
            "rate matrices differ in shape: {}x{} vs {}x{}",
            a.neurons, a.bins, b.neurons, b.bins
        )));
    }
    Ok(())
}

pub fn per_neuron_sd_kl(target: &RateMatrix, predicted: &RateMatrix, cfg: &SdKlConfig) -> Result<Vec<f64>> {
    check_same(target, predicted)?;
    (0..target.neurons)
        .map(|n| sd_kl(target.row(n), predicted.row(n), cfg))
        .collect()
}

/// Population SD-KL: mean of per-neuron scores, or a single score over the
/// pooled durations when `cfg.pooled` is set.
pub fn mean_sd_kl(target: &RateMatrix, predicted: &RateMatrix, cfg: &SdKlConfig) -> Result<f64> {
    check_same(target, predicted)?;
    if cfg.pooled {
        let pool = |m: &RateMatrix| -> Vec<usize> {
            (0..m.neurons)
                .flat_map(|n| extract_durations_above(m.row(n), cfg.threshold))
                .collect()
        };
        return sd_kl_durations(&pool(target), &pool(predicted), cfg);
    }
    let scores = per_neuron_sd_kl(target, predicted, cfg)?;
    Ok(scores.iter().sum::<f64>() / scores.len().max(1) as f64)
}

/// Pearson correlation; a zero-variance input yields 0.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::data(format!(
            "pearson length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::data("pearson needs at least two samples"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

pub fn per_neuron_cc(target: &RateMatrix, predicted: &RateMatrix) -> Result<Vec<f64>> {
    check_same(target, predicted)?;
    (0..target.neurons)
        .map(|n| pearson(target.row(n), predicted.row(n)))
        .collect()
}

pub fn mean_cc(target: &RateMatrix, predicted: &RateMatrix) -> Result<f64> {
    let cc = per_neuron_cc(target, predicted)?;
    Ok(cc.iter().sum::<f64>() / cc.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binning_hand_example() {
        let r = bin_spikes(&[vec![vec![0.0, 10.0, 40.0]]], 99.0, 33.0).unwrap();
        assert_eq!(r.bins, 3);
        assert_eq!((r.count(0, 0, 0), r.count(0, 0, 1), r.count(0, 0, 2)), (2, 1, 0));
        let partial = bin_spikes(&[vec![vec![99.5]]], 100.0, 33.0).unwrap();
        assert_eq!(partial.bins, 4);
        assert_eq!(partial.count(0, 0, 3), 1);
    }

    #[test]
    fn binning_rejects_bad_times() {
        assert!(matches!(bin_spikes(&[vec![vec![5.0, 1.0]]], 10.0, 1.0), Err(Error::Data(_))));
        assert!(matches!(bin_spikes(&[vec![vec![10.0]]], 10.0, 1.0), Err(Error::Data(_))));
        assert!(matches!(bin_spikes(&[vec![vec![-0.1]]], 10.0, 1.0), Err(Error::Data(_))));
    }

    #[test]
    fn empty_raster_is_zero() {
        let r = bin_spikes(&[vec![vec![], vec![]]], 330.0, 33.0).unwrap();
        assert_eq!(r.total(), 0);
        assert_eq!(r.counts().len(), 20);
    }

    #[test]
    fn trial_average_hand_values() {
        let r = SpikeRaster::new(2, 1, 1, 33.0, vec![0, 2]).unwrap();
        assert_eq!(average_trials(&r).unwrap().row(0), &[1.0]);
        let one = SpikeRaster::new(1, 2, 2, 33.0, vec![1, 0, 3, 4]).unwrap();
        assert_eq!(average_trials(&one).unwrap().data(), &[1.0, 0.0, 3.0, 4.0]);
    }

    #[test]
    fn durations_hand_trace() {
        assert!(extract_durations(&[0.0; 5]).is_empty());
        assert_eq!(
            extract_durations(&[0.0, 1.0, 2.0, 1.0, 0.0, 0.0, 3.0, 0.0]),
            vec![3, 1]
        );
        assert_eq!(extract_durations(&[1.0, 0.0, 1.0, 1.0]), vec![1, 2]);
    }

    #[test]
    fn kde_single_point_peaks_at_nearest_grid_point() {
        let d = kde(&[4], 0.0, 10.0, 11).unwrap();
        let arg = (0..11).max_by(|&a, &b| d.p[a].total_cmp(&d.p[b])).unwrap();
        assert_eq!(d.grid[arg], 4.0);
        assert!((d.p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let triple = kde(&[4, 4, 4], 0.0, 10.0, 11).unwrap();
        assert_eq!(triple.bandwidth, d.bandwidth);
        assert!(triple.p.iter().zip(&d.p).all(|(a, b)| (a - b).abs() <= 1e-15 * b.max(1e-300)));
        assert!(matches!(kde(&[], 0.0, 1.0, 4), Err(Error::EmptyDurations)));
    }

    #[test]
    fn sd_kl_conventions() {
        let cfg = SdKlConfig::default();
        let x = [0.0, 1.0, 1.0, 0.0, 2.0, 0.0, 1.0, 1.0, 1.0];
        assert!(sd_kl(&x, &x, &cfg).unwrap() < 1e-6);
        assert_eq!(sd_kl(&x, &[0.0; 9], &cfg).unwrap(), 1000.0);
        assert_eq!(sd_kl(&[0.0; 9], &x, &cfg).unwrap(), 1000.0);
        assert_eq!(sd_kl(&[0.0; 9], &[0.0; 9], &cfg).unwrap(), 0.0);
        assert!(sd_kl(&x, &x[..4], &cfg).is_err());
    }

    #[test]
    fn pearson_hand_values() {
        let a = [1.0, 2.0, 4.0, 3.0];
        assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((pearson(&a, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&a, &[2.0; 4]).unwrap(), 0.0);
        assert!(pearson(&a, &[1.0]).is_err());
    }

    #[test]
    fn time_major_round_trip() {
        let m = RateMatrix::new(2, 3, 33.0, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t: Tensor<f64> = m.to_time_major();
        assert_eq!(t.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(RateMatrix::from_time_major(&t, 33.0).unwrap(), m);
    }
}
