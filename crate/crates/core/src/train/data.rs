use crate::error::{Error, Result};
use crate::prior::{self, FeatureCube, PatchEmbed, PatchEmbedConfig};
use crate::rf;
use crate::signals::RateMatrix;
use crate::synth::{SynthDataset, MANIFEST};
use crate::tensor::{io, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

/// How prior features are obtained for both movies.
#[derive(Clone, Debug, PartialEq)]
pub enum PriorChoice {
    /// Random patch embedding computed in process.
    StandIn(PatchEmbedConfig),
    /// One channel of per-patch mean intensity.
    PatchMean { grid: usize },
    /// Feature cubes on disk, one per movie.
    Files { a: PathBuf, b: PathBuf },
}

/// One movie prepared for the network.
#[derive(Clone, Debug, PartialEq)]
pub struct MovieData {
    /// `[C, T, g, g]`.
    pub prior: Tensor<f32>,
    /// Time-major targets `[T, neurons]`.
    pub rates: Tensor<f32>,
    pub bin_ms: f64,
}

impl MovieData {
    pub fn new(cube: &FeatureCube, rates: &RateMatrix) -> Result<Self> {
        if cube.frames() != rates.bins {
            return Err(Error::data(format!(
                "{} feature frames but {} rate bins",
                cube.frames(),
                rates.bins
            )));
        }
        Ok(MovieData {
            prior: cube.channels_first(),
            rates: rates.to_time_major(),
            bin_ms: rates.bin_ms,
        })
    }

    pub fn frames(&self) -> usize {
        self.prior.shape()[1]
    }

    /// Prior `[1, C, len, g, g]` for frames `[start, start+len)`.
    pub fn prior_window(&self, start: usize, len: usize) -> Result<Tensor<f32>> {
        let w = self.prior.narrow(1, start, len)?;
        let s = w.shape().to_vec();
        w.into_shape([1, s[0], s[1], s[2], s[3]])
    }

    pub fn target_matrix(&self, start: usize, len: usize) -> Result<RateMatrix> {
        RateMatrix::from_time_major(&self.rates.narrow(0, start, len)?, self.bin_ms)
    }
}

/// Two movies, the conditioning receptive fields and the ids of the
/// neurons they describe.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainData {
    pub a: MovieData,
    pub b: MovieData,
    /// `[neurons, g, g]`.
    pub rf: Tensor<f32>,
    pub neuron_ids: Vec<usize>,
}

fn cubes(choice: &PriorChoice, video_a: &Tensor<f32>, video_b: &Tensor<f32>) -> Result<(FeatureCube, FeatureCube)> {
    match choice {
        PriorChoice::StandIn(cfg) => {
            let pe = PatchEmbed::new(cfg)?;
            Ok((
                pe.embed(&prior::normalize_video(video_a))?,
                pe.embed(&prior::normalize_video(video_b))?,
            ))
        }
        PriorChoice::PatchMean { grid } => Ok((
            prior::patch_mean_cube(&prior::normalize_video(video_a), *grid)?,
            prior::patch_mean_cube(&prior::normalize_video(video_b), *grid)?,
        )),
        PriorChoice::Files { a, b } => Ok((prior::load_features(a)?, prior::load_features(b)?)),
    }
}

impl TrainData {
    /// `rfs` is an `[neurons, H, W]` stack at any resolution; it is
    /// downsampled to the feature grid.
    pub fn from_parts(
        cube_a: &FeatureCube,
        cube_b: &FeatureCube,
        rates_a: &RateMatrix,
        rates_b: &RateMatrix,
        rfs: &Tensor<f64>,
    ) -> Result<Self> {
        let g = cube_a.grid();
        if cube_b.grid() != g || cube_b.channels() != cube_a.channels() {
            return Err(Error::data("movie feature cubes differ in grid or channels"));
        }
        if rates_a.neurons != rates_b.neurons || rfs.shape()[0] != rates_a.neurons {
            return Err(Error::data(format!(
                "neuron counts differ: rates {} / {}, receptive fields {}",
                rates_a.neurons,
                rates_b.neurons,
                rfs.shape()[0]
            )));
        }
        Ok(TrainData {
            a: MovieData::new(cube_a, rates_a)?,
            b: MovieData::new(cube_b, rates_b)?,
            rf: rf::downsample_stack(rfs, g)?.cast(),
            neuron_ids: (0..rates_a.neurons).collect(),
        })
    }

    pub fn from_dataset(ds: &SynthDataset, choice: &PriorChoice) -> Result<Self> {
        let (ca, cb) = cubes(choice, &ds.movie_a.video, &ds.movie_b.video)?;
        let maps: Vec<Tensor<f64>> = ds
            .rfs
            .iter()
            .map(|r| {
                let s = r.spatial.shape().to_vec();
                r.spatial.reshape([1, s[0], s[1]])
            })
            .collect::<Result<_>>()?;
        let stack = Tensor::concat(&maps.iter().collect::<Vec<_>>(), 0)?;
        Self::from_parts(&ca, &cb, &ds.movie_a.rates, &ds.movie_b.rates, &stack)
    }

    /// Reads a dataset directory written by `SynthDataset::save`.
    pub fn load(dir: impl AsRef<Path>, choice: &PriorChoice) -> Result<Self> {
        let dir = dir.as_ref();
        if !dir.join(MANIFEST).exists() {
            return Err(Error::format(MANIFEST, format!("no manifest in {}", dir.display())));
        }
        let (va, vb) = (
            io::load::<f32>(dir.join("video_a.vist"))?,
            io::load::<f32>(dir.join("video_b.vist"))?,
        );
        let (ca, cb) = cubes(choice, &va, &vb)?;
        let ra = RateMatrix::load(dir.join("rates_a.vist"))?;
        let rb = RateMatrix::load(dir.join("rates_b.vist"))?;
        let rfs = rf::load_rf_stack(dir.join("rfs.vist"))?;
        Self::from_parts(&ca, &cb, &ra, &rb, &rfs)
    }

    pub fn neurons(&self) -> usize {
        self.neuron_ids.len()
    }

    pub fn channels(&self) -> usize {
        self.a.prior.shape()[0]
    }

    pub fn grid(&self) -> usize {
        self.a.prior.shape()[2]
    }

    /// Restriction to the listed positions (indices into `neuron_ids`).
    pub fn select(&self, positions: &[usize]) -> Result<Self> {
        let n = self.neurons();
        if let Some(&bad) = positions.iter().find(|&&p| p >= n) {
            return Err(Error::config(format!("neuron position {bad} out of range for {n}")));
        }
        let pick_cols = |m: &MovieData| -> Result<MovieData> {
            let t = m.frames();
            let src = m.rates.data();
            let data = (0..t)
                .flat_map(|i| positions.iter().map(move |&p| src[i * n + p]))
                .collect();
            Ok(MovieData {
                prior: m.prior.clone(),
                rates: Tensor::new([t, positions.len()], data)?,
                bin_ms: m.bin_ms,
            })
        };
        let maps: Vec<Tensor<f32>> = positions
            .iter()
            .map(|&p| self.rf.narrow(0, p, 1))
            .collect::<Result<_>>()?;
        Ok(TrainData {
            a: pick_cols(&self.a)?,
            b: pick_cols(&self.b)?,
            rf: Tensor::concat(&maps.iter().collect::<Vec<_>>(), 0)?,
            neuron_ids: positions.iter().map(|&p| self.neuron_ids[p]).collect(),
        })
    }
}

/// `count` clip start indices drawn uniformly from `0..=frames-clip_len`.
pub fn sample_clips(frames: usize, clip_len: usize, count: usize, seed: u64) -> Result<Vec<usize>> {
    if clip_len == 0 || clip_len > frames {
        return Err(Error::config(format!(
            "clip length {clip_len} must be in 1..={frames}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hi = frames - clip_len;
    Ok((0..count).map(|_| rng.random_range(0..=hi)).collect())
}

/// Stacks clips into a prior batch `[B, C, L, g, g]` and targets `[B, L, neurons]`.
pub fn gather_batch(movie: &MovieData, starts: &[usize], len: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let priors: Vec<Tensor<f32>> = starts
        .iter()
        .map(|&s| movie.prior_window(s, len))
        .collect::<Result<_>>()?;
    let targets: Vec<Tensor<f32>> = starts
        .iter()
        .map(|&s| {
            let r = movie.rates.narrow(0, s, len)?;
            let c = r.shape()[1];
            r.into_shape([1, len, c])
        })
        .collect::<Result<_>>()?;
    Ok((
        Tensor::concat(&priors.iter().collect::<Vec<_>>(), 0)?,
        Tensor::concat(&targets.iter().collect::<Vec<_>>(), 0)?,
    ))
}
