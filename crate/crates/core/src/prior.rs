//! Per-frame prior features: a fixed random patch embedding computed in
//! process, or feature cubes produced offline by a pretrained vision
//! transformer and stored as VIST files.

use crate::error::{Error, Result};
use crate::exec::for_each_chunk;
use crate::kv::{sidecar_path, KeyValues};
use crate::tensor::{io, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// Where a feature cube came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PriorSource {
    /// The in-process random patch embedding (the "layer 0" prior).
    StandIn,
    /// Per-patch mean intensity, a single channel with no learned features.
    PatchMean,
    /// Features written by an external extractor.
    Imported { layer: Option<PriorLayer>, model_tag: String },
}

/// Transformer layer whose features serve as the prior.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorLayer {
    /// `0` is the patch embedding alone.
    Index(u32),
    Last,
}

impl fmt::Display for PriorLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PriorLayer::Index(i) => write!(f, "{i}"),
            PriorLayer::Last => f.write_str("last"),
        }
    }
}

impl FromStr for PriorLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(PriorLayer::Last),
            _ => s
                .parse()
                .map(PriorLayer::Index)
                .map_err(|_| Error::config(format!("prior layer must be an index or `last`, got `{s}`"))),
        }
    }
}

/// Prior features laid out `[T, g, g, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCube {
    pub data: Tensor<f32>,
    pub source: PriorSource,
    /// Pixels per patch side, when known.
    pub patch: Option<usize>,
}

impl FeatureCube {
    pub fn new(data: Tensor<f32>, source: PriorSource) -> Result<Self> {
        match *data.shape() {
            [_, a, b, c] if a == b && a > 0 && c > 0 => {}
            ref s => {
                return Err(Error::config(format!(
                    "feature cube must be [T, g, g, C], got {s:?}"
                )))
            }
        }
        if !data.all_finite() {
            return Err(Error::data("feature cube holds non-finite values"));
        }
        Ok(FeatureCube {
            data,
            source,
            patch: None,
        })
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn grid(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[3]
    }

    /// `[C, T, g, g]`, the layout consumed by the network.
    pub fn channels_first(&self) -> Tensor<f32> {
        self.data.permute(&[3, 0, 1, 2]).expect("4-D cube")
    }

    /// Frames `[start, start+len)`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        Ok(FeatureCube {
            data: self.data.narrow(0, start, len)?,
            source: self.source.clone(),
            patch: self.patch,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbedConfig {
    /// Patch-grid side `g`.
    pub grid: usize,
    /// Pixels per patch side.
    pub patch: usize,
    /// Output channels.
    pub channels: usize,
    pub seed: u64,
}

impl Default for PatchEmbedConfig {
    fn default() -> Self {
        PatchEmbedConfig {
            grid: 16,
            patch: 6,
            channels: 64,
            seed: 0,
        }
    }
}

/// Bias-free linear map from each flattened patch to `channels` features.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    grid: usize,
    patch: usize,
    /// `[C, patch*patch]`.
    projection: Tensor<f64>,
}

impl PatchEmbed {
    /// Draws the projection from `N(0, 1/patch^2)` with a seeded generator.
    pub fn new(cfg: &PatchEmbedConfig) -> Result<Self> {
        if cfg.patch == 0 || cfg.channels == 0 || cfg.grid == 0 {
            return Err(Error::config("patch, channels and grid must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let p2 = cfg.patch * cfg.patch;
        let scale = 1.0 / cfg.patch as f64;
        let projection = Tensor::from_fn([cfg.channels, p2], |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        Ok(PatchEmbed {
            grid: cfg.grid,
            patch: cfg.patch,
            projection,
        })
    }

    pub fn from_projection(grid: usize, patch: usize, projection: Tensor<f64>) -> Result<Self> {
        if projection.ndim() != 2 || projection.shape()[1] != patch * patch {
            return Err(Error::config(format!(
                "projection must be [C, {}], got {:?}",
                patch * patch,
                projection.shape()
            )));
        }
        Ok(PatchEmbed {
            grid,
            patch,
            projection,
        })
    }

    pub fn channels(&self) -> usize {
        self.projection.shape()[0]
    }

    /// Embeds a `[T, H, W]` video with pixel values in `[0, 1]`.
    pub fn embed(&self, video: &Tensor<f64>) -> Result<FeatureCube> {
        let (t, h, w) = video_dims(video)?;
        let side = self.grid * self.patch;
        if h != side || w != side {
            return Err(Error::config(format!(
                "frame {h}x{w} does not tile into a {g}x{g} grid of {p}-pixel patches",
                g = self.grid,
                p = self.patch
            )));
        }
        let (g, p, c) = (self.grid, self.patch, self.channels());
        let proj = self.projection.data();
        let vd = video.data();
        let per_frame = g * g * c;
        let mut out = vec![0.0f32; t * per_frame];
        for_each_chunk(&mut out, per_frame, |f, dst| {
            let frame = &vd[f * h * w..(f + 1) * h * w];
            let mut buf = vec![0.0f64; p * p];
            for gy in 0..g {
                for gx in 0..g {
                    for dy in 0..p {
                        let row = &frame[(gy * p + dy) * w + gx * p..][..p];
                        buf[dy * p..(dy + 1) * p].copy_from_slice(row);
                    }
                    let cell = &mut dst[(gy * g + gx) * c..][..c];
                    for (k, o) in cell.iter_mut().enumerate() {
                        let wrow = &proj[k * p * p..(k + 1) * p * p];
                        *o = wrow.iter().zip(&buf).map(|(a, b)| a * b).sum::<f64>() as f32;
                    }
                }
            }
        });
        let mut cube = FeatureCube::new(Tensor::new([t, g, g, c], out)?, PriorSource::StandIn)?;
        cube.patch = Some(p);
        Ok(cube)
    }
}

fn video_dims(video: &Tensor<f64>) -> Result<(usize, usize, usize)> {
    match *video.shape() {
        [t, h, w] => Ok((t, h, w)),
        ref s => Err(Error::config(format!("video must be [T, H, W], got {s:?}"))),
    }
}

/// Maps 0-255 grayscale to `[0, 1]`.
pub fn normalize_video(video: &Tensor<f32>) -> Tensor<f64> {
    Tensor::from_fn(video.shape().to_vec(), |i| video.data()[i] as f64 / 255.0)
}

/// Single-channel prior holding each patch's mean intensity.
pub fn patch_mean_cube(video: &Tensor<f64>, grid: usize) -> Result<FeatureCube> {
    let (t, h, w) = video_dims(video)?;
    if grid == 0 || h != w || h % grid != 0 {
        return Err(Error::config(format!(
            "frame {h}x{w} does not tile into a {grid}x{grid} grid"
        )));
    }
    let p = h / grid;
    let mut out = Vec::with_capacity(t * grid * grid);
    for f in 0..t {
        let frame = &video.data()[f * h * w..(f + 1) * h * w];
        for gy in 0..grid {
            for gx in 0..grid {
                let mut s = 0.0;
                for dy in 0..p {
                    s += frame[(gy * p + dy) * w + gx * p..][..p].iter().sum::<f64>();
                }
                out.push((s / (p * p) as f64) as f32);
            }
        }
    }
    let mut cube = FeatureCube::new(Tensor::new([t, grid, grid, 1], out)?, PriorSource::PatchMean)?;
    cube.patch = Some(p);
    Ok(cube)
}

/// Places a row-major token sequence `[T, g*g, C]` onto its `[T, g, g, C]`
/// grid.
pub fn reverse_patch_map<S: crate::Scalar>(seq: &Tensor<S>) -> Result<Tensor<S>> {
    let &[t, n, c] = seq.shape() else {
        return Err(Error::config(format!(
            "token sequence must be [T, N, C], got {:?}",
            seq.shape()
        )));
    };
    let g = (n as f64).sqrt().round() as usize;
    if g * g != n {
        return Err(Error::config(format!("token count {n} is not a perfect square")));
    }
    seq.reshape([t, g, g, c])
}

/// Inverse of [`reverse_patch_map`].
pub fn flatten_patch_grid<S: crate::Scalar>(cube: &Tensor<S>) -> Result<Tensor<S>> {
    let &[t, g, g2, c] = cube.shape() else {
        return Err(Error::config(format!("grid must be [T, g, g, C], got {:?}", cube.shape())));
    };
    cube.reshape([t, g * g2, c])
}

pub fn save_features(cube: &FeatureCube, path: impl AsRef<Path>) -> Result<()> {
    io::save(&cube.data, &path)?;
    let mut kv = KeyValues::new();
    match &cube.source {
        PriorSource::StandIn => {
            kv.set("source", "standin").set("layer", 0);
        }
        PriorSource::PatchMean => {
            kv.set("source", "patch_mean");
        }
        PriorSource::Imported { layer, model_tag } => {
            kv.set("source", "imported");
            if let Some(l) = layer {
                kv.set("layer", l);
            }
            kv.set("model_tag", model_tag);
        }
    }
    kv.set("g", cube.grid());
    if let Some(p) = cube.patch {
        kv.set("patch", p);
    }
    kv.save(sidecar_path(path))
}

/// Loads a `[T, g, g, C]` cube. The sidecar is optional; when present its
/// grid side must match the tensor.
pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureCube> {
    let data = io::load::<f32>(&path)?;
    if data.ndim() != 4 {
        return Err(Error::format(
            "ndim",
            format!("feature cube must have 4 axes, found {}", data.ndim()),
        ));
    }
    if data.shape()[1] != data.shape()[2] {
        return Err(Error::format(
            "dims",
            format!("feature grid must be square, got {:?}", data.shape()),
        ));
    }
    let side = sidecar_path(&path);
    let kv = if side.exists() {
        KeyValues::load(side)?
    } else {
        KeyValues::new()
    };
    if let Some(g) = kv.parse_opt::<usize>("g")? {
        if g != data.shape()[1] {
            return Err(Error::format(
                "g",
                format!("sidecar grid {g} disagrees with tensor grid {}", data.shape()[1]),
            ));
        }
    }
    let layer = kv.parse_opt::<PriorLayer>("layer")?;
    let source = match kv.get("source") {
        Some("standin") => PriorSource::StandIn,
        Some("patch_mean") => PriorSource::PatchMean,
        _ => PriorSource::Imported {
            layer,
            model_tag: kv.get("model_tag").unwrap_or("unknown").to_string(),
        },
    };
    let mut cube = FeatureCube::new(data, source).map_err(|e| match e {
        Error::Config(d) | Error::Data(d) => Error::format("payload", d),
        other => other,
    })?;
    cube.patch = kv.parse_opt("patch")?;
    Ok(cube)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_video_embeds_to_zero() {
        let e = PatchEmbed::new(&PatchEmbedConfig {
            grid: 4,
            patch: 3,
            channels: 5,
            seed: 1,
        })
        .unwrap();
        let cube = e.embed(&Tensor::zeros([2, 12, 12])).unwrap();
        assert_eq!(cube.data.shape(), &[2, 4, 4, 5]);
        assert!(cube.data.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_projection_exposes_patch_pixels() {
        let p = 2;
        let eye = Tensor::from_fn([p * p, p * p], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        let e = PatchEmbed::from_projection(2, p, eye).unwrap();
        let video = Tensor::from_fn([1, 4, 4], |i| i as f64 / 16.0);
        let cube = e.embed(&video).unwrap();
        for gy in 0..2 {
            for gx in 0..2 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let px = video.at(&[0, gy * 2 + dy, gx * 2 + dx]) as f32;
                        assert_eq!(cube.data.at(&[0, gy, gx, dy * 2 + dx]), px);
                    }
                }
            }
        }
    }

    #[test]
    fn indivisible_frame_is_config_error() {
        let e = PatchEmbed::new(&PatchEmbedConfig::default()).unwrap();
        assert!(matches!(e.embed(&Tensor::zeros([1, 90, 90])), Err(Error::Config(_))));
    }

    #[test]
    fn reverse_map_is_row_major() {
        let seq = Tensor::<f32>::from_fn([1, 4, 1], |i| i as f32);
        let grid = reverse_patch_map(&seq).unwrap();
        assert_eq!(grid.shape(), &[1, 2, 2, 1]);
        assert_eq!(grid.at(&[0, 0, 1, 0]), 1.0);
        assert_eq!(grid.at(&[0, 1, 0, 0]), 2.0);
        assert!(reverse_patch_map(&Tensor::<f32>::zeros([1, 3, 1])).is_err());
    }

    #[test]
    fn patch_mean_of_constant_frame() {
        let v = Tensor::full([2, 8, 8], 0.25);
        let c = patch_mean_cube(&v, 4).unwrap();
        assert_eq!(c.data.shape(), &[2, 4, 4, 1]);
        assert!(c.data.data().iter().all(|&x| x == 0.25));
    }
}
