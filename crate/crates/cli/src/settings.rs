//! Command settings: a `key=value` config file plus `--set` overrides, and
//! the prior choice they describe.

use std::path::{Path, PathBuf};
use vist_core::kv::KeyValues;
use vist_core::prior::PatchEmbedConfig;
use vist_core::synth::MANIFEST;
use vist_core::train::PriorChoice;
use vist_core::{Error, Result};

/// Keys selecting the prior features for train, eval, sweep and ablate.
pub const PRIOR_KEYS: &[&str] = &["prior", "embed_channels", "embed_seed", "features_a", "features_b"];

/// Reads `config` (if any) and applies `overrides` on top, then rejects
/// every key outside `allowed`.
pub fn load(config: Option<&Path>, overrides: &[String], allowed: &[&str]) -> Result<KeyValues> {
    let mut kv = match config {
        Some(p) => KeyValues::load(p).map_err(|e| match e {
            Error::Io(io) => Error::Usage(format!("cannot read config {}: {io}", p.display())),
            other => other,
        })?,
        None => KeyValues::new(),
    };
    for s in overrides {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects key=value, got `{s}`")))?;
        kv.set(k.trim(), v.trim());
    }
    kv.check_keys(allowed)?;
    Ok(kv)
}

/// Every key in `lists`, for `load`.
pub fn allowed(lists: &[&[&'static str]]) -> Vec<&'static str> {
    lists.iter().flat_map(|l| l.iter().copied()).collect()
}

/// Keys of `kv` listed in `keys`, in their original order.
pub fn subset(kv: &KeyValues, keys: &[&str]) -> KeyValues {
    let mut out = KeyValues::new();
    for (k, v) in kv.iter().filter(|(k, _)| keys.contains(k)) {
        out.set(k, v);
    }
    out
}

/// Frame side of a saved dataset, from its manifest.
pub fn dataset_side(data: &Path) -> Result<usize> {
    let kv = KeyValues::load(data.join(MANIFEST)).map_err(|e| match e {
        Error::Io(_) => Error::Format {
            field: MANIFEST.into(),
            detail: format!("no manifest in {}", data.display()),
        },
        other => other,
    })?;
    kv.parse_req("movie_a.side")
}

/// The prior named by `kv` at feature grid `grid`. The stand-in embedding
/// uses patches of `side / grid` pixels.
pub fn prior_choice(kv: &KeyValues, data: &Path, grid: usize) -> Result<PriorChoice> {
    match kv.get("prior").unwrap_or("standin") {
        "standin" => {
            let side = dataset_side(data)?;
            if grid == 0 || side % grid != 0 {
                return Err(Error::Config(format!("frame side {side} does not tile into grid {grid}")));
            }
            let base = PatchEmbedConfig::default();
            Ok(PriorChoice::StandIn(PatchEmbedConfig {
                grid,
                patch: side / grid,
                channels: kv.parse_opt("embed_channels")?.unwrap_or(base.channels),
                seed: kv.parse_opt("embed_seed")?.unwrap_or(base.seed),
            }))
        }
        "patch_mean" => Ok(PriorChoice::PatchMean { grid }),
        "files" => {
            let path = |k: &str| {
                kv.get(k)
                    .map(PathBuf::from)
                    .ok_or_else(|| Error::Config(format!("prior=files needs `{k}`")))
            };
            Ok(PriorChoice::Files {
                a: path("features_a")?,
                b: path("features_b")?,
            })
        }
        other => Err(Error::Config(format!(
            "prior must be `standin`, `patch_mean` or `files`, got `{other}`"
        ))),
    }
}
