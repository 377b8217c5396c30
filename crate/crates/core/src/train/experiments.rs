use super::{train, EvalResult, LossKind, TrainConfig, TrainData, TrainOutcome};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
pub use crate::prior::PriorLayer;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::{self, Write as _};
use std::str::FromStr;

/// Positions of the `k` highest-scoring neurons, best first; ties keep the
/// lower index first.
pub fn tracked_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Output sets for one sweep size. Sizes of at least `tracked.len()` give
/// one set holding every tracked neuron plus seeded random others; smaller
/// sizes split the tracked neurons over several sets, topping up the last
/// one with others. Every tracked neuron lands in exactly one set.
pub fn sweep_groups(population: usize, tracked: &[usize], size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if size == 0 || size > population {
        return Err(Error::config(format!("sweep size {size} must be in 1..={population}")));
    }
    let mut others: Vec<usize> = (0..population).filter(|p| !tracked.contains(p)).collect();
    others.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ size as u64));
    let fill = |mut g: Vec<usize>| {
        g.extend(others.iter().copied().take(size - g.len()));
        g.sort_unstable();
        g
    };
    if size >= tracked.len() {
        return Ok(vec![fill(tracked.to_vec())]);
    }
    Ok(tracked.chunks(size).map(|c| fill(c.to_vec())).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub size: usize,
    pub mean_cc_tracked: f64,
    pub mean_sdkl_tracked: f64,
    /// Models trained for this size.
    pub runs: usize,
}

/// Trains one model per output set of every size and reports the
/// cross-movie metrics of the tracked neurons. The full-population point is
/// taken from `reference`, which must have been trained with the same
/// configs on all of `data`.
pub fn complementary_sweep(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &TrainData,
    sizes: &[usize],
    tracked: &[usize],
    reference: &TrainOutcome,
) -> Result<Vec<SweepRow>> {
    let n = data.neurons();
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let groups = sweep_groups(n, tracked, size, cfg.seed)?;
        let mut cc = vec![f64::NAN; tracked.len()];
        let mut kl = vec![f64::NAN; tracked.len()];
        let mut runs = 0;
        for g in &groups {
            let trained;
            let r: &EvalResult = if g.len() == n {
                &reference.cross
            } else {
                runs += 1;
                trained = train(model_cfg, cfg, &data.select(g)?, |_| {})?;
                &trained.cross
            };
            for (slot, t) in tracked.iter().enumerate() {
                if let Some(pos) = g.iter().position(|p| p == t) {
                    cc[slot] = r.per_neuron_cc[pos];
                    kl[slot] = r.per_neuron_sdkl[pos];
                }
            }
        }
        let k = tracked.len() as f64;
        rows.push(SweepRow {
            size,
            mean_cc_tracked: cc.iter().sum::<f64>() / k,
            mean_sdkl_tracked: kl.iter().sum::<f64>() / k,
            runs,
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("size,mean_cc_tracked,mean_sdkl_tracked\n");
    for r in rows {
        writeln!(s, "{},{},{}", r.size, r.mean_cc_tracked, r.mean_sdkl_tracked).expect("write to string");
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationFlags {
    pub no_vit_prior: bool,
    pub prior_layer: PriorLayer,
    pub no_adaln: bool,
    pub rmse_only: bool,
    pub no_cmst_multiscale: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            no_vit_prior: false,
            prior_layer: PriorLayer::Index(0),
            no_adaln: false,
            rmse_only: false,
            no_cmst_multiscale: false,
        }
    }
}

impl fmt::Display for AblationFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.no_vit_prior {
            parts.push("no_vit_prior".to_string());
        }
        if self.prior_layer != PriorLayer::Index(0) {
            parts.push(format!("prior_layer={}", self.prior_layer));
        }
        for (on, name) in [
            (self.no_adaln, "no_adaln"),
            (self.rmse_only, "rmse_only"),
            (self.no_cmst_multiscale, "no_cmst_multiscale"),
        ] {
            if on {
                parts.push(name.into());
            }
        }
        if parts.is_empty() {
            f.write_str("baseline")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

impl FromStr for AblationFlags {
    type Err = Error;

    /// `baseline`, or flags joined by `+`, e.g. `no_adaln+prior_layer=7`.
    fn from_str(s: &str) -> Result<Self> {
        let mut f = AblationFlags::default();
        if s == "baseline" {
            return Ok(f);
        }
        for part in s.split('+') {
            match part.trim() {
                "no_vit_prior" => f.no_vit_prior = true,
                "no_adaln" => f.no_adaln = true,
                "rmse_only" => f.rmse_only = true,
                "no_cmst_multiscale" => f.no_cmst_multiscale = true,
                p => match p.strip_prefix("prior_layer=") {
                    Some(l) => f.prior_layer = l.parse()?,
                    None => return Err(Error::config(format!("unknown ablation flag `{p}`"))),
                },
            }
        }
        if f.no_vit_prior && f.prior_layer != PriorLayer::Index(0) {
            return Err(Error::config("no_vit_prior excludes prior_layer"));
        }
        Ok(f)
    }
}

impl AblationFlags {
    pub fn apply(&self, model: &ModelConfig, cfg: &TrainConfig) -> (ModelConfig, TrainConfig) {
        let mut m = model.clone();
        let mut c = cfg.clone();
        if self.no_adaln {
            m.adaln = false;
        }
        if self.no_cmst_multiscale {
            m.cmst_multiscale = false;
        }
        if self.rmse_only {
            c.loss = LossKind::RmseOnly;
        }
        (m, c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub flags: AblationFlags,
    pub cross_cc: f64,
    pub cross_sdkl: f64,
    pub within_cc: f64,
    pub within_sdkl: f64,
}

/// One training run per flag set with shared seeds. `data_for` supplies the
/// dataset matching each set's prior.
pub fn ablate(
    runs: &[AblationFlags],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut data_for: impl FnMut(&AblationFlags) -> Result<TrainData>,
) -> Result<Vec<AblationRow>> {
    runs.iter()
        .map(|flags| {
            let (m, c) = flags.apply(model_cfg, cfg);
            let o = train(&m, &c, &data_for(flags)?, |_| {})?;
            Ok(AblationRow {
                flags: *flags,
                cross_cc: o.cross.mean_cc,
                cross_sdkl: o.cross.mean_sdkl,
                within_cc: o.within.mean_cc,
                within_sdkl: o.within.mean_sdkl,
            })
        })
        .collect()
}

pub fn write_ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,cross_cc,cross_sdkl,within_cc,within_sdkl\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{}",
            r.flags, r.cross_cc, r.cross_sdkl, r.within_cc, r.within_sdkl
        )
        .expect("write to string");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_cover_tracked_once() {
        let tracked = [3, 9, 1, 12];
        for size in [1, 3, 4, 8, 16] {
            let gs = sweep_groups(16, &tracked, size, 7).unwrap();
            assert!(gs.iter().all(|g| g.len() == size));
            for t in tracked {
                assert_eq!(gs.iter().filter(|g| g.contains(&t)).count(), 1, "size {size}");
            }
        }
    }

    #[test]
    fn flags_round_trip() {
        for s in ["baseline", "no_adaln+rmse_only", "prior_layer=last", "no_vit_prior+no_cmst_multiscale"] {
            assert_eq!(s.parse::<AblationFlags>().unwrap().to_string(), s);
        }
        assert!("no_vit_prior+prior_layer=7".parse::<AblationFlags>().is_err());
    }

    #[test]
    fn top_k_ordering() {
        assert_eq!(tracked_top_k(&[0.1, 0.5, 0.5, 0.9], 3), vec![3, 1, 2]);
    }
}
