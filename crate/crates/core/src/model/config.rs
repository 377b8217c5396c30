use crate::error::{Error, Result};
use crate::kv::KeyValues;

/// Temporal kernel sizes of the four multiscale levels, coarse to fine
/// input resolution.
pub const CMST_KERNELS: [&[usize]; 4] = [&[1, 25], &[1, 13, 21], &[1, 7, 9], &[1, 3, 5]];

/// Where the multiscale block downsamples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolPlacement {
    /// Pool the block input; branches and residual both see the pooled map.
    First,
    /// Run the branches at full resolution and pool their merged output
    /// alongside the residual.
    AfterBranches,
}

impl PoolPlacement {
    fn as_str(self) -> &'static str {
        match self {
            PoolPlacement::First => "first",
            PoolPlacement::AfterBranches => "after_branches",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Output neurons `C'`.
    pub neurons: usize,
    /// Prior grid side `g`.
    pub grid: usize,
    /// Prior feature channels `C`.
    pub prior_channels: usize,
    /// Width of the temporal feature stack.
    pub hidden: usize,
    pub c3tcn_layers: usize,
    /// Temporal kernel of the depthwise feature-stack convolutions.
    pub c3tcn_kernel: usize,
    pub dilation_base: usize,
    pub spatial_kernel: usize,
    pub cmst_kernels: Vec<Vec<usize>>,
    pub cmst_dilation: usize,
    /// Dense instead of depthwise branch convolutions.
    pub cmst_dense: bool,
    /// When false only the `kt = 1` branch of each level is built.
    pub cmst_multiscale: bool,
    pub pool: PoolPlacement,
    pub adaln: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub ln_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Desk-scale network: 16 neurons on a 16x16 grid of 64-channel priors.
    fn default() -> Self {
        ModelConfig {
            neurons: 16,
            grid: 16,
            prior_channels: 64,
            hidden: 32,
            c3tcn_layers: 4,
            c3tcn_kernel: 3,
            dilation_base: 2,
            spatial_kernel: 3,
            cmst_kernels: CMST_KERNELS.iter().map(|k| k.to_vec()).collect(),
            cmst_dilation: 1,
            cmst_dense: false,
            cmst_multiscale: true,
            pool: PoolPlacement::First,
            adaln: true,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            ln_eps: 1e-6,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Full-size network: 90 neurons, 1024-channel transformer priors.
    pub fn full_scale() -> Self {
        ModelConfig {
            neurons: 90,
            prior_channels: 1024,
            hidden: 90,
            ..Self::default()
        }
    }

    /// The smallest network that still exercises every component: two
    /// neurons on a 4x4 grid with two multiscale levels.
    pub fn tiny() -> Self {
        ModelConfig {
            neurons: 2,
            grid: 4,
            prior_channels: 3,
            hidden: 2,
            c3tcn_layers: 2,
            cmst_kernels: vec![vec![1, 3], vec![1, 3, 5]],
            ..Self::default()
        }
    }

    pub fn levels(&self) -> usize {
        self.cmst_kernels.len()
    }

    /// Spatial side after the last multiscale level.
    pub fn readout_side(&self) -> usize {
        self.grid >> self.levels()
    }

    /// Temporal kernels actually built at `level`.
    pub fn level_kernels(&self, level: usize) -> Vec<usize> {
        let ks = &self.cmst_kernels[level];
        if self.cmst_multiscale {
            ks.clone()
        } else {
            vec![*ks.iter().min().expect("validated nonempty")]
        }
    }

    /// Number of past frames (beyond the current one) an output depends on.
    pub fn receptive_field(&self) -> usize {
        let stack: usize = (0..self.c3tcn_layers)
            .map(|i| (self.c3tcn_kernel - 1) * self.dilation_base.pow(i as u32))
            .sum();
        let cmst: usize = (0..self.levels())
            .map(|l| {
                self.level_kernels(l)
                    .iter()
                    .map(|&k| (k - 1) * self.cmst_dilation)
                    .max()
                    .unwrap_or(0)
            })
            .sum();
        stack + cmst
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.neurons == 0 || self.prior_channels == 0 || self.hidden == 0 {
            return bad("neurons, prior_channels and hidden must be >= 1".into());
        }
        if self.c3tcn_kernel == 0 || self.dilation_base == 0 || self.cmst_dilation == 0 {
            return bad("kernel and dilation sizes must be >= 1".into());
        }
        if self.spatial_kernel % 2 == 0 {
            return bad(format!("spatial kernel {} must be odd", self.spatial_kernel));
        }
        if self.levels() == 0 {
            return bad("at least one multiscale level is required".into());
        }
        for (l, ks) in self.cmst_kernels.iter().enumerate() {
            if ks.is_empty() {
                return bad(format!("level {l} has no temporal kernels"));
            }
            for (i, &k) in ks.iter().enumerate() {
                if k == 0 || k % 2 == 0 {
                    return bad(format!("level {l}: temporal kernel {k} must be odd and >= 1"));
                }
                if ks[..i].contains(&k) {
                    return bad(format!("level {l}: temporal kernel {k} repeated"));
                }
            }
        }
        if self.grid % (1 << self.levels()) != 0 || self.readout_side() == 0 {
            return bad(format!(
                "grid {} cannot be halved {} times",
                self.grid,
                self.levels()
            ));
        }
        if !(self.bn_eps > 0.0 && self.ln_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("normalization eps must be > 0 and momentum in [0, 1]".into());
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("neurons", self.neurons)
            .set("grid", self.grid)
            .set("prior_channels", self.prior_channels)
            .set("hidden", self.hidden)
            .set("c3tcn_layers", self.c3tcn_layers)
            .set("c3tcn_kernel", self.c3tcn_kernel)
            .set("dilation_base", self.dilation_base)
            .set("spatial_kernel", self.spatial_kernel)
            .set("cmst_kernels", format_kernels(&self.cmst_kernels))
            .set("cmst_dilation", self.cmst_dilation)
            .set("cmst_dense", self.cmst_dense)
            .set("cmst_multiscale", self.cmst_multiscale)
            .set("pool", self.pool.as_str())
            .set("adaln", self.adaln)
            .set("bn_momentum", self.bn_momentum)
            .set("bn_eps", self.bn_eps)
            .set("ln_eps", self.ln_eps)
            .set("model_seed", self.seed);
        kv
    }

    pub const KEYS: &'static [&'static str] = &[
        "neurons",
        "grid",
        "prior_channels",
        "hidden",
        "c3tcn_layers",
        "c3tcn_kernel",
        "dilation_base",
        "spatial_kernel",
        "cmst_kernels",
        "cmst_dilation",
        "cmst_dense",
        "cmst_multiscale",
        "pool",
        "adaln",
        "bn_momentum",
        "bn_eps",
        "ln_eps",
        "model_seed",
    ];

    /// Overrides fields present in `kv`; other keys are ignored.
    pub fn apply_kv(&mut self, kv: &KeyValues) -> Result<()> {
        macro_rules! take {
            ($key:literal, $field:expr) => {
                if let Some(v) = kv.parse_opt($key)? {
                    $field = v;
                }
            };
        }
        take!("neurons", self.neurons);
        take!("grid", self.grid);
        take!("prior_channels", self.prior_channels);
        take!("hidden", self.hidden);
        take!("c3tcn_layers", self.c3tcn_layers);
        take!("c3tcn_kernel", self.c3tcn_kernel);
        take!("dilation_base", self.dilation_base);
        take!("spatial_kernel", self.spatial_kernel);
        take!("cmst_dilation", self.cmst_dilation);
        take!("cmst_dense", self.cmst_dense);
        take!("cmst_multiscale", self.cmst_multiscale);
        take!("adaln", self.adaln);
        take!("bn_momentum", self.bn_momentum);
        take!("bn_eps", self.bn_eps);
        take!("ln_eps", self.ln_eps);
        take!("model_seed", self.seed);
        if let Some(k) = kv.get("cmst_kernels") {
            self.cmst_kernels = parse_kernels(k)?;
        }
        if let Some(p) = kv.get("pool") {
            self.pool = match p {
                "first" => PoolPlacement::First,
                "after_branches" => PoolPlacement::AfterBranches,
                other => {
                    return Err(Error::config(format!(
                        "pool must be `first` or `after_branches`, got `{other}`"
                    )))
                }
            };
        }
        Ok(())
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv(kv)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `1,25;1,13,21` style kernel lists.
pub fn format_kernels(k: &[Vec<usize>]) -> String {
    k.iter()
        .map(|l| l.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join(";")
}

pub fn parse_kernels(s: &str) -> Result<Vec<Vec<usize>>> {
    s.split(';')
        .map(|level| {
            level
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::config(format!("bad temporal kernel `{v}` in `{s}`")))
                })
                .collect()
        })
        .collect()
}
