//! The encoding network.
//!
//! Data flows `[N, C, T, g, g]` prior features through a channel projection,
//! a stack of causal dilated depthwise-separable residual blocks and a second
//! projection to one channel per neuron; receptive-field conditioning then
//! modulates that map, a cascade of causal multiscale blocks halves the
//! spatial side at every level, and a per-frame affine readout produces
//! `[N, T, neurons]` rates.

mod config;
mod params;

pub use config::{format_kernels, parse_kernels, ModelConfig, PoolPlacement, CMST_KERNELS};
pub use params::{Bound, Param, ParamStore};

use crate::autograd::{Graph, NormMode, Var};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::tensor::kernels::{BatchStats, Conv3dSpec};
use crate::tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in every normalization layer.
    Train,
    /// Running statistics; the forward pass is a pure function of the input.
    Eval,
}

/// Batch statistics observed by the normalization layer `name` during a
/// training-mode forward pass.
#[derive(Clone, Debug)]
pub struct LayerStats<S> {
    pub name: String,
    pub stats: BatchStats<S>,
}

pub struct Forward<'g, S: Scalar> {
    /// `[N, T, neurons]`.
    pub output: Var<'g, S>,
    pub bn_stats: Vec<LayerStats<S>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VistModel<S: Scalar = f32> {
    pub cfg: ModelConfig,
    pub params: ParamStore<S>,
}

fn bn_name(layer: usize) -> String {
    format!("c3tcn.{layer}.bn")
}

fn branch_name(level: usize, k: usize) -> String {
    format!("cmst.{level}.k{k}")
}

/// Parameter shapes and initialization rules in construction order.
enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    Uniform(usize),
    Zeros,
    Ones,
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init, bool)> {
    let (c, h, n, sk) = (cfg.prior_channels, cfg.hidden, cfg.neurons, cfg.spatial_kernel);
    let mut v: Vec<(String, Vec<usize>, Init, bool)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init, trainable: bool| {
        v.push((name, shape, init, trainable))
    };
    push("in_proj.weight".into(), vec![h, c, 1, 1, 1], Init::Uniform(c), true);
    push("in_proj.bias".into(), vec![h], Init::Uniform(c), true);
    for i in 0..cfg.c3tcn_layers {
        let dw_fan = cfg.c3tcn_kernel * sk * sk;
        push(
            format!("c3tcn.{i}.dw.weight"),
            vec![h, 1, cfg.c3tcn_kernel, sk, sk],
            Init::Uniform(dw_fan),
            true,
        );
        push(format!("c3tcn.{i}.pw.weight"), vec![h, h, 1, 1, 1], Init::Uniform(h), true);
        push(format!("c3tcn.{i}.pw.bias"), vec![h], Init::Uniform(h), true);
        push(format!("{}.weight", bn_name(i)), vec![h], Init::Ones, true);
        push(format!("{}.bias", bn_name(i)), vec![h], Init::Zeros, true);
        push(format!("{}.running_mean", bn_name(i)), vec![h], Init::Zeros, false);
        push(format!("{}.running_var", bn_name(i)), vec![h], Init::Ones, false);
    }
    push("out_proj.weight".into(), vec![n, h, 1, 1, 1], Init::Uniform(h), true);
    push("out_proj.bias".into(), vec![n], Init::Uniform(h), true);
    for part in ["scale", "shift"] {
        push(format!("adaln.{part}.weight"), vec![n, n], Init::Uniform(n), true);
        push(format!("adaln.{part}.bias"), vec![n], Init::Uniform(n), true);
    }
    push("adaln.gate.weight".into(), vec![n, n], Init::Zeros, true);
    push("adaln.gate.bias".into(), vec![n], Init::Zeros, true);
    let cin = if cfg.cmst_dense { n } else { 1 };
    for l in 0..cfg.levels() {
        for k in cfg.level_kernels(l) {
            let b = branch_name(l, k);
            if k > 1 {
                push(
                    format!("{b}.temporal.weight"),
                    vec![n, cin, k, 1, 1],
                    Init::Uniform(cin * k),
                    true,
                );
            }
            push(
                format!("{b}.spatial.weight"),
                vec![n, cin, 1, sk, sk],
                Init::Uniform(cin * sk * sk),
                true,
            );
        }
        push(format!("cmst.{l}.merge.weight"), vec![n, n, 1, 1, 1], Init::Uniform(n), true);
        push(format!("cmst.{l}.merge.bias"), vec![n], Init::Uniform(n), true);
    }
    let side = cfg.readout_side();
    let flat = n * side * side;
    push("readout.weight".into(), vec![n, flat], Init::Uniform(flat), true);
    push("readout.bias".into(), vec![n], Init::Uniform(flat), true);
    v
}

impl<S: Scalar> VistModel<S> {
    /// Builds and initializes a network. Initial values are drawn in `f64`
    /// from a generator seeded by `cfg.seed`, so `f32` and `f64` models
    /// built from one config agree up to rounding.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamStore::default();
        for (name, shape, init, trainable) in layout(&cfg) {
            let t = match init {
                Init::Uniform(fan) => {
                    let b = 1.0 / (fan as f64).sqrt();
                    Tensor::from_fn(shape, |_| S::cast(rng.random_range(-b..b)))
                }
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::ones(shape),
            };
            params.insert(name, t, trainable);
        }
        Ok(VistModel { cfg, params })
    }

    pub fn cast<T: Scalar>(&self) -> VistModel<T> {
        VistModel {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Temporal kernel sets of the multiscale levels as built.
    pub fn cmst_schedule(&self) -> Vec<Vec<usize>> {
        (0..self.cfg.levels()).map(|l| self.cfg.level_kernels(l)).collect()
    }

    fn check_inputs(&self, prior: &[usize], rf: &[usize]) -> Result<()> {
        let c = &self.cfg;
        match *prior {
            [_, ch, _, a, b] if ch == c.prior_channels && a == c.grid && b == c.grid => {}
            _ => {
                return Err(Error::config(format!(
                    "prior must be [N, {}, T, {g}, {g}], got {prior:?}",
                    c.prior_channels,
                    g = c.grid
                )))
            }
        }
        if rf != [c.neurons, c.grid, c.grid] {
            return Err(Error::config(format!(
                "receptive-field condition must be [{}, {g}, {g}], got {rf:?}",
                c.neurons,
                g = c.grid
            )));
        }
        Ok(())
    }

    /// Full forward pass with this model's parameters recorded on `graph`.
    pub fn forward<'g>(
        &self,
        graph: &'g Graph<S>,
        prior: Var<'g, S>,
        rf: Var<'g, S>,
        mode: Mode,
        with_grad: bool,
    ) -> Result<(Forward<'g, S>, Bound<'g, S>)> {
        let bound = self.params.bind(graph, with_grad);
        let fwd = self.forward_bound(&bound, prior, rf, mode)?;
        Ok((fwd, bound))
    }

    /// Forward pass reading parameters from an existing binding.
    pub fn forward_bound<'g>(
        &self,
        p: &Bound<'g, S>,
        prior: Var<'g, S>,
        rf: Var<'g, S>,
        mode: Mode,
    ) -> Result<Forward<'g, S>> {
        self.check_inputs(&prior.shape(), &rf.shape())?;
        let mut bn_stats = Vec::new();
        let x = self.c3tcn(p, prior, mode, &mut bn_stats)?;
        let x = if self.cfg.adaln {
            self.adaln(p, x, rf)?
        } else {
            x
        };
        let mut x = x;
        for l in 0..self.cfg.levels() {
            x = self.cmst_level(p, x, l)?;
        }
        let output = self.readout(p, x)?;
        Ok(Forward { output, bn_stats })
    }

    fn bias<'g>(&self, x: Var<'g, S>, b: Var<'g, S>) -> Result<Var<'g, S>> {
        let c = b.shape()[0];
        x.add(b.reshape([c, 1, 1, 1])?)
    }

    /// Input projection, causal residual stack and output projection:
    /// `[N, C, T, g, g]` to `[N, neurons, T, g, g]`.
    pub fn c3tcn<'g>(
        &self,
        p: &Bound<'g, S>,
        prior: Var<'g, S>,
        mode: Mode,
        stats: &mut Vec<LayerStats<S>>,
    ) -> Result<Var<'g, S>> {
        let cfg = &self.cfg;
        let pad_hw = cfg.spatial_kernel / 2;
        let x = prior.conv3d(p.var("in_proj.weight"), Conv3dSpec::default())?;
        let mut h = self.bias(x, p.var("in_proj.bias"))?.named("in_proj");
        for i in 0..cfg.c3tcn_layers {
            let d = cfg.dilation_base.pow(i as u32);
            let spec = Conv3dSpec::default()
                .causal_t((cfg.c3tcn_kernel - 1) * d)
                .dilation_t(d)
                .same_hw(pad_hw)
                .groups(cfg.hidden);
            let y = h.conv3d(p.var(&format!("c3tcn.{i}.dw.weight")), spec)?;
            let y = y.conv3d(p.var(&format!("c3tcn.{i}.pw.weight")), Conv3dSpec::default())?;
            let y = self.bias(y, p.var(&format!("c3tcn.{i}.pw.bias")))?;
            let bn = bn_name(i);
            let (rm, rv) = (
                p.var(&format!("{bn}.running_mean")).value(),
                p.var(&format!("{bn}.running_var")).value(),
            );
            let norm_mode = match mode {
                Mode::Train => NormMode::Train,
                Mode::Eval => NormMode::Eval(rm.data(), rv.data()),
            };
            let (y, st) = y.batch_norm(
                p.var(&format!("{bn}.weight")),
                p.var(&format!("{bn}.bias")),
                norm_mode,
                S::cast(cfg.bn_eps),
            )?;
            if let Some(st) = st {
                stats.push(LayerStats { name: bn.clone(), stats: st });
            }
            let y = y.named(bn).relu();
            h = h.add(y)?.named(format!("c3tcn.{i}"));
        }
        let x = h.conv3d(p.var("out_proj.weight"), Conv3dSpec::default())?;
        Ok(self.bias(x, p.var("out_proj.bias"))?.named("out_proj"))
    }

    /// Per-location scale, shift and gate from the `[neurons, g, g]`
    /// receptive-field map, reshaped to broadcast over `[N, neurons, T, g, g]`.
    fn modulation<'g>(&self, p: &Bound<'g, S>, rf: Var<'g, S>, part: &str) -> Result<Var<'g, S>> {
        let (n, g) = (self.cfg.neurons, self.cfg.grid);
        let cond = rf.permute(&[1, 2, 0])?;
        let m = cond.linear(
            p.var(&format!("adaln.{part}.weight")),
            Some(p.var(&format!("adaln.{part}.bias"))),
        )?;
        m.permute(&[2, 0, 1])?.reshape([n, 1, g, g])
    }

    /// `x + gate * (layer_norm(x) * (1 + scale) + shift)`, normalized over
    /// the neuron axis.
    pub fn adaln<'g>(&self, p: &Bound<'g, S>, x: Var<'g, S>, rf: Var<'g, S>) -> Result<Var<'g, S>> {
        let scale = self.modulation(p, rf, "scale")?;
        let shift = self.modulation(p, rf, "shift")?;
        let gate = self.modulation(p, rf, "gate")?;
        let ln = x.layer_norm(1, S::cast(self.cfg.ln_eps))?;
        let modulated = ln.mul(scale.offset(S::one()))?.add(shift)?;
        Ok(x.add(gate.mul(modulated)?)?.named("adaln"))
    }

    fn branch<'g>(&self, p: &Bound<'g, S>, x: Var<'g, S>, level: usize, k: usize) -> Result<Var<'g, S>> {
        let cfg = &self.cfg;
        let groups = if cfg.cmst_dense { 1 } else { cfg.neurons };
        let b = branch_name(level, k);
        let mut y = x;
        if k > 1 {
            let spec = Conv3dSpec::default()
                .causal_t((k - 1) * cfg.cmst_dilation)
                .dilation_t(cfg.cmst_dilation)
                .groups(groups);
            y = y.conv3d(p.var(&format!("{b}.temporal.weight")), spec)?;
        }
        let spec = Conv3dSpec::default()
            .same_hw(cfg.spatial_kernel / 2)
            .groups(groups);
        y.conv3d(p.var(&format!("{b}.spatial.weight")), spec)
    }

    /// One multiscale level: halves the spatial side.
    pub fn cmst_level<'g>(&self, p: &Bound<'g, S>, x: Var<'g, S>, level: usize) -> Result<Var<'g, S>> {
        let side = x.shape()[3];
        if side % 2 != 0 || x.shape()[4] % 2 != 0 {
            return Err(Error::config(format!(
                "multiscale level {level}: odd spatial side {side}"
            )));
        }
        let pooled = x.avg_pool_spatial(2, 2)?;
        let input = match self.cfg.pool {
            PoolPlacement::First => pooled,
            PoolPlacement::AfterBranches => x,
        };
        let mut sum: Option<Var<'g, S>> = None;
        for k in self.cfg.level_kernels(level) {
            let y = self.branch(p, input, level, k)?;
            sum = Some(match sum {
                Some(s) => s.add(y)?,
                None => y,
            });
        }
        let sum = sum.expect("at least one branch");
        let merged = sum.conv3d(p.var(&format!("cmst.{level}.merge.weight")), Conv3dSpec::default())?;
        let merged = self.bias(merged, p.var(&format!("cmst.{level}.merge.bias")))?;
        let merged = match self.cfg.pool {
            PoolPlacement::First => merged,
            PoolPlacement::AfterBranches => merged.avg_pool_spatial(2, 2)?,
        };
        Ok(merged.add(pooled)?.named(format!("cmst.{level}")))
    }

    /// `[N, neurons, T, s, s]` to `[N, T, neurons]` by a per-frame affine map
    /// of the flattened neuron-by-space features.
    pub fn readout<'g>(&self, p: &Bound<'g, S>, x: Var<'g, S>) -> Result<Var<'g, S>> {
        let sh = x.shape();
        let (n, t) = (sh[0], sh[2]);
        let flat = x.permute(&[0, 2, 1, 3, 4])?.reshape([n, t, sh[1] * sh[3] * sh[4]])?;
        Ok(flat
            .linear(p.var("readout.weight"), Some(p.var("readout.bias")))?
            .named("readout"))
    }

    /// Eval-mode prediction `[N, T, neurons]` without recording gradients.
    pub fn predict(&self, prior: &Tensor<S>, rf: &Tensor<S>) -> Result<Tensor<S>> {
        let g = Graph::new();
        let (x, r) = (g.constant(prior.clone()), g.constant(rf.clone()));
        let (fwd, _) = self.forward(&g, x, r, Mode::Eval, false)?;
        let out = fwd.output.value();
        if !out.all_finite() {
            return Err(Error::NonFinite {
                tensor: g.first_non_finite().unwrap_or_else(|| "output".into()),
            });
        }
        Ok((*out).clone())
    }

    /// Eval-mode prediction over a long sequence in windows of `chunk`
    /// frames, each preceded by enough history to cover the receptive
    /// field, so results match a single full-length pass.
    pub fn predict_chunked(&self, prior: &Tensor<S>, rf: &Tensor<S>, chunk: usize) -> Result<Tensor<S>> {
        let t = prior.shape().get(2).copied().unwrap_or(0);
        if chunk == 0 || chunk >= t {
            return self.predict(prior, rf);
        }
        let ctx = self.cfg.receptive_field();
        let mut parts = Vec::new();
        let mut start = 0;
        while start < t {
            let end = (start + chunk).min(t);
            let from = start.saturating_sub(ctx);
            let window = prior.narrow(2, from, end - from)?;
            let out = self.predict(&window, rf)?;
            parts.push(out.narrow(1, start - from, end - start)?);
            start = end;
        }
        Tensor::concat(&parts.iter().collect::<Vec<_>>(), 1)
    }

    /// Exponential running-statistics update with the configured momentum.
    pub fn update_running_stats(&mut self, stats: &[LayerStats<S>]) {
        let m = S::cast(self.cfg.bn_momentum);
        for ls in stats {
            self.blend_stats(ls, m);
        }
    }

    /// Cumulative average: the `count`-th (1-based) batch gets weight
    /// `1/count`.
    pub fn accumulate_running_stats(&mut self, stats: &[LayerStats<S>], count: usize) {
        let w = S::one() / S::cast(count as f64);
        for ls in stats {
            self.blend_stats(ls, w);
        }
    }

    fn blend_stats(&mut self, ls: &LayerStats<S>, w: S) {
        for (suffix, new) in [("running_mean", &ls.stats.mean), ("running_var", &ls.stats.var_unbiased)] {
            let t = self
                .params
                .get_mut(&format!("{}.{suffix}", ls.name))
                .expect("normalization buffer");
            for (r, &v) in t.data_mut().iter_mut().zip(new) {
                *r = *r + w * (v - *r);
            }
        }
    }

    pub fn reset_running_stats(&mut self) {
        for p in self.params.iter_mut() {
            if p.name.ends_with(".running_mean") {
                p.value.data_mut().fill(S::zero());
            } else if p.name.ends_with(".running_var") {
                p.value.data_mut().fill(S::one());
            }
        }
    }

    /// Writes `config.kv` and one VIST file per tensor into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.params.save_dir(dir)?;
        self.cfg.to_kv().save(dir.join("config.kv"))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let kv = KeyValues::load(dir.join("config.kv"))?;
        kv.check_keys(ModelConfig::KEYS)?;
        let mut model = Self::new(ModelConfig::from_kv(&kv)?)?;
        model.params.load_dir(dir)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_inputs(cfg: &ModelConfig, n: usize, t: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prior = Tensor::from_fn([n, cfg.prior_channels, t, cfg.grid, cfg.grid], |_| {
            rng.random_range(-1.0..1.0)
        });
        let rf = Tensor::from_fn([cfg.neurons, cfg.grid, cfg.grid], |_| rng.random_range(0.0..0.5));
        (prior, rf)
    }

    #[test]
    fn default_shape_chain() {
        let cfg = ModelConfig {
            prior_channels: 4,
            hidden: 4,
            neurons: 3,
            ..ModelConfig::default()
        };
        let m = VistModel::<f32>::new(cfg.clone()).unwrap();
        let g = Graph::new();
        let prior = g.constant(Tensor::zeros([1, 4, 5, 16, 16]));
        let rf = g.constant(Tensor::zeros([3, 16, 16]));
        let p = m.params.bind(&g, false);
        let mut st = Vec::new();
        let mut x = m.c3tcn(&p, prior, Mode::Eval, &mut st).unwrap();
        x = m.adaln(&p, x, rf).unwrap();
        let mut sides = vec![x.shape()[3]];
        for l in 0..4 {
            x = m.cmst_level(&p, x, l).unwrap();
            sides.push(x.shape()[3]);
        }
        assert_eq!(sides, vec![16, 8, 4, 2, 1]);
        assert_eq!(m.readout(&p, x).unwrap().shape(), vec![1, 5, 3]);
    }

    #[test]
    fn adaln_is_identity_at_init() {
        let cfg = ModelConfig::tiny();
        let m = VistModel::<f64>::new(cfg.clone()).unwrap();
        let (prior, rf) = random_inputs(&cfg, 1, 6, 3);
        let g = Graph::new();
        let p = m.params.bind(&g, false);
        let x = g.constant(Tensor::from_fn([1, 2, 6, 4, 4], |i| prior.data()[i]));
        let y = m.adaln(&p, x, g.constant(rf)).unwrap();
        let (a, b) = (x.value(), y.value());
        assert!(a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let m = VistModel::<f32>::new(ModelConfig::tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        assert_eq!(VistModel::<f32>::load(dir.path()).unwrap(), m);
        std::fs::remove_file(dir.path().join("readout.bias.vist")).unwrap();
        let err = VistModel::<f32>::load(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format { ref field, .. } if field == "readout.bias"), "{err}");
        m.save(dir.path()).unwrap();
        crate::tensor::io::save(&Tensor::<f32>::zeros([1]), dir.path().join("stray.vist")).unwrap();
        assert!(matches!(VistModel::<f32>::load(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn chunked_prediction_matches_full() {
        let cfg = ModelConfig::tiny();
        let m = VistModel::<f64>::new(cfg.clone()).unwrap();
        let (prior, rf) = random_inputs(&cfg, 1, 40, 5);
        let full = m.predict(&prior, &rf).unwrap();
        let chunked = m.predict_chunked(&prior, &rf, 7).unwrap();
        assert!(full.max_abs_diff(&chunked) < 1e-12);
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let cfg = ModelConfig::tiny();
        let m = VistModel::<f64>::new(cfg.clone()).unwrap();
        let (prior, _) = random_inputs(&cfg, 1, 6, 1);
        let bad_rf = Tensor::zeros([3, 4, 4]);
        assert!(matches!(m.predict(&prior, &bad_rf), Err(Error::Config(_))));
    }
}
