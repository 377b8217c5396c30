//! Training loop, evaluation and the experiment drivers.
//!
//! The network is trained on clips from the first part of movie A. Each
//! epoch it is evaluated on the held-out tail of movie A ("within") and on
//! all of movie B ("cross").

mod data;
mod experiments;
mod optim;

pub use data::{gather_batch, sample_clips, MovieData, PriorChoice, TrainData};
pub use experiments::{
    ablate, complementary_sweep, sweep_groups, tracked_top_k, write_ablation_csv, write_sweep_csv,
    AblationFlags, AblationRow, PriorLayer, SweepRow,
};
pub use optim::{AdamW, AdamWConfig, LrSchedule, Swa};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::loss::{vist_loss, LossWeights, SoftDtwConfig};
use crate::model::{Mode, ModelConfig, VistModel};
use crate::signals::{self, RateMatrix, SdKlConfig};
use crate::tensor::Tensor;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Vist,
    RmseOnly,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Vist => "vist",
            LossKind::RmseOnly => "rmse_only",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vist" => Ok(LossKind::Vist),
            "rmse_only" => Ok(LossKind::RmseOnly),
            _ => Err(Error::config(format!("loss must be `vist` or `rmse_only`, got `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub samples_per_epoch: usize,
    pub clip_len: usize,
    /// Epochs at the end whose weights are averaged.
    pub swa_last: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub weights: LossWeights,
    pub sdtw: SoftDtwConfig,
    pub sdkl: SdKlConfig,
    /// Fraction of movie A kept out of training for the within-movie split.
    pub holdout: f64,
    /// Frames per evaluation window; 0 evaluates in one pass.
    pub eval_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            warmup_epochs: 5,
            peak_lr: 8e-4,
            final_lr: 1e-4,
            weight_decay: 0.1,
            batch: 16,
            samples_per_epoch: 768,
            clip_len: 128,
            swa_last: 10,
            seed: 0,
            loss: LossKind::Vist,
            weights: LossWeights::default(),
            sdtw: SoftDtwConfig::default(),
            sdkl: SdKlConfig::default(),
            holdout: 0.2,
            eval_chunk: 512,
        }
    }
}

impl TrainConfig {
    /// Ten epochs with a two-epoch warmup, averaging the last three.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 10,
            warmup_epochs: 2,
            swa_last: 3,
            ..Self::default()
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.samples_per_epoch.div_ceil(self.batch)
    }

    pub fn schedule(&self) -> LrSchedule {
        let spe = self.steps_per_epoch();
        LrSchedule {
            peak: self.peak_lr,
            last: self.final_lr,
            warmup: self.warmup_epochs * spe,
            total: self.epochs * spe,
        }
    }

    /// Weights actually optimized.
    pub fn effective_weights(&self) -> LossWeights {
        match self.loss {
            LossKind::Vist => self.weights,
            LossKind::RmseOnly => LossWeights::rmse_only(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch == 0 || self.samples_per_epoch == 0 {
            return bad("epochs, batch and samples_per_epoch must be >= 1".into());
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup_epochs {} must be < epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.swa_last > self.epochs {
            return bad(format!("swa_last {} exceeds epochs {}", self.swa_last, self.epochs));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return bad(format!("holdout {} must be in [0, 1)", self.holdout));
        }
        if !(self.peak_lr > 0.0 && self.final_lr >= 0.0 && self.weight_decay >= 0.0) {
            return bad("learning rates must be positive and weight decay >= 0".into());
        }
        self.weights.validate()?;
        self.sdtw.validate()
    }

    pub const KEYS: &'static [&'static str] = &[
        "epochs",
        "warmup_epochs",
        "peak_lr",
        "final_lr",
        "weight_decay",
        "batch",
        "samples_per_epoch",
        "clip_len",
        "swa_last",
        "seed",
        "loss",
        "alpha",
        "beta",
        "gamma",
        "sdtw_smoothing",
        "sdtw_windows",
        "sdtw_per_neuron",
        "sdkl_threshold",
        "sdkl_pooled",
        "holdout",
        "eval_chunk",
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
        take!("epochs", self.epochs);
        take!("warmup_epochs", self.warmup_epochs);
        take!("peak_lr", self.peak_lr);
        take!("final_lr", self.final_lr);
        take!("weight_decay", self.weight_decay);
        take!("batch", self.batch);
        take!("samples_per_epoch", self.samples_per_epoch);
        take!("clip_len", self.clip_len);
        take!("swa_last", self.swa_last);
        take!("seed", self.seed);
        take!("loss", self.loss);
        take!("alpha", self.weights.alpha);
        take!("beta", self.weights.beta);
        take!("gamma", self.weights.gamma);
        take!("sdtw_smoothing", self.sdtw.smoothing);
        take!("sdtw_per_neuron", self.sdtw.per_neuron);
        take!("sdkl_threshold", self.sdkl.threshold);
        take!("sdkl_pooled", self.sdkl.pooled);
        take!("holdout", self.holdout);
        take!("eval_chunk", self.eval_chunk);
        if let Some(w) = kv.get("sdtw_windows") {
            self.sdtw.windows = w
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse()
                        .map_err(|_| Error::config(format!("bad soft-DTW window `{v}`")))
                })
                .collect::<Result<_>>()?;
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("epochs", self.epochs)
            .set("warmup_epochs", self.warmup_epochs)
            .set("peak_lr", self.peak_lr)
            .set("final_lr", self.final_lr)
            .set("weight_decay", self.weight_decay)
            .set("batch", self.batch)
            .set("samples_per_epoch", self.samples_per_epoch)
            .set("clip_len", self.clip_len)
            .set("swa_last", self.swa_last)
            .set("seed", self.seed)
            .set("loss", self.loss)
            .set("alpha", self.weights.alpha)
            .set("beta", self.weights.beta)
            .set("gamma", self.weights.gamma)
            .set("sdtw_smoothing", self.sdtw.smoothing)
            .set(
                "sdtw_windows",
                self.sdtw
                    .windows
                    .iter()
                    .map(|w| w.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            )
            .set("sdtw_per_neuron", self.sdtw.per_neuron)
            .set("sdkl_threshold", self.sdkl.threshold)
            .set("sdkl_pooled", self.sdkl.pooled)
            .set("holdout", self.holdout)
            .set("eval_chunk", self.eval_chunk);
        kv
    }
}

/// Loss terms as plain numbers. Soft-DTW terms for windows other than 6
/// and 12 are not reported.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub rmse: f64,
    pub negrelu: f64,
    pub sdtw6: Option<f64>,
    pub sdtw12: Option<f64>,
}

impl LossValues {
    fn add_scaled(&mut self, o: &LossValues, w: f64) {
        self.total += w * o.total;
        self.rmse += w * o.rmse;
        self.negrelu += w * o.negrelu;
        self.sdtw6 = o.sdtw6.map(|v| self.sdtw6.unwrap_or(0.0) + w * v);
        self.sdtw12 = o.sdtw12.map(|v| self.sdtw12.unwrap_or(0.0) + w * v);
    }
}

fn loss_values(terms: &crate::loss::LossTerms<'_, f32>) -> LossValues {
    let get = |n: usize| {
        terms
            .sdtw
            .iter()
            .find(|(w, _)| *w == n)
            .map(|(_, v)| v.value().item() as f64)
    };
    LossValues {
        total: terms.total.value().item() as f64,
        rmse: terms.rmse.value().item() as f64,
        negrelu: terms.neg_relu.value().item() as f64,
        sdtw6: get(6),
        sdtw12: get(12),
    }
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    /// Epoch number from 1, or `swa` for the final averaged model.
    pub epoch: String,
    /// `train`, `within` or `cross`.
    pub split: &'static str,
    pub mean_cc: Option<f64>,
    pub mean_sdkl: Option<f64>,
    pub loss: LossValues,
    pub lr: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,split,mean_cc,mean_sdkl,loss_total,loss_rmse,loss_negrelu,loss_sdtw6,loss_sdtw12,lr";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.split,
            opt(self.mean_cc),
            opt(self.mean_sdkl),
            self.loss.total,
            self.loss.rmse,
            self.loss.negrelu,
            opt(self.loss.sdtw6),
            opt(self.loss.sdtw12),
            self.lr
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(s, "{}", r.csv_line()).expect("write to string");
    }
    s
}

/// Metrics of one model on one frame range.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub mean_cc: f64,
    pub mean_sdkl: f64,
    pub per_neuron_cc: Vec<f64>,
    pub per_neuron_sdkl: Vec<f64>,
    pub loss: LossValues,
    pub prediction: RateMatrix,
    pub target: RateMatrix,
}

/// Eval-mode metrics on frames `[start, start+len)` of `movie`. Earlier
/// frames are fed as history so the first evaluated output sees a full
/// receptive field whenever the movie allows.
pub fn evaluate(
    model: &VistModel<f32>,
    movie: &MovieData,
    rf: &Tensor<f32>,
    start: usize,
    len: usize,
    cfg: &TrainConfig,
) -> Result<EvalResult> {
    let from = start.saturating_sub(model.cfg.receptive_field());
    let prior = movie.prior_window(from, start + len - from)?;
    let out = model.predict_chunked(&prior, rf, cfg.eval_chunk)?;
    let out = out.narrow(1, start - from, len)?;
    let c = out.shape()[2];
    let out = out.into_shape([len, c])?;
    let prediction = RateMatrix::from_time_major(&out, movie.bin_ms)?;
    let target = movie.target_matrix(start, len)?;
    let per_neuron_cc = signals::per_neuron_cc(&target, &prediction)?;
    let per_neuron_sdkl = signals::per_neuron_sd_kl(&target, &prediction, &cfg.sdkl)?;
    let mean_sdkl = signals::mean_sd_kl(&target, &prediction, &cfg.sdkl)?;
    let loss = {
        let g = Graph::<f32>::new();
        let y = g.constant(movie.rates.narrow(0, start, len)?);
        let p = g.constant(out);
        let mut sdtw = cfg.sdtw.clone();
        sdtw.windows.retain(|&w| w < len);
        loss_values(&vist_loss(y, p, &cfg.effective_weights(), &sdtw)?)
    };
    Ok(EvalResult {
        mean_cc: per_neuron_cc.iter().sum::<f64>() / per_neuron_cc.len() as f64,
        mean_sdkl,
        per_neuron_cc,
        per_neuron_sdkl,
        loss,
        prediction,
        target,
    })
}

pub struct TrainOutcome {
    /// Final model: the weight average when `swa_last > 0`.
    pub model: VistModel<f32>,
    pub rows: Vec<MetricsRow>,
    pub within: EvalResult,
    pub cross: EvalResult,
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
}

impl TrainOutcome {
    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.rows)
    }
}

/// Frames of movie A used for training clips; the rest is the within split.
pub fn train_frames(data: &TrainData, cfg: &TrainConfig) -> usize {
    let t = data.a.frames();
    t - (t as f64 * cfg.holdout).round() as usize
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64 + 1)
}

/// Model configuration sized to `data`, seeded from `cfg.seed`.
pub fn fit_model_config(model: &ModelConfig, data: &TrainData, cfg: &TrainConfig) -> ModelConfig {
    ModelConfig {
        neurons: data.neurons(),
        prior_channels: data.channels(),
        grid: data.grid(),
        seed: cfg.seed,
        ..model.clone()
    }
}

fn non_finite(g: &Graph<f32>, fallback: &str) -> Error {
    Error::NonFinite {
        tensor: g.first_non_finite().unwrap_or_else(|| fallback.to_string()),
    }
}

/// Starts every output at its neuron's mean training rate.
fn init_readout_bias(model: &mut VistModel<f32>, movie: &MovieData, frames: usize) -> Result<()> {
    let rates = movie.target_matrix(0, frames)?;
    let bias = model
        .params
        .get_mut("readout.bias")
        .ok_or_else(|| Error::config("model has no readout.bias"))?;
    for (b, n) in bias.data_mut().iter_mut().zip(0..rates.neurons) {
        let row = rates.row(n);
        *b = (row.iter().sum::<f64>() / row.len() as f64) as f32;
    }
    Ok(())
}

/// Mean of the per-batch statistics over one pass of training clips,
/// written into the running buffers.
fn recalibrate_bn(model: &mut VistModel<f32>, data: &TrainData, cfg: &TrainConfig, frames: usize) -> Result<()> {
    model.reset_running_stats();
    let starts = sample_clips(frames, cfg.clip_len, cfg.samples_per_epoch, epoch_seed(cfg.seed, cfg.epochs))?;
    for (k, chunk) in starts.chunks(cfg.batch).enumerate() {
        let (x, _) = gather_batch(&data.a, chunk, cfg.clip_len)?;
        let g = Graph::<f32>::new();
        let (fwd, _) = model.forward(&g, g.constant(x), g.constant(data.rf.clone()), Mode::Train, false)?;
        model.accumulate_running_stats(&fwd.bn_stats, k + 1);
    }
    Ok(())
}

/// Trains on movie A and evaluates on its held-out tail and on movie B.
/// `on_row` sees every metrics row as soon as it is produced.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &TrainData,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let frames = train_frames(data, cfg);
    let held = data.a.frames() - frames;
    if cfg.clip_len > frames {
        return Err(Error::config(format!(
            "clip_len {} exceeds the {frames} training frames",
            cfg.clip_len
        )));
    }
    if let Some(&w) = cfg.sdtw.windows.iter().find(|&&w| w >= cfg.clip_len) {
        return Err(Error::config(format!("soft-DTW window {w} needs clips longer than {}", cfg.clip_len)));
    }
    let mut model = VistModel::<f32>::new(fit_model_config(model_cfg, data, cfg))?;
    init_readout_bias(&mut model, &data.a, frames)?;
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        &model.params,
    );
    let schedule = cfg.schedule();
    let weights = cfg.effective_weights();
    let mut swa = Swa::default();
    let mut rows = Vec::new();
    let mut train_loss = Vec::new();
    let mut push = |row: MetricsRow, rows: &mut Vec<MetricsRow>| {
        on_row(&row);
        rows.push(row);
    };
    let mut step = 0;
    let mut lr = 0.0;
    for epoch in 0..cfg.epochs {
        let starts = sample_clips(frames, cfg.clip_len, cfg.samples_per_epoch, epoch_seed(cfg.seed, epoch))?;
        let mut acc = LossValues::default();
        let batches = starts.len().div_ceil(cfg.batch);
        for chunk in starts.chunks(cfg.batch) {
            let (x, y) = gather_batch(&data.a, chunk, cfg.clip_len)?;
            let g = Graph::<f32>::new();
            let (fwd, bound) = model.forward(&g, g.constant(x), g.constant(data.rf.clone()), Mode::Train, true)?;
            let terms = vist_loss(g.constant(y), fwd.output, &weights, &cfg.sdtw)?;
            let values = loss_values(&terms);
            if !values.total.is_finite() {
                return Err(non_finite(&g, "loss_total"));
            }
            let grads = g.backward(terms.total)?;
            let gs: Vec<Option<Tensor<f32>>> = bound.vars().iter().map(|v| grads.get(*v).cloned()).collect();
            if let Some(i) = gs.iter().position(|g| g.as_ref().is_some_and(|t| !t.all_finite())) {
                return Err(Error::NonFinite {
                    tensor: format!("grad of {}", model.params.by_index(i).name),
                });
            }
            step += 1;
            lr = schedule.at(step);
            opt.step(&mut model.params, &gs, lr)?;
            model.update_running_stats(&fwd.bn_stats);
            acc.add_scaled(&values, 1.0 / batches as f64);
        }
        train_loss.push(acc.total);
        let label = (epoch + 1).to_string();
        push(
            MetricsRow {
                epoch: label.clone(),
                split: "train",
                mean_cc: None,
                mean_sdkl: None,
                loss: acc,
                lr,
            },
            &mut rows,
        );
        if epoch + cfg.swa_last >= cfg.epochs {
            swa.update(&model.params);
        }
        for (split, r) in eval_splits(&model, data, cfg, frames, held)? {
            push(
                MetricsRow {
                    epoch: label.clone(),
                    split,
                    mean_cc: Some(r.mean_cc),
                    mean_sdkl: Some(r.mean_sdkl),
                    loss: r.loss,
                    lr,
                },
                &mut rows,
            );
        }
    }
    if let Some(avg) = swa.average.take() {
        model.params = avg;
        recalibrate_bn(&mut model, data, cfg, frames)?;
    }
    let mut finals = eval_splits(&model, data, cfg, frames, held)?;
    for (split, r) in &finals {
        push(
            MetricsRow {
                epoch: "swa".into(),
                split,
                mean_cc: Some(r.mean_cc),
                mean_sdkl: Some(r.mean_sdkl),
                loss: r.loss,
                lr,
            },
            &mut rows,
        );
    }
    let cross = finals.pop().expect("cross split").1;
    let within = match finals.pop() {
        Some((_, w)) => w,
        None => cross.clone(),
    };
    Ok(TrainOutcome {
        model,
        rows,
        within,
        cross,
        train_loss,
    })
}

/// `within` (when any frames are held out) followed by `cross`.
fn eval_splits(
    model: &VistModel<f32>,
    data: &TrainData,
    cfg: &TrainConfig,
    frames: usize,
    held: usize,
) -> Result<Vec<(&'static str, EvalResult)>> {
    let mut out = Vec::with_capacity(2);
    if held > 0 {
        out.push(("within", evaluate(model, &data.a, &data.rf, frames, held, cfg)?));
    }
    out.push(("cross", evaluate(model, &data.b, &data.rf, 0, data.b.frames(), cfg)?));
    Ok(out)
}

/// Writes `metrics.csv`, `train.kv` and the checkpoint under `dir/checkpoint`.
pub fn write_outcome(outcome: &TrainOutcome, cfg: &TrainConfig, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.csv"), outcome.metrics_csv())?;
    cfg.to_kv().save(dir.join("train.kv"))?;
    outcome.model.save(dir.join("checkpoint"))
}

/// `neuron,cc,sdkl` rows.
pub fn per_neuron_csv(ids: &[usize], r: &EvalResult) -> String {
    let mut s = String::from("neuron,cc,sdkl\n");
    for ((id, cc), kl) in ids.iter().zip(&r.per_neuron_cc).zip(&r.per_neuron_sdkl) {
        writeln!(s, "{id},{cc},{kl}").expect("write to string");
    }
    s
}

/// `t,neuron,target,predicted` rows, the input of rate-trace plots.
pub fn traces_csv(ids: &[usize], r: &EvalResult) -> String {
    let mut s = String::from("t,neuron,target,predicted\n");
    for (k, id) in ids.iter().enumerate() {
        for (t, (y, p)) in r.target.row(k).iter().zip(r.prediction.row(k)).enumerate() {
            writeln!(s, "{t},{id},{y},{p}").expect("write to string");
        }
    }
    s
}
