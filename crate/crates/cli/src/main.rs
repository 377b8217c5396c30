mod plot;
mod settings;

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use vist_core::kv::KeyValues;
use vist_core::model::{ModelConfig, VistModel};
use vist_core::prior::{self, PatchEmbed};
use vist_core::signals::SpikeRaster;
use vist_core::synth::{self, SynthConfig};
use vist_core::tensor::io;
use vist_core::train::{
    self, AblationFlags, PriorChoice, PriorLayer, TrainConfig, TrainData, METRICS_HEADER,
};
use vist_core::{exec, gradcheck, rf, Error, Result};

use settings::PRIOR_KEYS;

#[derive(Parser)]
#[command(name = "vist", version, about = "Video-to-retina encoding: data, training, evaluation and figures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Settings {
    /// Flat key=value config file; `#` starts a comment line.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Settings {
    fn load(&self, allowed: &[&[&'static str]]) -> Result<KeyValues> {
        settings::load(self.config.as_deref(), &self.set, &settings::allowed(allowed))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Movie {
    A,
    B,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a retina watching two movies and save the dataset.
    Synth {
        #[command(flatten)]
        settings: Settings,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute prior feature cubes for both movies of a dataset.
    Features {
        #[command(flatten)]
        settings: Settings,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate receptive fields from a white-noise stimulus and its raster.
    Rf {
        #[command(flatten)]
        settings: Settings,
        /// `[T, H, W]` stimulus, 0-255 grayscale.
        #[arg(long)]
        stimulus: PathBuf,
        /// Spike raster `[trials, neurons, T]`.
        #[arg(long)]
        raster: PathBuf,
        /// Output RF stack; the Gaussian table goes next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on movie A and evaluate within movie A and across to movie B.
    Train {
        #[command(flatten)]
        settings: Settings,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one movie.
    Eval {
        #[command(flatten)]
        settings: Settings,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        movie: Movie,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-movie CC of the best neurons as the output set grows.
    Sweep {
        #[command(flatten)]
        settings: Settings,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per ablation variant.
    Ablate {
        #[command(flatten)]
        settings: Settings,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable op and the model.
    Gradcheck {
        #[command(flatten)]
        settings: Settings,
    },
    /// Render SVG figures from a traces, sweep, ablation, per-neuron or metrics CSV.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Only plot traces of these neuron ids.
        #[arg(long, value_delimiter = ',')]
        neurons: Option<Vec<usize>>,
    },
}

const FEATURE_KEYS: &[&str] = &["prior", "grid", "embed_channels", "embed_seed"];
const RF_KEYS: &[&str] = &["tau"];
const SWEEP_KEYS: &[&str] = &["sizes", "top_k"];
const ABLATE_KEYS: &[&str] = &["variants", "layer_dir"];
const DEFAULT_VARIANTS: &str = "baseline,no_vit_prior,no_adaln,rmse_only,no_cmst_multiscale";

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) => 1,
        Error::Data(_) | Error::Format { .. } | Error::Io(_) | Error::Estimation(_) | Error::EmptyDurations => 2,
        Error::NonFinite { .. } => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    exec::configure_from_env();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("vist: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Synth { settings, out } => synth_cmd(&settings, &out),
        Command::Features { settings, data, out } => features_cmd(&settings, &data, &out),
        Command::Rf {
            settings,
            stimulus,
            raster,
            out,
        } => rf_cmd(&settings, &stimulus, &raster, &out),
        Command::Train { settings, data, out } => train_cmd(&settings, &data, &out),
        Command::Eval {
            settings,
            checkpoint,
            data,
            movie,
            out,
        } => eval_cmd(&settings, &checkpoint, &data, movie, &out),
        Command::Sweep { settings, data, out } => sweep_cmd(&settings, &data, &out),
        Command::Ablate { settings, data, out } => ablate_cmd(&settings, &data, &out),
        // a failed check is a numerical failure, not an error in the run
        Command::Gradcheck { settings } => return gradcheck_cmd(&settings),
        Command::Plot { csv, out, neurons } => plot_cmd(&csv, &out, neurons.as_deref()),
    }?;
    Ok(ExitCode::SUCCESS)
}

fn synth_cmd(s: &Settings, out: &Path) -> Result<()> {
    let kv = s.load(&[SynthConfig::KEYS])?;
    let cfg = SynthConfig::from_kv(&kv)?;
    let ds = synth::make_dataset(&cfg)?;
    ds.save(out)?;
    println!(
        "wrote {} neurons, {} + {} frames to {}",
        ds.neurons.len(),
        cfg.movie_a.frames,
        cfg.movie_b.frames,
        out.display()
    );
    Ok(())
}

fn features_cmd(s: &Settings, data: &Path, out: &Path) -> Result<()> {
    let kv = s.load(&[FEATURE_KEYS])?;
    let grid = kv.parse_opt("grid")?.unwrap_or(ModelConfig::default().grid);
    let choice = settings::prior_choice(&kv, data, grid)?;
    fs::create_dir_all(out)?;
    for tag in ["a", "b"] {
        let video = prior::normalize_video(&io::load::<f32>(data.join(format!("video_{tag}.vist")))?);
        let cube = match &choice {
            PriorChoice::StandIn(cfg) => PatchEmbed::new(cfg)?.embed(&video)?,
            PriorChoice::PatchMean { grid } => prior::patch_mean_cube(&video, *grid)?,
            PriorChoice::Files { .. } => {
                return Err(Error::Config("features computes `standin` or `patch_mean` priors".into()))
            }
        };
        let path = out.join(format!("features_{tag}.vist"));
        prior::save_features(&cube, &path)?;
        println!("{}: {:?}", path.display(), cube.data.shape());
    }
    Ok(())
}

fn rf_cmd(s: &Settings, stimulus: &Path, raster: &Path, out: &Path) -> Result<()> {
    let kv = s.load(&[RF_KEYS])?;
    let tau = kv.parse_opt("tau")?.unwrap_or(rf::DEFAULT_TAU);
    let video = prior::normalize_video(&io::load::<f32>(stimulus)?);
    let raster = SpikeRaster::load(raster)?;
    if raster.bins != video.shape()[0] {
        return Err(Error::Data(format!(
            "raster has {} bins, stimulus {} frames",
            raster.bins,
            video.shape()[0]
        )));
    }
    let rfs = (0..raster.neurons)
        .map(|n| {
            let spikes: Vec<f64> = (0..raster.bins)
                .map(|b| (0..raster.trials).map(|r| raster.count(r, n, b) as f64).sum())
                .collect();
            rf::estimate_rf(&video, &spikes, tau)
        })
        .collect::<Result<Vec<_>>>()?;
    rf::save_rfs(&rfs, out)?;
    for (i, r) in rfs.iter().enumerate() {
        let g = r.gaussian;
        println!(
            "neuron {i}: centre ({:.2}, {:.2}), sigma ({:.2}, {:.2}), residual {:.3e}",
            g.cx, g.cy, g.sx, g.sy, r.residual
        );
    }
    Ok(())
}

/// Model and training configs plus the prior, as named by `kv`.
fn configs(kv: &KeyValues, data: &Path) -> Result<(ModelConfig, TrainConfig, PriorChoice)> {
    let mut model = ModelConfig::default();
    model.apply_kv(kv)?;
    let mut cfg = TrainConfig::default();
    cfg.apply_kv(kv)?;
    cfg.validate()?;
    let choice = settings::prior_choice(kv, data, model.grid)?;
    Ok((model, cfg, choice))
}

fn summary(label: &str, r: &train::EvalResult) {
    println!("{label}: mean CC {:.4}, mean SD-KL {:.4}", r.mean_cc, r.mean_sdkl);
}

fn train_cmd(s: &Settings, data: &Path, out: &Path) -> Result<()> {
    let kv = s.load(&[ModelConfig::KEYS, TrainConfig::KEYS, PRIOR_KEYS])?;
    let (model, cfg, choice) = configs(&kv, data)?;
    let td = TrainData::load(data, &choice)?;
    println!("{METRICS_HEADER}");
    let outcome = train::train(&model, &cfg, &td, |row| println!("{}", row.csv_line()))?;
    train::write_outcome(&outcome, &cfg, out)?;
    settings::subset(&kv, PRIOR_KEYS).save(out.join("prior.kv"))?;
    fs::write(out.join("within_per_neuron.csv"), train::per_neuron_csv(&td.neuron_ids, &outcome.within))?;
    fs::write(out.join("cross_per_neuron.csv"), train::per_neuron_csv(&td.neuron_ids, &outcome.cross))?;
    fs::write(out.join("cross_traces.csv"), train::traces_csv(&td.neuron_ids, &outcome.cross))?;
    summary("within", &outcome.within);
    summary("cross", &outcome.cross);
    Ok(())
}

fn eval_cmd(s: &Settings, checkpoint: &Path, data: &Path, movie: Movie, out: &Path) -> Result<()> {
    // settings saved next to the checkpoint by `train`, then the command line
    let mut kv = KeyValues::new();
    if let Some(run) = checkpoint.parent() {
        for f in ["train.kv", "prior.kv"] {
            if run.join(f).exists() {
                kv.merge(&KeyValues::load(run.join(f))?);
            }
        }
    }
    kv.merge(&s.load(&[TrainConfig::KEYS, PRIOR_KEYS])?);
    let model = VistModel::<f32>::load(checkpoint)?;
    let mut cfg = TrainConfig::default();
    cfg.apply_kv(&kv)?;
    let td = TrainData::load(data, &settings::prior_choice(&kv, data, model.cfg.grid)?)?;
    if td.neurons() != model.cfg.neurons || td.channels() != model.cfg.prior_channels {
        return Err(Error::Data(format!(
            "checkpoint expects {} neurons and {} prior channels, data has {} and {}",
            model.cfg.neurons,
            model.cfg.prior_channels,
            td.neurons(),
            td.channels()
        )));
    }
    let r = match movie {
        Movie::A => {
            let start = train::train_frames(&td, &cfg);
            let len = td.a.frames() - start;
            if len == 0 {
                return Err(Error::Usage("holdout is 0, so movie A has no held-out frames".into()));
            }
            train::evaluate(&model, &td.a, &td.rf, start, len, &cfg)?
        }
        Movie::B => train::evaluate(&model, &td.b, &td.rf, 0, td.b.frames(), &cfg)?,
    };
    fs::create_dir_all(out)?;
    fs::write(out.join("per_neuron.csv"), train::per_neuron_csv(&td.neuron_ids, &r))?;
    fs::write(out.join("traces.csv"), train::traces_csv(&td.neuron_ids, &r))?;
    println!("mean CC {:.4}", r.mean_cc);
    println!("mean SD-KL {:.4}", r.mean_sdkl);
    Ok(())
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad entry `{x}` in `{key}`")))
        })
        .collect()
}

fn sweep_cmd(s: &Settings, data: &Path, out: &Path) -> Result<()> {
    let kv = s.load(&[ModelConfig::KEYS, TrainConfig::KEYS, PRIOR_KEYS, SWEEP_KEYS])?;
    let (model, cfg, choice) = configs(&kv, data)?;
    let td = TrainData::load(data, &choice)?;
    let n = td.neurons();
    let sizes: Vec<usize> = match kv.get("sizes") {
        Some(v) => parse_list("sizes", v)?,
        None => {
            let mut v: Vec<usize> = (0..).map(|p| 1 << p).take_while(|&s| s < n).collect();
            v.push(n);
            v
        }
    };
    let k = kv.parse_opt("top_k")?.unwrap_or(4).min(n);
    let reference = train::train(&model, &cfg, &td, |_| {})?;
    let tracked = train::tracked_top_k(&reference.cross.per_neuron_cc, k);
    let ids: Vec<usize> = tracked.iter().map(|&p| td.neuron_ids[p]).collect();
    println!("tracked neurons {ids:?}");
    let rows = train::complementary_sweep(&model, &cfg, &td, &sizes, &tracked, &reference)?;
    train::write_outcome(&reference, &cfg, out.join("reference"))?;
    let csv = train::write_sweep_csv(&rows);
    fs::write(out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn ablate_cmd(s: &Settings, data: &Path, out: &Path) -> Result<()> {
    let kv = s.load(&[ModelConfig::KEYS, TrainConfig::KEYS, PRIOR_KEYS, ABLATE_KEYS])?;
    let (model, cfg, choice) = configs(&kv, data)?;
    let variants: Vec<AblationFlags> = parse_list("variants", kv.get("variants").unwrap_or(DEFAULT_VARIANTS))?;
    let layer_dir = kv.get("layer_dir").map(PathBuf::from);
    let rows = train::ablate(&variants, &model, &cfg, |flags| {
        let c = if flags.no_vit_prior {
            PriorChoice::PatchMean { grid: model.grid }
        } else if flags.prior_layer == PriorLayer::Index(0) {
            choice.clone()
        } else {
            let dir = layer_dir
                .as_ref()
                .ok_or_else(|| Error::Config("prior_layer variants need `layer_dir`".into()))?;
            let l = flags.prior_layer;
            PriorChoice::Files {
                a: dir.join(format!("layer{l}_a.vist")),
                b: dir.join(format!("layer{l}_b.vist")),
            }
        };
        TrainData::load(data, &c)
    })?;
    fs::create_dir_all(out)?;
    let csv = train::write_ablation_csv(&rows);
    fs::write(out.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn gradcheck_cmd(s: &Settings) -> Result<ExitCode> {
    let kv = s.load(&[&["seed"]])?;
    let cases = gradcheck::run_suite(kv.parse_opt("seed")?.unwrap_or(0))?;
    for c in &cases {
        println!("{} {}: {}", if c.passed() { "ok  " } else { "FAIL" }, c.name, c.report);
    }
    let failed: Vec<&str> = cases.iter().filter(|c| !c.passed()).map(|c| c.name).collect();
    if failed.is_empty() {
        println!("all {} cases passed", cases.len());
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("vist: gradient check failed for {}", failed.join(", "));
        Ok(ExitCode::from(3))
    }
}

fn plot_cmd(csv: &Path, out: &Path, neurons: Option<&[usize]>) -> Result<()> {
    let text = fs::read_to_string(csv)
        .map_err(|e| Error::Usage(format!("cannot read {}: {e}", csv.display())))?;
    let figures = plot::figures(&text, neurons)?;
    fs::create_dir_all(out)?;
    for f in &figures {
        let path = out.join(&f.name);
        fs::write(&path, &f.svg)?;
        println!("{}", path.display());
    }
    Ok(())
}
