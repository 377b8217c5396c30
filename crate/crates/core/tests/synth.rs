mod common;

use vist_core::rf::Gaussian2d;
use vist_core::synth::{
    gen_video, ground_truth_rates, make_dataset, mean_frame_difference, random_population, PopulationSpec,
    StimulusSpec, SynthConfig, SynthNeuron,
};
use vist_core::train::{PriorChoice, TrainData};
use vist_core::Tensor;

fn small_config(seed: u64) -> SynthConfig {
    let mut c = SynthConfig::desk(seed);
    c.population.neurons = 3;
    c.movie_a.frames = 60;
    c.movie_b.frames = 50;
    for side in [&mut c.movie_a.side, &mut c.movie_b.side, &mut c.population.side] {
        *side = 24;
    }
    c.trials = 3;
    c
}

#[test]
fn linear_nonlinear_rates_by_hand() {
    let n = SynthNeuron {
        rf: Gaussian2d {
            cx: 0.5,
            cy: 0.5,
            sx: 0.2,
            sy: 0.3,
            angle: 0.4,
            amplitude: 1.0,
        },
        temporal: vec![0.6, -0.3, 0.1],
        gain: 2.0,
        threshold: 0.4,
        max_rate: 1.5,
    };
    let video = Tensor::<f64>::from_fn([7, 6, 6], |i| ((i * 13) % 17) as f64 / 16.0);
    let rates = ground_truth_rates(&video, std::slice::from_ref(&n)).unwrap().remove(0);
    let map = n.spatial_rf(6).unwrap();
    let proj: Vec<f64> = (0..7)
        .map(|t| (0..36).map(|p| video.data()[t * 36 + p] * map.data()[p]).sum())
        .collect();
    for t in 0..7usize {
        // frames before the first repeat it
        let drive: f64 = (0..3).map(|lag| n.temporal[lag] * proj[t.saturating_sub(lag)]).sum();
        let x: f64 = 2.0 * drive - 0.4;
        let want = (1.0 + x.exp()).ln().min(1.5);
        assert!((rates[t] - want).abs() < 1e-12, "t={t}: {} vs {want}", rates[t]);
    }
}

#[test]
fn datasets_are_reproducible_and_seed_dependent() {
    let (a, b) = (make_dataset(&small_config(5)).unwrap(), make_dataset(&small_config(5)).unwrap());
    assert_eq!(a.movie_a, b.movie_a);
    assert_eq!(a.movie_b, b.movie_b);
    let c = make_dataset(&small_config(6)).unwrap();
    assert_ne!(a.movie_a.rates, c.movie_a.rates);
}

#[test]
fn trial_average_tracks_the_true_rate() {
    let mut cfg = small_config(7);
    cfg.trials = 40;
    cfg.movie_a.frames = 300;
    let ds = make_dataset(&cfg).unwrap();
    let rec = &ds.movie_a;
    for n in 0..cfg.population.neurons {
        let (truth, avg) = (rec.truth.row(n), rec.rates.row(n));
        assert!(truth.iter().all(|&r| (0.0..=cfg.population.max_rate).contains(&r)));
        assert!(common::pearson(truth, avg) > 0.9, "neuron {n}");
    }
}

#[test]
fn movies_differ_in_dynamics() {
    let a = gen_video(&StimulusSpec::movie_a(120, 32, 1)).unwrap();
    let b = gen_video(&StimulusSpec::movie_b(120, 32, 1)).unwrap();
    assert_eq!(a.shape(), &[120, 32, 32]);
    assert!(a.data().iter().chain(b.data()).all(|&v| (0.0..=255.0).contains(&v)));
    let (da, db) = (mean_frame_difference(&a), mean_frame_difference(&b));
    assert!((da - db).abs() > 0.1 * da.max(db), "{da} vs {db}");
}

#[test]
fn population_tiles_the_frame() {
    let pop = random_population(&PopulationSpec::desk(16, 96, 3)).unwrap();
    assert_eq!(pop.len(), 16);
    let on = pop.iter().filter(|n| n.temporal[1] > 0.0).count();
    assert!(on > 0 && on < 16, "{on} ON cells");
    for n in &pop {
        assert!((0.1..0.9).contains(&n.rf.cx) && (0.1..0.9).contains(&n.rf.cy));
        let norm: f64 = n.temporal.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }
}

#[test]
fn saved_dataset_reloads_as_training_data() {
    let ds = make_dataset(&small_config(8)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    let choice = PriorChoice::PatchMean { grid: 4 };
    let mem = TrainData::from_dataset(&ds, &choice).unwrap();
    let disk = TrainData::load(dir.path(), &choice).unwrap();
    assert_eq!(mem, disk);
    assert!(TrainData::load(dir.path().join("nowhere"), &choice).is_err());
}
