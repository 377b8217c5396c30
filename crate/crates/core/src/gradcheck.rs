//! Finite-difference checks of every differentiable op and of the full
//! model, shared by the test suite and the `gradcheck` command.

use crate::autograd::{grad_check_many, GradCheckReport, Graph, NormMode, Var};
use crate::error::Result;
use crate::loss::{neg_relu_penalty, rmse, rolling_soft_dtw, vist_loss, LossWeights, SoftDtwConfig};
use crate::model::{Mode, ModelConfig, VistModel};
use crate::tensor::kernels::Conv3dSpec;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference step.
pub const EPS: f64 = 1e-4;
/// Tolerance for single ops.
pub const OP_TOL: f64 = 1e-4;
/// Tolerance for the model and the full loss.
pub const MODEL_TOL: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl SuiteCase {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values in `[-1, 1]` kept at least `gap` away from zero, for ops with a
/// kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(gap..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Weighted sum with fixed random weights, so every output coordinate
/// reaches the scalar with a different sensitivity.
fn probe<'g>(g: &'g Graph<f64>, y: Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(&mut rng, &y.shape(), -1.0, 1.0);
    Ok(y.mul(g.constant(w))?.sum())
}

type Case = (
    &'static str,
    Vec<Tensor<f64>>,
    Box<dyn for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>>,
);

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut cases: Vec<Case> = Vec::new();
    let mut r = |shape: &[usize]| uniform(rng, shape, -1.0, 1.0);
    cases.push((
        "add_broadcast",
        vec![r(&[2, 3, 4]), r(&[3, 1])],
        Box::new(|g, v| probe(g, v[0].add(v[1])?, 1)),
    ));
    cases.push((
        "sub_broadcast",
        vec![r(&[2, 3, 4]), r(&[4])],
        Box::new(|g, v| probe(g, v[0].sub(v[1])?, 2)),
    ));
    cases.push((
        "mul_broadcast",
        vec![r(&[2, 3, 4]), r(&[2, 1, 4])],
        Box::new(|g, v| probe(g, v[0].mul(v[1])?, 3)),
    ));
    cases.push(("neg", vec![r(&[5])], Box::new(|g, v| probe(g, v[0].neg(), 4))));
    cases.push(("scale", vec![r(&[5])], Box::new(|g, v| probe(g, v[0].scale(-2.5), 5))));
    cases.push(("offset", vec![r(&[5])], Box::new(|g, v| probe(g, v[0].offset(0.75), 6))));
    cases.push(("square", vec![r(&[5])], Box::new(|g, v| probe(g, v[0].square(), 7))));
    cases.push(("sum", vec![r(&[3, 4])], Box::new(|_, v| Ok(v[0].sum().square()))));
    cases.push(("mean", vec![r(&[3, 4])], Box::new(|_, v| Ok(v[0].mean().square()))));
    cases.push((
        "reshape",
        vec![r(&[2, 6])],
        Box::new(|g, v| probe(g, v[0].reshape([3, 4])?, 8)),
    ));
    cases.push((
        "permute",
        vec![r(&[2, 3, 4])],
        Box::new(|g, v| probe(g, v[0].permute(&[2, 0, 1])?, 9)),
    ));
    cases.push((
        "narrow",
        vec![r(&[3, 5])],
        Box::new(|g, v| probe(g, v[0].narrow(1, 1, 3)?, 10)),
    ));
    cases.push((
        "conv3d_causal_dilated",
        vec![r(&[2, 2, 6, 4, 4]), r(&[3, 2, 2, 3, 3])],
        Box::new(|g, v| {
            let spec = Conv3dSpec::default().causal_t(2).dilation_t(2).same_hw(1);
            probe(g, v[0].conv3d(v[1], spec)?, 11)
        }),
    ));
    cases.push((
        "conv3d_depthwise",
        vec![r(&[1, 3, 5, 3, 3]), r(&[3, 1, 3, 3, 3])],
        Box::new(|g, v| {
            let spec = Conv3dSpec::default().causal_t(2).same_hw(1).groups(3);
            probe(g, v[0].conv3d(v[1], spec)?, 12)
        }),
    ));
    cases.push((
        "conv3d_pointwise",
        vec![r(&[2, 4, 3, 2, 2]), r(&[2, 2, 1, 1, 1])],
        Box::new(|g, v| probe(g, v[0].conv3d(v[1], Conv3dSpec::default().groups(2))?, 13)),
    ));
    cases.push((
        "linear",
        vec![r(&[2, 3, 4]), r(&[5, 4]), r(&[5])],
        Box::new(|g, v| probe(g, v[0].linear(v[1], Some(v[2]))?, 14)),
    ));
    cases.push((
        "batch_norm_train",
        vec![r(&[2, 3, 4, 2, 2]), r(&[3]), r(&[3])],
        Box::new(|g, v| probe(g, v[0].batch_norm(v[1], v[2], NormMode::Train, 1e-5)?.0, 15)),
    ));
    cases.push((
        "batch_norm_eval",
        vec![r(&[2, 3, 4, 2, 2]), r(&[3]), r(&[3])],
        Box::new(|g, v| {
            let (m, var) = ([0.1, -0.2, 0.3], [0.5, 1.5, 0.8]);
            probe(g, v[0].batch_norm(v[1], v[2], NormMode::Eval(&m, &var), 1e-5)?.0, 16)
        }),
    ));
    cases.push((
        "layer_norm",
        vec![r(&[2, 4, 3, 2])],
        Box::new(|g, v| probe(g, v[0].layer_norm(1, 1e-6)?, 17)),
    ));
    cases.push((
        "avg_pool_spatial",
        vec![r(&[2, 2, 3, 4, 4])],
        Box::new(|g, v| probe(g, v[0].avg_pool_spatial(2, 2)?, 18)),
    ));
    cases.push((
        "rmse",
        vec![r(&[2, 5, 3]), r(&[2, 5, 3])],
        Box::new(|_, v| rmse(v[0], v[1])),
    ));
    cases.push((
        "soft_dtw_rolling_joint",
        vec![r(&[2, 8, 3]), r(&[2, 8, 3])],
        Box::new(|_, v| rolling_soft_dtw(v[0], v[1], 4, &SoftDtwConfig::default())),
    ));
    cases.push((
        "soft_dtw_rolling_per_neuron",
        vec![r(&[1, 7, 2]), r(&[1, 7, 2])],
        Box::new(|_, v| {
            let cfg = SoftDtwConfig {
                smoothing: 0.5,
                per_neuron: true,
                ..SoftDtwConfig::default()
            };
            rolling_soft_dtw(v[0], v[1], 3, &cfg)
        }),
    ));
    cases.push((
        "relu",
        vec![away_from_zero(rng, &[6], 0.05)],
        Box::new(|g, v| probe(g, v[0].relu(), 19)),
    ));
    cases.push((
        "neg_relu_penalty",
        vec![away_from_zero(rng, &[2, 3, 2], 0.05)],
        Box::new(|_, v| Ok(neg_relu_penalty(v[0]))),
    ));
    cases.push((
        "sqrt",
        vec![uniform(rng, &[6], 0.2, 1.0)],
        Box::new(|g, v| probe(g, v[0].sqrt(), 20)),
    ));
    cases
}

/// Full loss with a window short enough for a 12-frame sequence.
fn full_loss_config() -> SoftDtwConfig {
    SoftDtwConfig {
        windows: vec![3, 6],
        ..SoftDtwConfig::default()
    }
}

/// Tiny model with every trainable tensor redrawn, weights in
/// `[-0.5, 0.5]` and biases in `[-1.5, 1.5]`, so that zero-initialized
/// gates do not hide the conditioning path.
pub fn perturbed_tiny_model(seed: u64) -> Result<VistModel<f64>> {
    let mut model = VistModel::<f64>::new(ModelConfig {
        seed,
        ..ModelConfig::tiny()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in model.params.iter_mut().filter(|p| p.trainable) {
        let r = if p.name.ends_with(".bias") { 1.5 } else { 0.5 };
        for v in p.value.data_mut() {
            *v = rng.random_range(-r..r);
        }
    }
    Ok(model)
}

/// Every op case followed by the full model under the combined loss.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, inputs, f) in op_cases(&mut rng) {
        let report = grad_check_many(|g, v| f(g, v), &inputs, EPS, OP_TOL)?;
        out.push(SuiteCase { name, report });
    }

    let mut full = |n: &[usize]| uniform(&mut rng, n, -1.0, 1.0);
    let (t, c) = (12, 3);
    let (target, pred) = (full(&[2, t, c]), full(&[2, t, c]));
    let report = grad_check_many(
        |_, v| Ok(vist_loss(v[0], v[1], &LossWeights::default(), &full_loss_config())?.total),
        &[target, pred],
        EPS,
        MODEL_TOL,
    )?;
    out.push(SuiteCase { name: "vist_loss", report });

    out.push(SuiteCase {
        name: "full_model",
        report: model_check(seed)?,
    });
    Ok(out)
}

/// Smallest distance from zero allowed for any rectifier input at the
/// model check point. A central difference straddling a kink measures the
/// average of two slopes, which is not the derivative at the point.
pub const KINK_MARGIN: f64 = 1e-3;

/// Smallest across-neuron standard deviation allowed at the layer-norm
/// input. With two neurons the normalization is `d / sqrt(d^2 + eps)`, a
/// smoothed sign whose third derivative near `d = 0` swamps a central
/// difference.
pub const SPREAD_MARGIN: f64 = 0.05;

/// Draws of the model check point before giving up on finding one clear
/// of every kink.
const MAX_DRAWS: u64 = 64;

struct ModelPoint {
    model: VistModel<f64>,
    prior: Tensor<f64>,
    rf: Tensor<f64>,
    target: Tensor<f64>,
}

fn draw_point(seed: u64) -> Result<ModelPoint> {
    let model = perturbed_tiny_model(seed)?;
    let cfg = &model.cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let t = 12;
    let prior = uniform(&mut rng, &[1, cfg.prior_channels, t, cfg.grid, cfg.grid], -1.0, 1.0);
    let rf = uniform(&mut rng, &[cfg.neurons, cfg.grid, cfg.grid], 0.0, 1.0);
    let target = uniform(&mut rng, &[1, t, cfg.neurons], 0.0, 2.0);
    Ok(ModelPoint { model, prior, rf, target })
}

/// Whether the point is smooth at the difference scale: every rectifier
/// input (batch-norm outputs feeding ReLUs, the prediction feeding the
/// negative-rate penalty) is clear of zero and the layer-norm input is
/// spread across neurons at every location.
fn is_smooth(p: &ModelPoint) -> Result<bool> {
    let g = Graph::<f64>::new();
    p.model.forward(&g, g.constant(p.prior.clone()), g.constant(p.rf.clone()), Mode::Train, false)?;
    let mut closest = f64::INFINITY;
    for suffix in [".bn", "readout"] {
        for (_, v) in g.labelled(suffix) {
            closest = v.data().iter().fold(closest, |m, x| m.min(x.abs()));
        }
    }
    let mut spread = f64::INFINITY;
    for (_, v) in g.labelled("out_proj") {
        let sh = v.shape();
        let (c, inner) = (sh[1], sh[2..].iter().product::<usize>());
        for n in 0..sh[0] {
            for k in 0..inner {
                let xs: Vec<f64> = (0..c).map(|ch| v.data()[(n * c + ch) * inner + k]).collect();
                let mean = xs.iter().sum::<f64>() / c as f64;
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / c as f64;
                spread = spread.min(var.sqrt());
            }
        }
    }
    Ok(closest >= KINK_MARGIN && spread >= SPREAD_MARGIN)
}

/// Gradient of the combined loss through the tiny model with respect to
/// every parameter and the prior input, at the first draw from `seed` that
/// is smooth at the difference scale.
pub fn model_check(seed: u64) -> Result<GradCheckReport> {
    let mut draw = 0;
    let p = loop {
        let p = draw_point(seed.wrapping_add(draw))?;
        if is_smooth(&p)? {
            break p;
        }
        draw += 1;
        if draw == MAX_DRAWS {
            return Err(crate::error::Error::Estimation(format!(
                "no smooth model check point in {MAX_DRAWS} draws"
            )));
        }
    };
    let mut inputs: Vec<Tensor<f64>> = p.model.params.iter().map(|q| q.value.clone()).collect();
    inputs.push(p.prior.clone());
    let np = p.model.params.len();
    grad_check_many(
        |g, v| {
            let bound = p.model.params.bind_vars(&v[..np])?;
            let fwd = p.model.forward_bound(&bound, v[np], g.constant(p.rf.clone()), Mode::Train)?;
            let terms = vist_loss(
                g.constant(p.target.clone()),
                fwd.output,
                &LossWeights::default(),
                &full_loss_config(),
            )?;
            Ok(terms.total)
        },
        &inputs,
        EPS,
        MODEL_TOL,
    )
}
