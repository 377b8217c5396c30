//! Composite training objective: rate RMSE, a penalty on negative rates and
//! rolling-window soft dynamic time warping, all differentiable.
//!
//! Loss inputs are `[T, C']` or batched `[N, T, C']` rate tensors. Batched
//! terms are computed per sample and averaged over the batch.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::{Scalar, Tensor};

/// Stand-in for the `+inf` boundary of the alignment table.
pub const SENTINEL: f64 = 1e30;

#[derive(Clone, Debug, PartialEq)]
pub struct SoftDtwConfig {
    /// Soft-min temperature.
    pub smoothing: f64,
    /// Rolling window lengths.
    pub windows: Vec<usize>,
    /// One alignment per neuron, summed, instead of one joint alignment of
    /// the population vector.
    pub per_neuron: bool,
}

impl Default for SoftDtwConfig {
    fn default() -> Self {
        SoftDtwConfig {
            smoothing: 1.0,
            windows: vec![6, 12],
            per_neuron: false,
        }
    }
}

impl SoftDtwConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.smoothing > 0.0 && self.smoothing.is_finite()) {
            return Err(Error::config(format!(
                "soft-DTW smoothing must be > 0, got {}",
                self.smoothing
            )));
        }
        if let Some(n) = self.windows.iter().find(|&&n| n < 2) {
            return Err(Error::config(format!("soft-DTW window {n} must be >= 2")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// RMSE weight.
    pub alpha: f64,
    /// Negative-rate penalty weight.
    pub beta: f64,
    /// Weight of every rolling soft-DTW term.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.1,
            beta: 0.5,
            gamma: 5e-6,
        }
    }
}

impl LossWeights {
    /// Plain RMSE objective.
    pub fn rmse_only() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 0.0,
            gamma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::config(format!("loss weights must be finite and >= 0, got {w:?}")));
        }
        Ok(())
    }
}

fn softmin(v: [f64; 3], gamma: f64) -> f64 {
    let m = v[0].min(v[1]).min(v[2]);
    let s: f64 = v.iter().map(|x| (-(x - m) / gamma).exp()).sum();
    m - gamma * s.ln()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Alignment table `R`, `(p+1) x (q+1)` row-major, plus the cost matrix.
fn forward_table(a: &[f64], b: &[f64], dim: usize, gamma: f64) -> (Vec<f64>, Vec<f64>) {
    let (p, q) = (a.len() / dim, b.len() / dim);
    let w = q + 1;
    let mut cost = vec![0.0; p * q];
    for i in 0..p {
        for j in 0..q {
            cost[i * q + j] = sq_dist(&a[i * dim..(i + 1) * dim], &b[j * dim..(j + 1) * dim]);
        }
    }
    let mut r = vec![SENTINEL; (p + 1) * w];
    r[0] = 0.0;
    for i in 1..=p {
        for j in 1..=q {
            let prev = [r[(i - 1) * w + j], r[i * w + j - 1], r[(i - 1) * w + j - 1]];
            r[i * w + j] = cost[(i - 1) * q + j - 1] + softmin(prev, gamma);
        }
    }
    (r, cost)
}

fn check_seqs(a: &[f64], b: &[f64], dim: usize, gamma: f64) -> Result<()> {
    if dim == 0 || a.is_empty() || b.is_empty() || a.len() % dim != 0 || b.len() % dim != 0 {
        return Err(Error::config(format!(
            "soft-DTW needs nonempty sequences of {dim}-vectors, got {} and {} values",
            a.len(),
            b.len()
        )));
    }
    if !(gamma > 0.0) {
        return Err(Error::config(format!("soft-DTW smoothing must be > 0, got {gamma}")));
    }
    Ok(())
}

/// Soft-DTW discrepancy between `a` (`p x dim`, row-major) and `b`
/// (`q x dim`) under squared Euclidean cost.
pub fn soft_dtw(a: &[f64], b: &[f64], dim: usize, gamma: f64) -> Result<f64> {
    check_seqs(a, b, dim, gamma)?;
    let (r, _) = forward_table(a, b, dim, gamma);
    Ok(r[r.len() - 1])
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftDtwGrad {
    pub value: f64,
    pub grad_a: Vec<f64>,
    pub grad_b: Vec<f64>,
}

/// Value and exact gradient. The reverse pass propagates
/// `E[i,j] = dR[p,q]/dR[i,j]` from the final cell using the soft-min
/// weights `exp((R[succ] - cost[succ] - R[i,j]) / gamma)`.
pub fn soft_dtw_grad(a: &[f64], b: &[f64], dim: usize, gamma: f64) -> Result<SoftDtwGrad> {
    check_seqs(a, b, dim, gamma)?;
    let (p, q) = (a.len() / dim, b.len() / dim);
    let (r, cost) = forward_table(a, b, dim, gamma);
    let w = q + 1;
    // e over cells 1..=p, 1..=q, stored at the same offsets as r
    let mut e = vec![0.0; r.len()];
    e[p * w + q] = 1.0;
    for i in (1..=p).rev() {
        for j in (1..=q).rev() {
            if i == p && j == q {
                continue;
            }
            let here = r[i * w + j];
            let mut acc = 0.0;
            for (si, sj) in [(i + 1, j), (i, j + 1), (i + 1, j + 1)] {
                if si > p || sj > q {
                    continue;
                }
                let soft = r[si * w + sj] - cost[(si - 1) * q + sj - 1];
                acc += e[si * w + sj] * ((soft - here) / gamma).exp();
            }
            e[i * w + j] = acc;
        }
    }
    let mut grad_a = vec![0.0; a.len()];
    let mut grad_b = vec![0.0; b.len()];
    for i in 0..p {
        for j in 0..q {
            let eij = e[(i + 1) * w + j + 1];
            if eij == 0.0 {
                continue;
            }
            for k in 0..dim {
                let d = 2.0 * eij * (a[i * dim + k] - b[j * dim + k]);
                grad_a[i * dim + k] += d;
                grad_b[j * dim + k] -= d;
            }
        }
    }
    Ok(SoftDtwGrad {
        value: r[p * w + q],
        grad_a,
        grad_b,
    })
}

/// View of a `[T, C']` or `[N, T, C']` shape as `(N, T, C')`.
fn batch_dims(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match *shape {
        [t, c] => Ok((1, t, c)),
        [n, t, c] => Ok((n, t, c)),
        _ => Err(Error::data(format!("{what}: expected [T, C'] or [N, T, C'], got {shape:?}"))),
    }
}

fn same_shape<S: Scalar>(target: Var<'_, S>, pred: Var<'_, S>, what: &str) -> Result<(usize, usize, usize)> {
    let (ts, ps) = (target.shape(), pred.shape());
    if ts != ps {
        return Err(Error::data(format!("{what}: target {ts:?} and prediction {ps:?} differ")));
    }
    batch_dims(&ps, what)
}

/// Root mean squared error over all `T x C'` entries, averaged over the
/// batch.
pub fn rmse<'g, S: Scalar>(target: Var<'g, S>, pred: Var<'g, S>) -> Result<Var<'g, S>> {
    let (n, t, c) = same_shape(target, pred, "rmse")?;
    let sq = pred.sub(target)?.square().reshape([n, t * c])?;
    let mut total: Option<Var<'g, S>> = None;
    for i in 0..n {
        let r = sq.narrow(0, i, 1)?.mean().sqrt();
        total = Some(match total {
            Some(acc) => acc.add(r)?,
            None => r,
        });
    }
    let total = total.ok_or_else(|| Error::data("rmse: empty batch"))?;
    Ok(total.scale(S::cast(1.0 / n as f64)).named("loss_rmse"))
}

/// Mean of `max(0, -pred)` over all entries.
pub fn neg_relu_penalty<S: Scalar>(pred: Var<'_, S>) -> Var<'_, S> {
    pred.neg().relu().mean().named("loss_negrelu")
}

/// Value and gradients of the rolling-window objective on `f64` data laid
/// out `[N, T, C']`.
pub fn rolling_soft_dtw_raw(
    target: &[f64],
    pred: &[f64],
    dims: (usize, usize, usize),
    window: usize,
    cfg: &SoftDtwConfig,
) -> Result<SoftDtwGrad> {
    let (n, t, c) = dims;
    if t <= window {
        return Err(Error::config(format!(
            "rolling soft-DTW window {window} needs more than {window} frames, got {t}"
        )));
    }
    cfg.validate()?;
    let count = t - window;
    let gamma = cfg.smoothing;
    // one job per (sample, window); each yields its value and window-local
    // gradients, accumulated below in job order
    let jobs = n * count;
    let results = exec::map_indexed(jobs, |job| -> Result<SoftDtwGrad> {
        let (s, w) = (job / count, job % count);
        let base = (s * t + w) * c;
        let ty = &target[base..base + window * c];
        let py = &pred[base..base + window * c];
        if !cfg.per_neuron {
            return soft_dtw_grad(ty, py, c, gamma);
        }
        let mut out = SoftDtwGrad {
            value: 0.0,
            grad_a: vec![0.0; window * c],
            grad_b: vec![0.0; window * c],
        };
        for k in 0..c {
            let col = |x: &[f64]| (0..window).map(|i| x[i * c + k]).collect::<Vec<_>>();
            let g = soft_dtw_grad(&col(ty), &col(py), 1, gamma)?;
            out.value += g.value;
            for i in 0..window {
                out.grad_a[i * c + k] = g.grad_a[i];
                out.grad_b[i * c + k] = g.grad_b[i];
            }
        }
        Ok(out)
    });
    let scale = 1.0 / (count * n) as f64;
    let mut total = SoftDtwGrad {
        value: 0.0,
        grad_a: vec![0.0; target.len()],
        grad_b: vec![0.0; pred.len()],
    };
    for (job, r) in results.into_iter().enumerate() {
        let r = r?;
        let (s, w) = (job / count, job % count);
        let base = (s * t + w) * c;
        total.value += r.value;
        for (i, (ga, gb)) in r.grad_a.iter().zip(&r.grad_b).enumerate() {
            total.grad_a[base + i] += ga * scale;
            total.grad_b[base + i] += gb * scale;
        }
    }
    total.value *= scale;
    Ok(total)
}

/// Mean soft-DTW over the `T - n` windows of length `n` starting at
/// `0..T-n`, taken at the same offsets in target and prediction.
pub fn rolling_soft_dtw<'g, S: Scalar>(
    target: Var<'g, S>,
    pred: Var<'g, S>,
    window: usize,
    cfg: &SoftDtwConfig,
) -> Result<Var<'g, S>> {
    let dims = same_shape(target, pred, "rolling soft-DTW")?;
    let (tv, pv) = (target.value(), pred.value());
    let g = rolling_soft_dtw_raw(&tv.to_f64_vec(), &pv.to_f64_vec(), dims, window, cfg)?;
    let shape = pv.shape().to_vec();
    let to_t = |v: &[f64]| Tensor::from_f64(shape.clone(), v);
    let graph = pred.graph();
    let v = graph.fused_scalar(
        "soft_dtw",
        S::cast(g.value),
        vec![(target, to_t(&g.grad_a)?), (pred, to_t(&g.grad_b)?)],
    )?;
    Ok(v.named(format!("loss_sdtw{window}")))
}

/// Individual terms alongside the weighted total.
pub struct LossTerms<'g, S: Scalar> {
    pub total: Var<'g, S>,
    pub rmse: Var<'g, S>,
    pub neg_relu: Var<'g, S>,
    /// `(window, term)` in configured order.
    pub sdtw: Vec<(usize, Var<'g, S>)>,
}

/// `alpha * rmse + beta * neg_relu + gamma * sum_n rolling_soft_dtw(n)`.
pub fn vist_loss<'g, S: Scalar>(
    target: Var<'g, S>,
    pred: Var<'g, S>,
    weights: &LossWeights,
    cfg: &SoftDtwConfig,
) -> Result<LossTerms<'g, S>> {
    weights.validate()?;
    let rmse_t = rmse(target, pred)?;
    let neg = neg_relu_penalty(pred);
    let mut total = rmse_t
        .scale(S::cast(weights.alpha))
        .add(neg.scale(S::cast(weights.beta)))?;
    let mut sdtw = Vec::with_capacity(cfg.windows.len());
    for &n in &cfg.windows {
        let term = rolling_soft_dtw(target, pred, n, cfg)?;
        total = total.add(term.scale(S::cast(weights.gamma)))?;
        sdtw.push((n, term));
    }
    Ok(LossTerms {
        total: total.named("loss_total"),
        rmse: rmse_t,
        neg_relu: neg,
        sdtw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;

    #[test]
    fn single_cell() {
        assert_eq!(soft_dtw(&[1.5], &[1.5], 1, 1.0).unwrap(), 0.0);
        assert_eq!(soft_dtw(&[1.0, 2.0], &[0.0, 0.0], 2, 0.3).unwrap(), 5.0);
    }

    #[test]
    fn rmse_hand_value() {
        let g = Graph::<f64>::new();
        let y = g.constant(Tensor::new([1, 2], vec![0.0, 0.0]).unwrap());
        let p = g.param(Tensor::new([1, 2], vec![3.0, 4.0]).unwrap());
        let r = rmse(y, p).unwrap().value().item();
        assert!((r - (25.0f64 / 2.0).sqrt()).abs() < 1e-15);
        assert_eq!(rmse(y, y).unwrap().value().item(), 0.0);
    }

    #[test]
    fn neg_relu_hand_value() {
        let g = Graph::<f64>::new();
        let p = g.constant(Tensor::new([1, 2], vec![-2.0, 2.0]).unwrap());
        assert_eq!(neg_relu_penalty(p).value().item(), 1.0);
    }

    #[test]
    fn mismatched_shapes_are_data_errors() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([3, 2]));
        let b = g.constant(Tensor::zeros([2, 3]));
        assert!(matches!(rmse(a, b), Err(Error::Data(_))));
    }

    #[test]
    fn window_too_long() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([6, 2]));
        let cfg = SoftDtwConfig::default();
        assert!(matches!(rolling_soft_dtw(a, a, 6, &cfg), Err(Error::Config(_))));
    }
}
