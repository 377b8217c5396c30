use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Linear warmup from 0 to `peak` over `warmup` steps, then a half cosine
/// from `peak` down to `last` at step `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub last: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if step <= self.warmup {
            if self.warmup == 0 {
                return self.peak;
            }
            return self.peak * step as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let p = ((step - self.warmup) as f64 / span as f64).min(1.0);
        self.last + (self.peak - self.last) * (1.0 + (std::f64::consts::PI * p).cos()) / 2.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// Adam moments per trainable tensor with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<S: Scalar> {
    pub cfg: AdamWConfig,
    pub step: u64,
    m: Vec<Option<Tensor<S>>>,
    v: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(cfg: AdamWConfig, params: &ParamStore<S>) -> Self {
        let moments = |p: &ParamStore<S>| {
            p.iter()
                .map(|p| p.trainable.then(|| Tensor::zeros(p.value.shape().to_vec())))
                .collect::<Vec<_>>()
        };
        AdamW {
            cfg,
            step: 0,
            m: moments(params),
            v: moments(params),
        }
    }

    /// One update. `grads[i]` belongs to the `i`-th tensor of the store;
    /// buffers and tensors without a gradient are skipped, except that
    /// trainable tensors with no gradient still decay.
    pub fn step(&mut self, params: &mut ParamStore<S>, grads: &[Option<Tensor<S>>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::config(format!(
                "optimizer got {} gradients for {} tensors",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (S::cast(c.beta1), S::cast(c.beta2));
        let decay = S::cast(1.0 - lr * c.weight_decay);
        let step_size = S::cast(lr / bc1);
        let inv_bc2 = S::cast(1.0 / bc2);
        let eps = S::cast(c.eps);
        for i in 0..params.len() {
            let p = params.by_index_mut(i);
            if !p.trainable {
                continue;
            }
            let (m, v) = (
                self.m[i].as_mut().expect("moment of trainable tensor"),
                self.v[i].as_mut().expect("moment of trainable tensor"),
            );
            if grads[i].as_ref().is_some_and(|g| g.shape() != p.value.shape()) {
                return Err(Error::config(format!("gradient shape mismatch for `{}`", p.name)));
            }
            let w = p.value.data_mut();
            for x in w.iter_mut() {
                *x *= decay;
            }
            let Some(g) = &grads[i] else { continue };
            for (((x, &gi), mi), vi) in w
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (S::one() - b1) * gi;
                *vi = b2 * *vi + (S::one() - b2) * gi * gi;
                *x -= step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Running mean of parameter snapshots.
#[derive(Clone, Debug)]
pub struct Swa<S: Scalar> {
    pub average: Option<ParamStore<S>>,
    pub count: usize,
}

impl<S: Scalar> Default for Swa<S> {
    fn default() -> Self {
        Swa {
            average: None,
            count: 0,
        }
    }
}

impl<S: Scalar> Swa<S> {
    /// `avg <- avg + (new - avg) / k` over trainable tensors; buffers are
    /// copied from the latest snapshot.
    pub fn update(&mut self, snapshot: &ParamStore<S>) {
        self.count += 1;
        let Some(avg) = &mut self.average else {
            self.average = Some(snapshot.clone());
            return;
        };
        let w = S::one() / S::cast(self.count as f64);
        for i in 0..avg.len() {
            let (a, s) = (avg.by_index_mut(i), snapshot.by_index(i));
            if !a.trainable {
                a.value = s.value.clone();
                continue;
            }
            for (x, &y) in a.value.data_mut().iter_mut().zip(s.value.data()) {
                *x += (y - *x) * w;
            }
        }
    }
}
