//! Central finite-difference gradient checking.

use super::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is ~0 are compared on an absolute scale instead of dividing
/// rounding noise by zero.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradFailure {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub tol: f64,
    pub failures: Vec<GradFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} coords, max rel err {:.3e} (tol {:.0e}), {} failing",
            self.checked,
            self.max_rel_err,
            self.tol,
            self.failures.len()
        )?;
        for fl in self.failures.iter().take(5) {
            write!(
                f,
                "; input {} [{}]: tape {:.6e} vs fd {:.6e}",
                fl.input, fl.index, fl.analytic, fl.numeric
            )?;
        }
        Ok(())
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Checks the tape gradient of a scalar function of several tensors against
/// central differences with step `eps`, coordinate by coordinate.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let analytic: Vec<Tensor<f64>> = {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&g, &vars)?;
        let grads = g.backward(out)?;
        vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    };
    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<_> = ins.iter().map(|t| g.constant(t.clone())).collect();
        Ok(f(&g, &vars)?.value().item())
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        tol,
        failures: Vec::new(),
    };
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + eps;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = x0 - eps;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[i].data()[j];
            let e = rel_err(a, numeric);
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(e);
            if !(e < tol) {
                report.failures.push(GradFailure {
                    input: i,
                    index: j,
                    analytic: a,
                    numeric,
                    rel_err: e,
                });
            }
        }
    }
    Ok(report)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Result<Var<'g, f64>>,
{
    grad_check_many(|g, v| f(g, v[0]), std::slice::from_ref(x), eps, tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_sum_has_zero_error() {
        let x = Tensor::new([3], vec![0.5, -0.25, 1.0]).unwrap();
        let r = grad_check(|_, v| Ok(v.sum()), &x, 1e-4, 1e-4).unwrap();
        assert!(r.passed());
        assert!(r.max_rel_err < 1e-10, "{r}");
    }

    #[test]
    fn wrong_backward_is_flagged() {
        // sum(x^2) whose recorded derivative is x instead of 2x
        let x = Tensor::new([3], vec![0.5, -0.25, 1.0]).unwrap();
        let r = grad_check(
            |g, v| {
                let val = v.value();
                let s = val.data().iter().map(|a| a * a).sum();
                g.fused_scalar("bad_square", s, vec![(v, (*val).clone())])
            },
            &x,
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(!r.passed());
        assert_eq!(r.failures.len(), 3);
        assert!((r.failures[0].rel_err - 0.5).abs() < 1e-6);
    }
}
