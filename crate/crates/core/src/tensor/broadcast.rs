use super::kernels::{dot, lane_sum};
use super::{numel, strides_of, Scalar, Tensor};
use crate::error::{Error, Result};

/// Numpy-style broadcast of two shapes aligned at their trailing axes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::config(format!(
                    "shapes {a:?} and {b:?} are not broadcastable"
                )))
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out` (zero on broadcast axes).
fn view_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let lead = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < lead || shape[i - lead] == 1 {
                0
            } else {
                own[i - lead]
            }
        })
        .collect()
}

/// Visits every output offset together with the matching operand offsets.
fn for_each_pair(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total = numel(out);
    if total == 0 {
        return;
    }
    let nd = out.len();
    let mut idx = vec![0usize; nd];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..total {
        f(o, oa, ob);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

/// Splits `out` into an outer index space and a trailing run over which
/// each operand is either constant (stride 0) or contiguous. Returns the
/// number of trailing axes in the run, its length and whether each operand
/// is contiguous along it.
fn trailing_run(out: &[usize], operands: &[&[usize]; 2]) -> (usize, usize, [bool; 2]) {
    let nd = out.len();
    let kind = |s: &[usize], ax: usize, dense: usize| {
        if s[ax] == 0 {
            Some(false)
        } else if s[ax] == dense {
            Some(true)
        } else {
            None
        }
    };
    let mut kinds: [Option<bool>; 2] = [None; 2];
    let (mut k, mut len) = (0, 1);
    while k < nd {
        let ax = nd - 1 - k;
        if out[ax] == 1 {
            k += 1;
            continue;
        }
        let mut ok = true;
        for (slot, s) in kinds.iter_mut().zip(operands) {
            match (kind(s, ax, len), *slot) {
                (Some(c), None) => *slot = Some(c),
                (Some(c), Some(prev)) if c == prev => {}
                _ => ok = false,
            }
        }
        if !ok {
            break;
        }
        len *= out[ax];
        k += 1;
    }
    (k, len, kinds.map(|c| c.unwrap_or(true)))
}

/// Calls `f(out_start, a_start, b_start, len)` for each trailing run;
/// operands constant along the run have their offset repeated, and the
/// last argument tells which operands are contiguous along it.
fn for_each_run(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize, usize, [bool; 2])) {
    let (k, len, kinds) = trailing_run(out, &[sa, sb]);
    let nd = out.len() - k;
    let mut o = 0;
    for_each_pair(&out[..nd], &sa[..nd], &sb[..nd], |_, ia, ib| {
        f(o, ia, ib, len, kinds);
        o += len;
    });
}

pub(crate) fn binary<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    f: impl Fn(S, S) -> S,
) -> Result<Tensor<S>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out = broadcast_shape(a.shape(), b.shape())?;
    let sa = view_strides(a.shape(), &out);
    let sb = view_strides(b.shape(), &out);
    let mut data = vec![S::zero(); numel(&out)];
    let (ad, bd) = (a.data(), b.data());
    for_each_run(&out, &sa, &sb, |o, ia, ib, len, [ca, cb]| {
        let dst = &mut data[o..o + len];
        match (ca, cb) {
            (true, true) => {
                for ((d, &x), &y) in dst.iter_mut().zip(&ad[ia..ia + len]).zip(&bd[ib..ib + len]) {
                    *d = f(x, y);
                }
            }
            (true, false) => {
                let y = bd[ib];
                for (d, &x) in dst.iter_mut().zip(&ad[ia..ia + len]) {
                    *d = f(x, y);
                }
            }
            (false, true) => {
                let x = ad[ia];
                for (d, &y) in dst.iter_mut().zip(&bd[ib..ib + len]) {
                    *d = f(x, y);
                }
            }
            (false, false) => dst.fill(f(ad[ia], bd[ib])),
        }
    });
    Tensor::new(out, data)
}

/// Sums `grad` (shaped like the broadcast output) down to `shape`.
pub(crate) fn reduce_to<S: Scalar>(grad: &Tensor<S>, shape: &[usize]) -> Tensor<S> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let out = grad.shape().to_vec();
    let st = view_strides(shape, &out);
    let zero = vec![0usize; out.len()];
    let mut acc = vec![S::zero(); numel(shape)];
    let gd = grad.data();
    for_each_run(&out, &st, &zero, |o, i, _, len, [contiguous, _]| {
        if contiguous {
            for (a, &g) in acc[i..i + len].iter_mut().zip(&gd[o..o + len]) {
                *a += g;
            }
        } else {
            acc[i] += lane_sum(&gd[o..o + len]);
        }
    });
    Tensor::new(shape.to_vec(), acc).expect("reduced shape")
}

/// Gradient contribution `grad * other` reduced to `shape`, where `other`
/// is broadcast to the output shape.
pub(crate) fn mul_reduce<S: Scalar>(
    grad: &Tensor<S>,
    other: &Tensor<S>,
    shape: &[usize],
) -> Tensor<S> {
    let out = grad.shape().to_vec();
    if other.shape() == out.as_slice() && shape == out.as_slice() {
        return grad.zip_map(other, |g, o| g * o).expect("same shape");
    }
    let s_self = view_strides(shape, &out);
    let s_other = view_strides(other.shape(), &out);
    let mut acc = vec![S::zero(); numel(shape)];
    let (gd, od) = (grad.data(), other.data());
    for_each_run(&out, &s_self, &s_other, |o, i, j, len, [cs, co]| {
        let g = &gd[o..o + len];
        match (cs, co) {
            (true, true) => {
                for ((a, &gv), &ov) in acc[i..i + len].iter_mut().zip(g).zip(&od[j..j + len]) {
                    *a += gv * ov;
                }
            }
            (true, false) => {
                let ov = od[j];
                for (a, &gv) in acc[i..i + len].iter_mut().zip(g) {
                    *a += gv * ov;
                }
            }
            (false, true) => acc[i] += dot(g, &od[j..j + len]),
            (false, false) => acc[i] += lane_sum(g) * od[j],
        }
    });
    Tensor::new(shape.to_vec(), acc).expect("reduced shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_broadcast_from_the_right() {
        assert_eq!(broadcast_shape(&[2, 3, 4], &[4]).unwrap(), vec![2, 3, 4]);
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]).unwrap(), vec![2, 3, 4]);
        assert!(broadcast_shape(&[2, 3], &[4]).is_err());
    }

    #[test]
    fn binary_add_with_row_vector() {
        let a = Tensor::<f64>::from_fn([2, 3], |i| i as f64);
        let b = Tensor::<f64>::new([3], vec![10.0, 20.0, 30.0]).unwrap();
        let c = binary(&a, &b, |x, y| x + y).unwrap();
        assert_eq!(c.data(), &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
    }

    /// Element-by-element reference for the run-based paths.
    fn naive(a: &Tensor<f64>, b: &Tensor<f64>, shape: &[usize]) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let out = broadcast_shape(a.shape(), b.shape()).unwrap();
        let (sa, sb) = (view_strides(a.shape(), &out), view_strides(b.shape(), &out));
        let mut sum = vec![0.0; numel(&out)];
        for_each_pair(&out, &sa, &sb, |o, i, j| sum[o] = a.data()[i] + b.data()[j]);
        let g = Tensor::new(out.clone(), sum).unwrap();
        let st = view_strides(shape, &out);
        let mut red = vec![0.0; numel(shape)];
        let mut mr = vec![0.0; numel(shape)];
        for_each_pair(&out, &st, &sb, |o, i, j| {
            red[i] += g.data()[o];
            mr[i] += g.data()[o] * b.data()[j];
        });
        (g, Tensor::new(shape.to_vec(), red).unwrap(), Tensor::new(shape.to_vec(), mr).unwrap())
    }

    #[test]
    fn runs_match_elementwise_reference() {
        let cases: [(&[usize], &[usize]); 6] = [
            (&[2, 3, 4, 5], &[3, 1, 1]),
            (&[2, 3, 4, 5], &[3, 1, 5]),
            (&[2, 3, 4, 5], &[4, 5]),
            (&[2, 1, 4, 1], &[3, 1, 6]),
            (&[3, 1, 1], &[2, 3, 4, 1]),
            (&[4], &[2, 3, 4]),
        ];
        for (sa, sb) in cases {
            let a = Tensor::<f64>::from_fn(sa.to_vec(), |i| (i as f64 * 0.37).sin());
            let b = Tensor::<f64>::from_fn(sb.to_vec(), |i| (i as f64 * 0.91).cos());
            let out = broadcast_shape(sa, sb).unwrap();
            for shape in [sa, sb] {
                let (g, red, mr) = naive(&a, &b, shape);
                assert_eq!(binary(&a, &b, |x, y| x + y).unwrap(), g);
                for (x, y) in reduce_to(&g, shape).data().iter().zip(red.data()) {
                    assert!((x - y).abs() < 1e-12, "{sa:?} {sb:?}");
                }
                if shape == sa {
                    for (x, y) in mul_reduce(&g, &b, shape).data().iter().zip(mr.data()) {
                        assert!((x - y).abs() < 1e-12, "{sa:?} {sb:?}");
                    }
                }
            }
            assert_eq!(out.len(), sa.len().max(sb.len()));
        }
    }

    #[test]
    fn reduce_sums_broadcast_axes() {
        let g = Tensor::<f64>::ones([2, 3, 4]);
        let r = reduce_to(&g, &[3, 1]);
        assert_eq!(r.shape(), &[3, 1]);
        assert!(r.data().iter().all(|&v| v == 8.0));
    }
}
