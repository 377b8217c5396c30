//! Forward and backward kernels for the structured ops.
//!
//! These operate on plain tensors; the autograd graph wires them together.
//! Layouts: convolutions and pooling use `[N, C, T, H, W]`, the affine map
//! works on the last axis.

use super::{numel, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::exec::for_each_chunk;

#[inline]
fn axpy<S: Scalar>(y: &mut [S], a: S, x: &[S]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

const LANES: usize = 8;

/// Dot product with `LANES` interleaved partial sums, combined in a fixed
/// order so the result does not depend on threading.
#[inline]
pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [S::zero(); LANES];
    let (ac, bc) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = S::zero();
    for (&x, &y) in ar.iter().zip(br) {
        tail += x * y;
    }
    lane_total(acc) + tail
}

#[inline]
fn lane_total<S: Scalar>(acc: [S; LANES]) -> S {
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
}

/// Sum with the same lane structure as [`dot`].
#[inline]
pub(crate) fn lane_sum<S: Scalar>(a: &[S]) -> S {
    let mut acc = [S::zero(); LANES];
    let c = a.chunks_exact(LANES);
    let r = c.remainder();
    for x in c {
        for l in 0..LANES {
            acc[l] += x[l];
        }
    }
    lane_total(acc) + r.iter().copied().fold(S::zero(), |s, v| s + v)
}

/// Voxels per cache block in the pointwise kernels.
const VBLOCK: usize = 1024;

// ---------------------------------------------------------------------------
// 3D convolution
// ---------------------------------------------------------------------------

/// Padding, dilation and grouping of a stride-1 3D cross-correlation.
///
/// Axes are ordered `(t, h, w)`; padding is `(before, after)` per axis so
/// causal convolutions can pad on the left only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub pad: [(usize, usize); 3],
    pub dilation: [usize; 3],
    pub groups: usize,
}

impl Default for Conv3dSpec {
    fn default() -> Self {
        Conv3dSpec {
            pad: [(0, 0); 3],
            dilation: [1; 3],
            groups: 1,
        }
    }
}

impl Conv3dSpec {
    pub fn causal_t(mut self, left: usize) -> Self {
        self.pad[0] = (left, 0);
        self
    }

    pub fn same_hw(mut self, pad: usize) -> Self {
        self.pad[1] = (pad, pad);
        self.pad[2] = (pad, pad);
        self
    }

    pub fn dilation_t(mut self, d: usize) -> Self {
        self.dilation[0] = d;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    inp: [usize; 3],
    k: [usize; 3],
    out: [usize; 3],
    spec: Conv3dSpec,
}

const AXES: [&str; 3] = ["t", "h", "w"];

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], spec: Conv3dSpec) -> Result<Self> {
        if x.len() != 5 {
            return Err(Error::config(format!(
                "conv3d: input must be [N,C,T,H,W], got {x:?}"
            )));
        }
        if w.len() != 5 {
            return Err(Error::config(format!(
                "conv3d: weight must be [Cout,Cin/G,kt,kh,kw], got {w:?}"
            )));
        }
        let g = spec.groups;
        if g == 0 || x[1] % g != 0 {
            return Err(Error::config(format!(
                "conv3d: axis `in_channels` ({}) not divisible by groups {g}",
                x[1]
            )));
        }
        if w[0] % g != 0 {
            return Err(Error::config(format!(
                "conv3d: axis `out_channels` ({}) not divisible by groups {g}",
                w[0]
            )));
        }
        if w[1] != x[1] / g {
            return Err(Error::axis("conv3d", "in_channels/groups", x[1] / g, w[1]));
        }
        let mut out = [0; 3];
        for a in 0..3 {
            let d = spec.dilation[a];
            if d == 0 {
                return Err(Error::config(format!("conv3d: zero dilation on axis `{}`", AXES[a])));
            }
            let padded = x[2 + a] + spec.pad[a].0 + spec.pad[a].1;
            let span = d * (w[2 + a] - 1) + 1;
            if w[2 + a] == 0 || span > padded {
                return Err(Error::config(format!(
                    "conv3d: kernel span {span} exceeds padded input {padded} on axis `{}`",
                    AXES[a]
                )));
            }
            out[a] = padded - span + 1;
        }
        Ok(ConvGeom {
            n: x[0],
            cin: x[1],
            cout: w[0],
            cin_g: x[1] / g,
            cout_g: w[0] / g,
            inp: [x[2], x[3], x[4]],
            k: [w[2], w[3], w[4]],
            out,
            spec,
        })
    }

    fn in_plane(&self) -> usize {
        self.inp.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.out.iter().product()
    }

    fn taps(&self) -> usize {
        self.k.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.k == [1, 1, 1] && self.spec.pad == [(0, 0); 3]
    }

    fn padded(&self) -> [usize; 3] {
        let p = self.spec.pad;
        [0, 1, 2].map(|a| self.inp[a] + p[a].0 + p[a].1)
    }

    fn padded_plane(&self) -> usize {
        self.padded().iter().product()
    }

    /// Outputs are accumulated with the padded input's strides, so every
    /// kernel tap is a single contiguous run. `span` is the length of that
    /// run, ending at the last real output voxel.
    fn span(&self) -> usize {
        let [_, p1, p2] = self.padded();
        ((self.out[0] - 1) * p1 + self.out[1] - 1) * p2 + self.out[2]
    }

    /// Start of each tap's run in the padded input, in weight order.
    fn tap_offsets(&self) -> Vec<usize> {
        let [_, p1, p2] = self.padded();
        let d = self.spec.dilation;
        let mut offs = Vec::with_capacity(self.taps());
        for a in 0..self.k[0] {
            for b in 0..self.k[1] {
                for c in 0..self.k[2] {
                    offs.push((a * d[0] * p1 + b * d[1]) * p2 + c * d[2]);
                }
            }
        }
        offs
    }

    /// Copies `planes` input planes into zero-padded planes.
    fn pad_input<S: Scalar>(&self, src: &[S], planes: usize) -> Vec<S> {
        let (ip, pp) = (self.in_plane(), self.padded_plane());
        let mut dst = vec![S::zero(); planes * pp];
        for_each_chunk(&mut dst, pp, |i, plane| self.pad_plane(&src[i * ip..][..ip], plane));
        dst
    }

    fn pad_plane<S: Scalar>(&self, src: &[S], plane: &mut [S]) {
        let [t, h, w] = self.inp;
        let [_, p1, p2] = self.padded();
        let lo = self.spec.pad.map(|p| p.0);
        for it in 0..t {
            for ih in 0..h {
                let at = ((it + lo[0]) * p1 + ih + lo[1]) * p2 + lo[2];
                plane[at..at + w].copy_from_slice(&src[(it * h + ih) * w..][..w]);
            }
        }
    }

    fn unpad_plane<S: Scalar>(&self, padded: &[S], plane: &mut [S]) {
        let [t, h, w] = self.inp;
        let [_, p1, p2] = self.padded();
        let lo = self.spec.pad.map(|p| p.0);
        for it in 0..t {
            for ih in 0..h {
                let at = ((it + lo[0]) * p1 + ih + lo[1]) * p2 + lo[2];
                plane[(it * h + ih) * w..][..w].copy_from_slice(&padded[at..at + w]);
            }
        }
    }

    /// Moves an output plane between dense and padded-stride layouts; the
    /// padded side's gaps are left untouched.
    fn restride<S: Scalar>(&self, strided: &mut [S], dense: &mut [S], to_dense: bool) {
        let [t, h, w] = self.out;
        let [_, p1, p2] = self.padded();
        for ot in 0..t {
            for oh in 0..h {
                let (s, d) = ((ot * p1 + oh) * p2, (ot * h + oh) * w);
                if to_dense {
                    dense[d..d + w].copy_from_slice(&strided[s..s + w]);
                } else {
                    strided[s..s + w].copy_from_slice(&dense[d..d + w]);
                }
            }
        }
    }
}

pub fn conv3d_forward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    spec: Conv3dSpec,
) -> Result<Tensor<S>> {
    let gm = ConvGeom::new(x.shape(), w.shape(), spec)?;
    let (ip, op, taps) = (gm.in_plane(), gm.out_plane(), gm.taps());
    let mut out = vec![S::zero(); gm.n * gm.cout * op];
    let (xd, wd) = (x.data(), w.data());
    if gm.is_pointwise() {
        // out[co, v] = sum_ci w[co, ci] x[ci, v], one voxel block at a time
        for_each_chunk(&mut out, gm.cout * op, |n, sample| {
            let xs = &xd[n * gm.cin * ip..][..gm.cin * ip];
            for v0 in (0..op).step_by(VBLOCK) {
                let len = VBLOCK.min(op - v0);
                for co in 0..gm.cout {
                    let grp = co / gm.cout_g;
                    let dst = &mut sample[co * op + v0..][..len];
                    for cig in 0..gm.cin_g {
                        let ci = grp * gm.cin_g + cig;
                        axpy(dst, wd[co * gm.cin_g + cig], &xs[ci * ip + v0..][..len]);
                    }
                }
            }
        });
        return Tensor::new(vec![gm.n, gm.cout, gm.out[0], gm.out[1], gm.out[2]], out);
    }
    let (pp, span, offs) = (gm.padded_plane(), gm.span(), gm.tap_offsets());
    let xp = gm.pad_input(xd, gm.n * gm.cin);
    for_each_chunk(&mut out, op, |idx, plane| {
        let (n, co) = (idx / gm.cout, idx % gm.cout);
        let grp = co / gm.cout_g;
        let mut acc = vec![S::zero(); span];
        for j0 in (0..span).step_by(VBLOCK) {
            let len = VBLOCK.min(span - j0);
            for cig in 0..gm.cin_g {
                let ci = grp * gm.cin_g + cig;
                let xin = &xp[(n * gm.cin + ci) * pp + j0..];
                let wk = &wd[(co * gm.cin_g + cig) * taps..][..taps];
                for (&wv, &off) in wk.iter().zip(&offs) {
                    axpy(&mut acc[j0..j0 + len], wv, &xin[off..off + len]);
                }
            }
        }
        gm.restride(&mut acc, plane, true);
    });
    Tensor::new(vec![gm.n, gm.cout, gm.out[0], gm.out[1], gm.out[2]], out)
}

/// Returns `(grad_input, grad_weight)`.
pub fn conv3d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    spec: Conv3dSpec,
    gy: &Tensor<S>,
    need_input: bool,
    need_weight: bool,
) -> Result<(Option<Tensor<S>>, Option<Tensor<S>>)> {
    let gm = ConvGeom::new(x.shape(), w.shape(), spec)?;
    let (ip, op, taps) = (gm.in_plane(), gm.out_plane(), gm.taps());
    let (xd, wd, gd) = (x.data(), w.data(), gy.data());

    if gm.is_pointwise() {
        return Ok(pointwise_backward(&gm, xd, wd, gd, x.shape(), w.shape(), need_input, need_weight));
    }
    let (pp, span, offs) = (gm.padded_plane(), gm.span(), gm.tap_offsets());
    let mut gs = vec![S::zero(); gm.n * gm.cout * span];
    for_each_chunk(&mut gs, span, |idx, dst| {
        let mut src = gd[idx * op..][..op].to_vec();
        gm.restride(dst, &mut src, false);
    });
    let gx = need_input.then(|| {
        let mut gx = vec![S::zero(); gm.n * gm.cin * ip];
        for_each_chunk(&mut gx, ip, |idx, plane| {
            let (n, ci) = (idx / gm.cin, idx % gm.cin);
            let (grp, cig) = (ci / gm.cin_g, ci % gm.cin_g);
            let mut acc = vec![S::zero(); pp];
            for j0 in (0..span).step_by(VBLOCK) {
                let len = VBLOCK.min(span - j0);
                for co in grp * gm.cout_g..(grp + 1) * gm.cout_g {
                    let g_out = &gs[(n * gm.cout + co) * span + j0..][..len];
                    let wk = &wd[(co * gm.cin_g + cig) * taps..][..taps];
                    for (&wv, &off) in wk.iter().zip(&offs) {
                        axpy(&mut acc[off + j0..][..len], wv, g_out);
                    }
                }
            }
            gm.unpad_plane(&acc, plane);
        });
        Tensor::new(x.shape().to_vec(), gx).expect("input-shaped gradient")
    });

    let gw = need_weight.then(|| {
        let xp = gm.pad_input(xd, gm.n * gm.cin);
        let per_co = gm.cin_g * taps;
        let mut gw = vec![S::zero(); gm.cout * per_co];
        for_each_chunk(&mut gw, per_co, |co, wgrad| {
            let grp = co / gm.cout_g;
            for n in 0..gm.n {
                for j0 in (0..span).step_by(VBLOCK) {
                    let len = VBLOCK.min(span - j0);
                    let g_out = &gs[(n * gm.cout + co) * span + j0..][..len];
                    for cig in 0..gm.cin_g {
                        let ci = grp * gm.cin_g + cig;
                        let xin = &xp[(n * gm.cin + ci) * pp + j0..];
                        for (slot, &off) in wgrad[cig * taps..][..taps].iter_mut().zip(&offs) {
                            *slot += dot(g_out, &xin[off..off + len]);
                        }
                    }
                }
            }
        });
        Tensor::new(w.shape().to_vec(), gw).expect("weight-shaped gradient")
    });
    Ok((gx, gw))
}

/// Rows of the weight gradient computed per parallel task.
const GW_ROWS: usize = 8;

#[allow(clippy::too_many_arguments)]
fn pointwise_backward<S: Scalar>(
    gm: &ConvGeom,
    xd: &[S],
    wd: &[S],
    gd: &[S],
    x_shape: &[usize],
    w_shape: &[usize],
    need_input: bool,
    need_weight: bool,
) -> (Option<Tensor<S>>, Option<Tensor<S>>) {
    let v = gm.in_plane();
    let gx = need_input.then(|| {
        let mut gx = vec![S::zero(); gm.n * gm.cin * v];
        for_each_chunk(&mut gx, gm.cin * v, |n, sample| {
            let gs = &gd[n * gm.cout * v..][..gm.cout * v];
            for v0 in (0..v).step_by(VBLOCK) {
                let len = VBLOCK.min(v - v0);
                for ci in 0..gm.cin {
                    let (grp, cig) = (ci / gm.cin_g, ci % gm.cin_g);
                    let dst = &mut sample[ci * v + v0..][..len];
                    for co in grp * gm.cout_g..(grp + 1) * gm.cout_g {
                        axpy(dst, wd[co * gm.cin_g + cig], &gs[co * v + v0..][..len]);
                    }
                }
            }
        });
        Tensor::new(x_shape.to_vec(), gx).expect("input-shaped gradient")
    });
    let gw = need_weight.then(|| {
        let mut gw = vec![S::zero(); gm.cout * gm.cin_g];
        for_each_chunk(&mut gw, GW_ROWS * gm.cin_g, |task, rows| {
            let co0 = task * GW_ROWS;
            for n in 0..gm.n {
                for v0 in (0..v).step_by(VBLOCK) {
                    let len = VBLOCK.min(v - v0);
                    for (r, row) in rows.chunks_mut(gm.cin_g).enumerate() {
                        let co = co0 + r;
                        let grp = co / gm.cout_g;
                        let g_blk = &gd[(n * gm.cout + co) * v + v0..][..len];
                        for (cig, slot) in row.iter_mut().enumerate() {
                            let ci = grp * gm.cin_g + cig;
                            *slot += dot(g_blk, &xd[(n * gm.cin + ci) * v + v0..][..len]);
                        }
                    }
                }
            }
        });
        Tensor::new(w_shape.to_vec(), gw).expect("weight-shaped gradient")
    });
    (gx, gw)
}

// ---------------------------------------------------------------------------
// Spatial average pooling
// ---------------------------------------------------------------------------

fn pool_geom(shape: &[usize], k: usize, stride: usize) -> Result<(usize, usize)> {
    if shape.len() != 5 {
        return Err(Error::config(format!(
            "avg_pool_spatial: input must be [N,C,T,H,W], got {shape:?}"
        )));
    }
    if k == 0 || stride == 0 {
        return Err(Error::config("avg_pool_spatial: zero window or stride"));
    }
    let mut out = [0; 2];
    for (i, name) in [(0usize, "h"), (1, "w")] {
        let d = shape[3 + i];
        if d < k || (d - k) % stride != 0 {
            return Err(Error::config(format!(
                "avg_pool_spatial: axis `{name}` of size {d} not divisible into windows of {k} with stride {stride}"
            )));
        }
        out[i] = (d - k) / stride + 1;
    }
    Ok((out[0], out[1]))
}

pub fn avg_pool_forward<S: Scalar>(x: &Tensor<S>, k: usize, stride: usize) -> Result<Tensor<S>> {
    let s = x.shape();
    let (ho, wo) = pool_geom(s, k, stride)?;
    let (h, w) = (s[3], s[4]);
    let frames = s[0] * s[1] * s[2];
    let scale = S::one() / S::cast((k * k) as f64);
    let xd = x.data();
    let mut out = vec![S::zero(); frames * ho * wo];
    for f in 0..frames {
        let src = &xd[f * h * w..][..h * w];
        let dst = &mut out[f * ho * wo..][..ho * wo];
        for oh in 0..ho {
            for ow in 0..wo {
                let mut acc = S::zero();
                for dh in 0..k {
                    let row = &src[(oh * stride + dh) * w + ow * stride..][..k];
                    for &v in row {
                        acc += v;
                    }
                }
                dst[oh * wo + ow] = acc * scale;
            }
        }
    }
    Tensor::new(vec![s[0], s[1], s[2], ho, wo], out)
}

pub fn avg_pool_backward<S: Scalar>(
    input_shape: &[usize],
    k: usize,
    stride: usize,
    gy: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (ho, wo) = pool_geom(input_shape, k, stride)?;
    let (h, w) = (input_shape[3], input_shape[4]);
    let frames = input_shape[0] * input_shape[1] * input_shape[2];
    let scale = S::one() / S::cast((k * k) as f64);
    let gd = gy.data();
    let mut gx = vec![S::zero(); numel(input_shape)];
    for f in 0..frames {
        let src = &gd[f * ho * wo..][..ho * wo];
        let dst = &mut gx[f * h * w..][..h * w];
        for oh in 0..ho {
            for ow in 0..wo {
                let g = src[oh * wo + ow] * scale;
                for dh in 0..k {
                    for v in &mut dst[(oh * stride + dh) * w + ow * stride..][..k] {
                        *v += g;
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gx)
}

// ---------------------------------------------------------------------------
// Affine map along the last axis
// ---------------------------------------------------------------------------

fn linear_geom(x: &[usize], w: &[usize], b: Option<&[usize]>) -> Result<(usize, usize, usize)> {
    if w.len() != 2 {
        return Err(Error::config(format!("linear: weight must be [O, I], got {w:?}")));
    }
    let i = *x
        .last()
        .ok_or_else(|| Error::config("linear: input has no axes"))?;
    if i != w[1] {
        return Err(Error::axis("linear", "in_features", w[1], i));
    }
    if let Some(b) = b {
        if b != [w[0]] {
            return Err(Error::config(format!(
                "linear: bias must be [{}], got {b:?}",
                w[0]
            )));
        }
    }
    Ok((numel(x) / i.max(1), i, w[0]))
}

pub fn linear_forward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    let (m, i, o) = linear_geom(x.shape(), w.shape(), b.map(|b| b.shape()))?;
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![S::zero(); m * o];
    for_each_chunk(&mut out, o, |r, row| {
        let xr = &xd[r * i..][..i];
        for (k, y) in row.iter_mut().enumerate() {
            *y = dot(xr, &wd[k * i..][..i]) + b.map_or(S::zero(), |b| b.data()[k]);
        }
    });
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("nonempty") = o;
    Tensor::new(shape, out)
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn linear_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    gy: &Tensor<S>,
    with_bias: bool,
) -> Result<(Tensor<S>, Tensor<S>, Option<Tensor<S>>)> {
    let (m, i, o) = linear_geom(x.shape(), w.shape(), None)?;
    let (xd, wd, gd) = (x.data(), w.data(), gy.data());
    let mut gx = vec![S::zero(); m * i];
    for_each_chunk(&mut gx, i, |r, row| {
        for k in 0..o {
            axpy(row, gd[r * o + k], &wd[k * i..][..i]);
        }
    });
    let mut gw = vec![S::zero(); o * i];
    for_each_chunk(&mut gw, i, |k, row| {
        for r in 0..m {
            axpy(row, gd[r * o + k], &xd[r * i..][..i]);
        }
    });
    let gb = with_bias.then(|| {
        let mut gb = vec![S::zero(); o];
        for r in 0..m {
            for k in 0..o {
                gb[k] += gd[r * o + k];
            }
        }
        Tensor::new(vec![o], gb).expect("bias-shaped gradient")
    });
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(w.shape().to_vec(), gw)?,
        gb,
    ))
}

// ---------------------------------------------------------------------------
// Batch normalization over [N, C, ...]
// ---------------------------------------------------------------------------

/// Per-channel statistics of one batch-norm forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    /// Unbiased variance (used for running-stat updates).
    pub var_unbiased: Vec<S>,
}

pub struct BatchNormOut<S> {
    pub y: Tensor<S>,
    pub xhat: Tensor<S>,
    pub inv_std: Vec<S>,
    pub stats: Option<BatchStats<S>>,
}

fn bn_geom(shape: &[usize], c_param: usize) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::config(format!(
            "batch_norm: input must be [N, C, ...], got {shape:?}"
        )));
    }
    if shape[1] != c_param {
        return Err(Error::axis("batch_norm", "channels", c_param, shape[1]));
    }
    let inner: usize = shape[2..].iter().product();
    Ok((shape[0], shape[1], inner))
}

/// Normalizes per channel. With `running = None` the batch statistics are
/// used (training); otherwise the given `(mean, var)` (evaluation).
pub fn batch_norm_forward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    running: Option<(&[S], &[S])>,
    eps: S,
) -> Result<BatchNormOut<S>> {
    let (n, c, inner) = bn_geom(x.shape(), gamma.len())?;
    let count = n * inner;
    let xd = x.data();
    let mut stats = None;
    let (mean, var): (Vec<S>, Vec<S>) = match running {
        Some((m, v)) => (m.to_vec(), v.to_vec()),
        None => {
            if count < 2 {
                return Err(Error::Data(format!(
                    "batch_norm: degenerate variance, only {count} value(s) per channel in train mode"
                )));
            }
            let cnt = S::cast(count as f64);
            let mut mean = vec![S::zero(); c];
            let mut var = vec![S::zero(); c];
            for ch in 0..c {
                let mut s = S::zero();
                for b in 0..n {
                    s += lane_sum(&xd[(b * c + ch) * inner..][..inner]);
                }
                let mu = s / cnt;
                let mut q = S::zero();
                let mut dev = vec![S::zero(); inner];
                for b in 0..n {
                    for (d, &v) in dev.iter_mut().zip(&xd[(b * c + ch) * inner..][..inner]) {
                        *d = v - mu;
                    }
                    q += dot(&dev, &dev);
                }
                mean[ch] = mu;
                var[ch] = q / cnt;
            }
            let unbiased = var
                .iter()
                .map(|&v| v * cnt / S::cast((count - 1) as f64))
                .collect();
            stats = Some(BatchStats {
                mean: mean.clone(),
                var_unbiased: unbiased,
            });
            (mean, var)
        }
    };
    let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
    let (gd, bd) = (gamma.data(), beta.data());
    let mut xhat = vec![S::zero(); xd.len()];
    let mut y = vec![S::zero(); xd.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * inner;
            for k in off..off + inner {
                let h = (xd[k] - mean[ch]) * inv_std[ch];
                xhat[k] = h;
                y[k] = gd[ch] * h + bd[ch];
            }
        }
    }
    Ok(BatchNormOut {
        y: Tensor::new(x.shape().to_vec(), y)?,
        xhat: Tensor::new(x.shape().to_vec(), xhat)?,
        inv_std,
        stats,
    })
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batch_norm_backward<S: Scalar>(
    xhat: &Tensor<S>,
    inv_std: &[S],
    gamma: &Tensor<S>,
    gy: &Tensor<S>,
    train: bool,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (n, c, inner) = bn_geom(xhat.shape(), gamma.len())?;
    let (hd, gd) = (xhat.data(), gy.data());
    let mut dgamma = vec![S::zero(); c];
    let mut dbeta = vec![S::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * inner;
            dbeta[ch] += lane_sum(&gd[off..off + inner]);
            dgamma[ch] += dot(&gd[off..off + inner], &hd[off..off + inner]);
        }
    }
    let cnt = S::cast((n * inner) as f64);
    let mut gx = vec![S::zero(); hd.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * inner;
            let scale = gamma.data()[ch] * inv_std[ch];
            for k in off..off + inner {
                gx[k] = if train {
                    scale / cnt * (cnt * gd[k] - dbeta[ch] - hd[k] * dgamma[ch])
                } else {
                    scale * gd[k]
                };
            }
        }
    }
    Ok((
        Tensor::new(xhat.shape().to_vec(), gx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

// ---------------------------------------------------------------------------
// Layer normalization along one axis (no affine parameters)
// ---------------------------------------------------------------------------

fn ln_geom(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() || shape[axis] == 0 {
        return Err(Error::config(format!(
            "layer_norm: axis {axis} invalid for shape {shape:?}"
        )));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

/// Returns `(normalized, inv_std per position)`.
pub fn layer_norm_forward<S: Scalar>(
    x: &Tensor<S>,
    axis: usize,
    eps: S,
) -> Result<(Tensor<S>, Vec<S>)> {
    let (outer, d, inner) = ln_geom(x.shape(), axis)?;
    let xd = x.data();
    let mut y = vec![S::zero(); xd.len()];
    let mut inv = vec![S::zero(); outer * inner];
    let dn = S::cast(d as f64);
    for o in 0..outer {
        let base = o * d * inner;
        for i in 0..inner {
            let at = |k: usize| base + k * inner + i;
            let mean = (0..d).map(|k| xd[at(k)]).sum::<S>() / dn;
            let var = (0..d)
                .map(|k| (xd[at(k)] - mean) * (xd[at(k)] - mean))
                .sum::<S>()
                / dn;
            let r = S::one() / (var + eps).sqrt();
            for k in 0..d {
                y[at(k)] = (xd[at(k)] - mean) * r;
            }
            inv[o * inner + i] = r;
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), y)?, inv))
}

pub fn layer_norm_backward<S: Scalar>(
    xhat: &Tensor<S>,
    inv_std: &[S],
    axis: usize,
    gy: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (outer, d, inner) = ln_geom(xhat.shape(), axis)?;
    let (hd, gd) = (xhat.data(), gy.data());
    let mut gx = vec![S::zero(); hd.len()];
    let dn = S::cast(d as f64);
    for o in 0..outer {
        let base = o * d * inner;
        for i in 0..inner {
            let at = |k: usize| base + k * inner + i;
            let sg = (0..d).map(|k| gd[at(k)]).sum::<S>();
            let sgh = (0..d).map(|k| gd[at(k)] * hd[at(k)]).sum::<S>();
            let r = inv_std[o * inner + i];
            for k in 0..d {
                gx[at(k)] = r / dn * (dn * gd[at(k)] - sg - hd[at(k)] * sgh);
            }
        }
    }
    Tensor::new(xhat.shape().to_vec(), gx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    /// Direct six-nested-loop cross-correlation with explicit bounds checks.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, spec: Conv3dSpec) -> Tensor<f64> {
        let (xs, ws) = (x.shape(), w.shape());
        let g = spec.groups;
        let (cin_g, cout_g) = (xs[1] / g, ws[0] / g);
        let out_dim = |a: usize| {
            xs[2 + a] + spec.pad[a].0 + spec.pad[a].1 - spec.dilation[a] * (ws[2 + a] - 1)
        };
        let os = [xs[0], ws[0], out_dim(0), out_dim(1), out_dim(2)];
        let mut out = Tensor::zeros(os.to_vec());
        for n in 0..os[0] {
            for co in 0..os[1] {
                for t in 0..os[2] {
                    for h in 0..os[3] {
                        for ww in 0..os[4] {
                            let mut acc = 0.0;
                            for cig in 0..cin_g {
                                let ci = (co / cout_g) * cin_g + cig;
                                for a in 0..ws[2] {
                                    for b in 0..ws[3] {
                                        for c in 0..ws[4] {
                                            let it = t as isize + (a * spec.dilation[0]) as isize
                                                - spec.pad[0].0 as isize;
                                            let ih = h as isize + (b * spec.dilation[1]) as isize
                                                - spec.pad[1].0 as isize;
                                            let iw = ww as isize + (c * spec.dilation[2]) as isize
                                                - spec.pad[2].0 as isize;
                                            if it < 0
                                                || ih < 0
                                                || iw < 0
                                                || it >= xs[2] as isize
                                                || ih >= xs[3] as isize
                                                || iw >= xs[4] as isize
                                            {
                                                continue;
                                            }
                                            acc += w.at(&[co, cig, a, b, c])
                                                * x.at(&[
                                                    n,
                                                    ci,
                                                    it as usize,
                                                    ih as usize,
                                                    iw as usize,
                                                ]);
                                        }
                                    }
                                }
                            }
                            out.set(&[n, co, t, h, ww], acc);
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_scalar_product() {
        let x = Tensor::<f32>::full([1, 1, 1, 1, 1], 2.0);
        let w = Tensor::<f32>::full([1, 1, 1, 1, 1], 3.0);
        let y = conv3d_forward(&x, &w, Conv3dSpec::default()).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn conv_identity_depthwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 3, 4, 5, 6], &mut rng);
        let w = Tensor::ones([3, 1, 1, 1, 1]);
        let y = conv3d_forward(&x, &w, Conv3dSpec::default().groups(3)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_matches_naive_loops_with_causal_dilation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[1, 2, 5, 4, 4], &mut rng);
        let w = random(&[3, 2, 3, 3, 3], &mut rng);
        let spec = Conv3dSpec::default().causal_t(4).dilation_t(2).same_hw(1);
        let fast = conv3d_forward(&x, &w, spec).unwrap();
        let slow = naive_conv(&x, &w, spec);
        assert_eq!(fast.shape(), &[1, 3, 5, 4, 4]);
        assert!(fast.max_abs_diff(&slow) < 1e-6);
    }

    #[test]
    fn conv_grouped_asymmetric_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[2, 4, 6, 5, 3], &mut rng);
        let w = random(&[6, 2, 2, 3, 1], &mut rng);
        let mut spec = Conv3dSpec::default().groups(2);
        spec.pad = [(1, 2), (0, 1), (2, 0)];
        spec.dilation = [3, 1, 1];
        let fast = conv3d_forward(&x, &w, spec).unwrap();
        assert!(fast.max_abs_diff(&naive_conv(&x, &w, spec)) < 1e-12);
    }

    #[test]
    fn conv_rejects_bad_channel_axis() {
        let x = Tensor::<f32>::zeros([1, 4, 3, 3, 3]);
        let w = Tensor::<f32>::zeros([2, 3, 1, 1, 1]);
        let err = conv3d_forward(&x, &w, Conv3dSpec::default()).unwrap_err();
        assert!(err.to_string().contains("in_channels"), "{err}");
    }

    #[test]
    fn pointwise_conv_is_channel_mixing_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 3, 4, 2, 2], &mut rng);
        let w = random(&[5, 3, 1, 1, 1], &mut rng);
        let y = conv3d_forward(&x, &w, Conv3dSpec::default()).unwrap();
        // channels-last, then an affine map with no bias
        let xl = x.permute(&[0, 2, 3, 4, 1]).unwrap();
        let wl = w.reshape([5, 3]).unwrap();
        let yl = linear_forward(&xl, &wl, None)
            .unwrap()
            .permute(&[0, 4, 1, 2, 3])
            .unwrap();
        assert!(y.max_abs_diff(&yl) < 1e-12);
    }

    #[test]
    fn pool_hand_values() {
        let x = Tensor::<f64>::new([1, 1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avg_pool_forward(&x, 2, 2).unwrap().data(), &[2.5]);
        let c = Tensor::<f64>::full([1, 2, 3, 4, 4], 1.75);
        let p = avg_pool_forward(&c, 2, 2).unwrap();
        assert!(p.data().iter().all(|&v| v == 1.75));
        assert!(avg_pool_forward(&Tensor::<f64>::zeros([1, 1, 1, 3, 4]), 2, 2).is_err());
    }

    #[test]
    fn pool_matches_block_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[2, 3, 2, 6, 4], &mut rng);
        let p = avg_pool_forward(&x, 2, 2).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                for t in 0..2 {
                    for h in 0..3 {
                        for w in 0..2 {
                            let mut s = 0.0;
                            for dh in 0..2 {
                                for dw in 0..2 {
                                    s += x.at(&[n, c, t, 2 * h + dh, 2 * w + dw]);
                                }
                            }
                            assert_eq!(p.at(&[n, c, t, h, w]), s * 0.25);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn linear_hand_values() {
        let x = Tensor::<f64>::new([2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::<f64>::new([2, 2], vec![1.0, 1.0, 0.0, 1.0]).unwrap();
        let b = Tensor::<f64>::zeros([2]);
        assert_eq!(linear_forward(&x, &w, Some(&b)).unwrap().data(), &[3.0, 2.0]);
        let bad = Tensor::<f64>::zeros([2, 3]);
        assert!(linear_forward(&x, &bad, None).is_err());
    }

    #[test]
    fn batch_norm_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[4, 3, 5, 2, 2], &mut rng).map(|v| 3.0 * v + 1.5);
        let g = Tensor::ones([3]);
        let b = Tensor::zeros([3]);
        let out = batch_norm_forward(&x, &g, &b, None, 1e-12).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| out.y.narrow(0, n, 1).unwrap().narrow(1, c, 1).unwrap().into_data())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-5 && (v - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn batch_norm_constant_and_eval_identity() {
        let x = Tensor::<f64>::full([2, 2, 3], 4.0);
        let g = Tensor::ones([2]);
        let b = Tensor::zeros([2]);
        let out = batch_norm_forward(&x, &g, &b, None, 1e-5).unwrap();
        assert!(out.y.data().iter().all(|v| v.abs() < 1e-12));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = random(&[2, 2, 3], &mut rng);
        let (m, v) = (vec![0.0; 2], vec![1.0; 2]);
        let ev = batch_norm_forward(&y, &g, &b, Some((&m, &v)), 0.0).unwrap();
        assert_eq!(ev.y, y);
    }

    #[test]
    fn batch_norm_degenerate_variance() {
        let x = Tensor::<f64>::zeros([1, 2, 1]);
        let g = Tensor::ones([2]);
        let b = Tensor::zeros([2]);
        assert!(matches!(
            batch_norm_forward(&x, &g, &b, None, 1e-5),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn layer_norm_hand_values() {
        let x = Tensor::<f64>::new([1, 2], vec![2.0, 4.0]).unwrap();
        let (y, _) = layer_norm_forward(&x, 1, 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);
        let c = Tensor::<f64>::full([3, 4], 2.5);
        let (z, _) = layer_norm_forward(&c, 1, 1e-6).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }
}
