//! Receptive-field estimation from white-noise responses: spike-triggered
//! average, rank-1 space/time separation, elliptical Gaussian fit, and
//! resampling onto the feature grid.

use crate::error::{Error, Result};
use crate::tensor::{io, Tensor};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub const DEFAULT_TAU: usize = 15;

fn frame_dims(stimulus: &Tensor<f64>) -> Result<(usize, usize, usize)> {
    match *stimulus.shape() {
        [t, h, w] => Ok((t, h, w)),
        ref s => Err(Error::config(format!("stimulus must be [T, H, W], got {s:?}"))),
    }
}

/// Subtracts each pixel's temporal mean.
pub fn center_stimulus(stimulus: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (t, h, w) = frame_dims(stimulus)?;
    let p = h * w;
    let mut mean = vec![0.0; p];
    for f in 0..t {
        for (m, &v) in mean.iter_mut().zip(&stimulus.data()[f * p..(f + 1) * p]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= t.max(1) as f64);
    let mut out = stimulus.clone();
    for f in 0..t {
        for (o, &m) in out.data_mut()[f * p..(f + 1) * p].iter_mut().zip(&mean) {
            *o -= m;
        }
    }
    Ok(out)
}

/// Spike-weighted mean of the `tau` frames ending at each spike bin.
///
/// Row `k` of the result holds lag `tau - 1 - k`, so the last row is the
/// frame of the spike bin itself. Each lag is normalized by the spikes
/// that contributed to it; lags reaching before frame 0 are skipped.
pub fn spike_triggered_average(stimulus: &Tensor<f64>, spikes: &[f64], tau: usize) -> Result<Tensor<f64>> {
    let (t, h, w) = frame_dims(stimulus)?;
    if spikes.len() != t {
        return Err(Error::data(format!(
            "{} spike bins for {t} stimulus frames",
            spikes.len()
        )));
    }
    if tau == 0 {
        return Err(Error::config("STA lag window must be >= 1"));
    }
    if spikes.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Estimation("no spikes: STA undefined".into()));
    }
    let p = h * w;
    let sd = stimulus.data();
    let mut sta = vec![0.0; tau * p];
    for lag in 0..tau {
        let row = &mut sta[(tau - 1 - lag) * p..(tau - lag) * p];
        let mut weight = 0.0;
        for (tt, &s) in spikes.iter().enumerate().skip(lag) {
            if s == 0.0 {
                continue;
            }
            weight += s;
            for (r, &v) in row.iter_mut().zip(&sd[(tt - lag) * p..(tt - lag + 1) * p]) {
                *r += s * v;
            }
        }
        if weight > 0.0 {
            row.iter_mut().for_each(|r| *r /= weight);
        }
    }
    Tensor::new([tau, h, w], sta)
}

/// Eigen-decomposition of a symmetric `n x n` matrix by cyclic Jacobi
/// rotations. Returns eigenvalues in descending order and the matching
/// eigenvectors as rows.
pub fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut a = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        let scale: f64 = a.iter().map(|x| x * x).sum::<f64>();
        if off <= 1e-30 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let vals = order.iter().map(|&i| a[i * n + i]).collect();
    let vecs = order
        .iter()
        .map(|&i| (0..n).map(|k| v[k * n + i]).collect())
        .collect();
    (vals, vecs)
}

/// Leading singular triplet of an STA viewed as a `tau x (H*W)` matrix.
#[derive(Clone, Debug)]
pub struct Separation {
    /// Unit-norm spatial component, `[H, W]`.
    pub spatial: Tensor<f64>,
    /// Temporal component scaled by the leading singular value.
    pub temporal: Vec<f64>,
    /// All singular values, descending.
    pub singular_values: Vec<f64>,
}

impl Separation {
    /// `outer(temporal, spatial)` as `[tau, H, W]`.
    pub fn reconstruct(&self) -> Tensor<f64> {
        let (h, w) = (self.spatial.shape()[0], self.spatial.shape()[1]);
        let tau = self.temporal.len();
        let s = self.spatial.data();
        Tensor::from_fn([tau, h, w], |i| self.temporal[i / (h * w)] * s[i % (h * w)])
    }
}

/// Rank-1 space/time factorization. The sign is fixed so that the spatial
/// pixel of largest magnitude is positive.
pub fn svd_separate(sta: &Tensor<f64>) -> Result<Separation> {
    let (tau, h, w) = frame_dims(sta)?;
    let p = h * w;
    let m = sta.data();
    if m.iter().all(|&v| v == 0.0) {
        return Err(Error::Estimation("all-zero STA cannot be separated".into()));
    }
    let mut gram = vec![0.0; tau * tau];
    for i in 0..tau {
        for j in i..tau {
            let d: f64 = m[i * p..(i + 1) * p]
                .iter()
                .zip(&m[j * p..(j + 1) * p])
                .map(|(a, b)| a * b)
                .sum();
            gram[i * tau + j] = d;
            gram[j * tau + i] = d;
        }
    }
    let (vals, vecs) = symmetric_eigen(&gram, tau);
    let singular_values: Vec<f64> = vals.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let sigma = singular_values[0];
    let u = &vecs[0];
    let mut v = vec![0.0; p];
    for (i, &ui) in u.iter().enumerate() {
        for (vk, &mk) in v.iter_mut().zip(&m[i * p..(i + 1) * p]) {
            *vk += ui * mk;
        }
    }
    let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= vn);
    let mut temporal: Vec<f64> = u.iter().map(|&x| x * sigma).collect();
    let peak = v
        .iter()
        .copied()
        .max_by(|a, b| a.abs().total_cmp(&b.abs()))
        .unwrap_or(0.0);
    if peak < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
        temporal.iter_mut().for_each(|x| *x = -*x);
    }
    Ok(Separation {
        spatial: Tensor::new([h, w], v)?,
        temporal,
        singular_values,
    })
}

/// Elliptical Gaussian `amplitude * exp(-u^2/(2 sx^2) - v^2/(2 sy^2))` where
/// `(u, v)` are pixel offsets from `(cx, cy)` rotated by `angle`. `x` runs
/// along columns and `y` along rows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian2d {
    pub cx: f64,
    pub cy: f64,
    pub sx: f64,
    pub sy: f64,
    pub angle: f64,
    pub amplitude: f64,
}

impl Gaussian2d {
    fn to_vec(self) -> [f64; 6] {
        [self.cx, self.cy, self.sx, self.sy, self.angle, self.amplitude]
    }

    fn from_vec(p: [f64; 6]) -> Self {
        Gaussian2d {
            cx: p[0],
            cy: p[1],
            sx: p[2],
            sy: p[3],
            angle: p[4],
            amplitude: p[5],
        }
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        self.amplitude * (-(u * u) / (2.0 * self.sx * self.sx) - (v * v) / (2.0 * self.sy * self.sy)).exp()
    }

    pub fn render(&self, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn([h, w], |i| self.eval((i % w) as f64, (i / w) as f64))
    }

    /// Positive sigmas and an angle in `[-pi/4, pi/4)`, swapping the axes
    /// when a quarter turn is folded out.
    pub fn canonical(mut self) -> Self {
        use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};
        self.sx = self.sx.abs();
        self.sy = self.sy.abs();
        let mut a = self.angle.rem_euclid(std::f64::consts::PI);
        if a >= FRAC_PI_2 {
            a -= std::f64::consts::PI;
        }
        if a >= FRAC_PI_4 {
            a -= FRAC_PI_2;
            std::mem::swap(&mut self.sx, &mut self.sy);
        } else if a < -FRAC_PI_4 {
            a += FRAC_PI_2;
            std::mem::swap(&mut self.sx, &mut self.sy);
        }
        self.angle = a;
        self
    }
}

#[derive(Clone, Debug)]
pub struct GaussianFit {
    pub params: Gaussian2d,
    /// Sum of squared residuals of `params`.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Residual after initialization and after each accepted step.
    pub history: Vec<f64>,
}

pub const MAX_FIT_ITERATIONS: usize = 100;

/// Moment-based starting point computed from the positive part of the map.
pub fn moment_init(map: &Tensor<f64>) -> Result<Gaussian2d> {
    let &[_, w] = map.shape() else {
        return Err(Error::config(format!("spatial map must be [H, W], got {:?}", map.shape())));
    };
    let d = map.data();
    let peak = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(peak > 0.0) {
        return Err(Error::Estimation("spatial map has no positive peak".into()));
    }
    let (mut m0, mut mx, mut my) = (0.0, 0.0, 0.0);
    for (i, &v) in d.iter().enumerate() {
        let wgt = v.max(0.0);
        m0 += wgt;
        mx += wgt * (i % w) as f64;
        my += wgt * (i / w) as f64;
    }
    let (cx, cy) = (mx / m0, my / m0);
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (i, &v) in d.iter().enumerate() {
        let wgt = v.max(0.0);
        let (dx, dy) = ((i % w) as f64 - cx, (i / w) as f64 - cy);
        sxx += wgt * dx * dx;
        syy += wgt * dy * dy;
        sxy += wgt * dx * dy;
    }
    let (sxx, syy, sxy) = (sxx / m0, syy / m0, sxy / m0);
    let angle = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let (s, c) = angle.sin_cos();
    let vu = c * c * sxx + 2.0 * s * c * sxy + s * s * syy;
    let vv = s * s * sxx - 2.0 * s * c * sxy + c * c * syy;
    Ok(Gaussian2d {
        cx,
        cy,
        sx: vu.max(0.25).sqrt(),
        sy: vv.max(0.25).sqrt(),
        angle,
        amplitude: peak,
    }
    .canonical())
}

fn residual_and_jacobian(map: &Tensor<f64>, p: &Gaussian2d, jac: Option<&mut Vec<[f64; 6]>>) -> (f64, Vec<f64>) {
    let w = map.shape()[1];
    let d = map.data();
    let (s, c) = p.angle.sin_cos();
    let (isx2, isy2) = (1.0 / (p.sx * p.sx), 1.0 / (p.sy * p.sy));
    let mut res = Vec::with_capacity(d.len());
    let mut ss = 0.0;
    let mut jrows = jac;
    if let Some(j) = jrows.as_deref_mut() {
        j.clear();
    }
    for (i, &target) in d.iter().enumerate() {
        let (dx, dy) = ((i % w) as f64 - p.cx, (i / w) as f64 - p.cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let e = (-0.5 * (u * u * isx2 + v * v * isy2)).exp();
        let f = p.amplitude * e;
        let r = f - target;
        ss += r * r;
        res.push(r);
        if let Some(j) = jrows.as_deref_mut() {
            let (fu, fv) = (-f * u * isx2, -f * v * isy2);
            j.push([
                fu * -c + fv * s,
                fu * -s + fv * -c,
                f * u * u * isx2 / p.sx,
                f * v * v * isy2 / p.sy,
                fu * v + fv * -u,
                e,
            ]);
        }
    }
    (ss, res)
}

fn solve6(a: &mut [[f64; 6]; 6], b: &mut [f64; 6]) -> Option<[f64; 6]> {
    for col in 0..6 {
        let piv = (col..6).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..6 {
            let f = a[r][col] / a[col][col];
            for k in col..6 {
                a[r][k] -= f * a[col][k];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0; 6];
    for r in (0..6).rev() {
        let s: f64 = (r + 1..6).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Least-squares elliptical Gaussian fit: moment initialization, then
/// Gauss-Newton with step halving whenever a full step would increase the
/// residual. If no stationary point is reached within
/// [`MAX_FIT_ITERATIONS`], the moment estimate is returned unconverged.
pub fn fit_gaussian2d(map: &Tensor<f64>) -> Result<GaussianFit> {
    let init = moment_init(map)?;
    let mut p = init;
    let mut jac = Vec::with_capacity(map.len());
    let (mut ss, mut res) = residual_and_jacobian(map, &p, Some(&mut jac));
    let mut history = vec![ss];
    let scale = map.data().iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
    for it in 1..=MAX_FIT_ITERATIONS {
        let mut jtj = [[0.0; 6]; 6];
        let mut jtr = [0.0; 6];
        for (row, &r) in jac.iter().zip(&res) {
            for a in 0..6 {
                jtr[a] -= row[a] * r;
                for b in a..6 {
                    jtj[a][b] += row[a] * row[b];
                }
            }
        }
        for a in 0..6 {
            for b in 0..a {
                jtj[a][b] = jtj[b][a];
            }
        }
        let Some(step) = solve6(&mut jtj.clone(), &mut jtr.clone()).or_else(|| {
            let mut damped = jtj;
            let tr: f64 = (0..6).map(|k| jtj[k][k]).sum();
            (0..6).for_each(|k| damped[k][k] += 1e-9 * tr.max(1e-300));
            solve6(&mut damped, &mut jtr.clone())
        }) else {
            break;
        };
        let base = p.to_vec();
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut cand = base;
            for k in 0..6 {
                cand[k] += t * step[k];
            }
            let cp = Gaussian2d::from_vec(cand);
            if cp.sx.abs() > 1e-6 && cp.sy.abs() > 1e-6 {
                let (css, _) = residual_and_jacobian(map, &cp, None);
                if css.is_finite() && css <= ss {
                    accepted = Some((cp, css));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((cp, css)) = accepted else {
            // no descent direction left: stationary
            return Ok(finish(p, ss, it, true, history));
        };
        let rel = (ss - css) / scale;
        let step_norm: f64 = step.iter().map(|s| (s * t).powi(2)).sum::<f64>().sqrt();
        p = cp;
        let (nss, nres) = residual_and_jacobian(map, &p, Some(&mut jac));
        ss = nss;
        res = nres;
        history.push(ss);
        if rel < 1e-15 || step_norm < 1e-12 || ss <= 1e-28 * scale {
            return Ok(finish(p, ss, it, true, history));
        }
    }
    let (init_ss, _) = residual_and_jacobian(map, &init, None);
    Ok(finish(init, init_ss, MAX_FIT_ITERATIONS, false, history))
}

fn finish(p: Gaussian2d, residual: f64, iterations: usize, converged: bool, history: Vec<f64>) -> GaussianFit {
    GaussianFit {
        params: p.canonical(),
        residual,
        iterations,
        converged,
        history,
    }
}

/// Scales a map to unit Euclidean norm. Maps already within 1e-12 of unit
/// norm are returned unchanged, which makes the operation idempotent.
pub fn normalize_rf(map: &Tensor<f64>) -> Result<Tensor<f64>> {
    let n = map.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Estimation(format!("cannot normalize map with norm {n}")));
    }
    if (n - 1.0).abs() <= 1e-12 {
        return Ok(map.clone());
    }
    Ok(map.map(|v| v / n))
}

/// Mean over the area each `g x g` output cell covers. Exact block means
/// when `g` divides both sides; otherwise fractional pixel overlaps are
/// weighted by area.
pub fn area_mean(map: &Tensor<f64>, g: usize) -> Result<Tensor<f64>> {
    let &[h, w] = map.shape() else {
        return Err(Error::config(format!("spatial map must be [H, W], got {:?}", map.shape())));
    };
    if g == 0 || g > h || g > w {
        return Err(Error::config(format!("cannot resample {h}x{w} onto a {g}x{g} grid")));
    }
    let d = map.data();
    let mut out = vec![0.0; g * g];
    if h % g == 0 && w % g == 0 {
        let (bh, bw) = (h / g, w / g);
        let area = (bh * bw) as f64;
        for i in 0..g {
            for j in 0..g {
                let mut s = 0.0;
                for y in i * bh..(i + 1) * bh {
                    for x in j * bw..(j + 1) * bw {
                        s += d[y * w + x];
                    }
                }
                out[i * g + j] = s / area;
            }
        }
    } else {
        let overlaps = |n: usize, cell: usize| -> Vec<(usize, f64)> {
            let (lo, hi) = (cell as f64 * n as f64 / g as f64, (cell + 1) as f64 * n as f64 / g as f64);
            (lo.floor() as usize..(hi.ceil() as usize).min(n))
                .map(|p| (p, (hi.min(p as f64 + 1.0) - lo.max(p as f64)).max(0.0)))
                .filter(|&(_, a)| a > 0.0)
                .collect()
        };
        let area = (h as f64 / g as f64) * (w as f64 / g as f64);
        for i in 0..g {
            let rows = overlaps(h, i);
            for j in 0..g {
                let cols = overlaps(w, j);
                let mut s = 0.0;
                for &(y, ay) in &rows {
                    for &(x, ax) in &cols {
                        s += ay * ax * d[y * w + x];
                    }
                }
                out[i * g + j] = s / area;
            }
        }
    }
    Tensor::new([g, g], out)
}

/// Resamples to `g x g` by area mean, then renormalizes to unit norm.
pub fn downsample_rf(map: &Tensor<f64>, g: usize) -> Result<Tensor<f64>> {
    normalize_rf(&area_mean(map, g)?)
}

/// A neuron's estimated receptive field.
#[derive(Clone, Debug)]
pub struct ReceptiveField {
    /// Unit-norm spatial map `[H, W]`.
    pub spatial: Tensor<f64>,
    pub temporal: Vec<f64>,
    pub gaussian: Gaussian2d,
    pub residual: f64,
    pub converged: bool,
}

impl ReceptiveField {
    pub fn norm(&self) -> f64 {
        self.spatial.norm()
    }
}

/// STA on the mean-centred stimulus, separation, normalization and fit.
pub fn estimate_rf(stimulus: &Tensor<f64>, spikes: &[f64], tau: usize) -> Result<ReceptiveField> {
    let centred = center_stimulus(stimulus)?;
    let sta = spike_triggered_average(&centred, spikes, tau)?;
    let sep = svd_separate(&sta)?;
    let spatial = normalize_rf(&sep.spatial)?;
    let fit = fit_gaussian2d(&spatial)?;
    Ok(ReceptiveField {
        spatial,
        temporal: sep.temporal,
        gaussian: fit.params,
        residual: fit.residual,
        converged: fit.converged,
    })
}

/// `<file>.gauss.csv`, the Gaussian-parameter sidecar of an RF stack.
pub fn gaussian_csv_path(path: impl AsRef<Path>) -> PathBuf {
    let mut s = path.as_ref().as_os_str().to_owned();
    s.push(".gauss.csv");
    PathBuf::from(s)
}

/// Writes the `[neurons, H, W]` spatial stack and its Gaussian sidecar.
pub fn save_rfs(rfs: &[ReceptiveField], path: impl AsRef<Path>) -> Result<()> {
    let maps: Vec<&Tensor<f64>> = rfs.iter().map(|r| &r.spatial).collect();
    let first = maps.first().ok_or_else(|| Error::config("no receptive fields to save"))?;
    let (h, w) = (first.shape()[0], first.shape()[1]);
    let flat: Vec<Tensor<f64>> = maps
        .iter()
        .map(|m| m.reshape([1, h, w]))
        .collect::<Result<_>>()?;
    let stack = Tensor::concat(&flat.iter().collect::<Vec<_>>(), 0)?;
    io::save(&stack, &path)?;
    let mut csv = String::from("neuron_id,cx,cy,sx,sy,angle,amplitude,residual\n");
    for (i, r) in rfs.iter().enumerate() {
        let g = r.gaussian;
        writeln!(
            csv,
            "{i},{},{},{},{},{},{},{}",
            g.cx, g.cy, g.sx, g.sy, g.angle, g.amplitude, r.residual
        )
        .expect("write to string");
    }
    fs::write(gaussian_csv_path(path), csv)?;
    Ok(())
}

/// Reads an RF stack `[neurons, H, W]`.
pub fn load_rf_stack(path: impl AsRef<Path>) -> Result<Tensor<f64>> {
    let t = io::load::<f64>(path)?;
    if t.ndim() != 3 {
        return Err(Error::format("ndim", format!("RF stack must be 3-D, got {:?}", t.shape())));
    }
    Ok(t)
}

/// Downsamples every map of an `[neurons, H, W]` stack to `[neurons, g, g]`.
pub fn downsample_stack(stack: &Tensor<f64>, g: usize) -> Result<Tensor<f64>> {
    let &[n, h, w] = stack.shape() else {
        return Err(Error::config(format!("RF stack must be [N, H, W], got {:?}", stack.shape())));
    };
    let mut out = Vec::with_capacity(n * g * g);
    for i in 0..n {
        let m = stack.narrow(0, i, 1)?.into_shape([h, w])?;
        out.extend(downsample_rf(&m, g)?.into_data());
    }
    Tensor::new([n, g, g], out)
}
