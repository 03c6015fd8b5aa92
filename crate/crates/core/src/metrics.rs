//! Differentiable symmetry and overlap measures.
//!
//! Each measure has a public value-only entry point and a crate-internal
//! `*_with_grad` companion returning the analytic gradient with respect to
//! its inputs; the alignment and synthesis stages chain these together.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{flip_x, split_channel, Dims, SagittalFlip, ScalarVolume};

/// Per-bin additive smoothing applied before normalization.
pub const HISTOGRAM_EPS: f64 = 1e-8;
/// Denominator guard of the soft Dice coefficient.
pub const DICE_EPS: f64 = 1e-8;

/// Hyperparameters of the symmetry measures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub n_bins: usize,
    /// Histogram intensity range `[lo, hi]`; `hi - lo` is also the SSIM dynamic range.
    pub range: [f64; 2],
    /// Soft binarizer threshold for the foreground-volume balance.
    pub binarize_threshold: f64,
    /// Soft binarizer sharpness (sigmoid temperature).
    pub binarize_sharpness: f64,
    /// Edge length of the cubic SSIM window.
    pub ssim_window: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            n_bins: 64,
            range: [-100.0, 200.0],
            binarize_threshold: -200.0,
            binarize_sharpness: 10.0,
            ssim_window: 7,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_bins < 2 {
            return Err(Error::Config(format!("metrics.n_bins must be >= 2, got {}", self.n_bins)));
        }
        let [lo, hi] = self.range;
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(Error::Config(format!("metrics.range must satisfy lo < hi, got {:?}", self.range)));
        }
        if !(self.binarize_sharpness.is_finite() && self.binarize_sharpness > 0.0) {
            return Err(Error::Config("metrics.binarize_sharpness must be > 0".into()));
        }
        if !self.binarize_threshold.is_finite() {
            return Err(Error::Config("metrics.binarize_threshold must be finite".into()));
        }
        if self.ssim_window == 0 {
            return Err(Error::Config("metrics.ssim_window must be >= 1".into()));
        }
        Ok(())
    }

    pub fn histogram(&self) -> HistogramSpec {
        HistogramSpec { n_bins: self.n_bins, lo: self.range[0], hi: self.range[1] }
    }

    pub fn ssim(&self) -> SsimParams {
        SsimParams::new(self.ssim_window, self.range[1] - self.range[0])
    }
}

/// A value produced by one of the losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// Whether the crate can back-propagate through this loss.
    pub differentiable: bool,
}

impl LossValue {
    fn differentiable(value: f64) -> Self {
        LossValue { value, differentiable: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistogramSpec {
    pub n_bins: usize,
    pub lo: f64,
    pub hi: f64,
}

impl HistogramSpec {
    pub fn new(n_bins: usize, range: (f64, f64)) -> Result<Self> {
        if n_bins < 2 || !(range.1 > range.0) || !range.0.is_finite() || !range.1.is_finite() {
            return Err(Error::InvalidParameter(format!("histogram needs n_bins >= 2 and lo < hi, got {n_bins} bins on {range:?}")));
        }
        Ok(HistogramSpec { n_bins, lo: range.0, hi: range.1 })
    }

    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.n_bins as f64
    }

    pub fn center(&self, k: usize) -> f64 {
        self.lo + (k as f64 + 0.5) * self.bin_width()
    }

    /// Lower bin, weight on the upper bin, and d(weight)/d(value).
    /// Values beyond the outer bin centers are clamped into the edge bins.
    #[inline]
    fn locate(&self, x: f64) -> (usize, f64, f64) {
        let w = self.bin_width();
        let t = (x - self.lo) / w - 0.5;
        let last = (self.n_bins - 1) as f64;
        if t <= 0.0 {
            (0, 0.0, 0.0)
        } else if t >= last {
            (self.n_bins - 2, 1.0, 0.0)
        } else {
            let k = (t as usize).min(self.n_bins - 2);
            (k, t - k as f64, 1.0 / w)
        }
    }
}

/// Normalized soft histogram with a piecewise-linear (triangular) kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftHistogram {
    pub spec: HistogramSpec,
    pub counts: Vec<f64>,
}

/// Raw (pre-normalization) kernel accumulation; returns normalized counts and the normalizer.
fn accumulate(values: &[f64], weights: Option<&[f64]>, spec: &HistogramSpec) -> Result<(Vec<f64>, f64)> {
    let mut raw = vec![0.0; spec.n_bins];
    let mut mass = 0.0;
    for (n, &x) in values.iter().enumerate() {
        let m = weights.map_or(1.0, |w| w[n]);
        if m == 0.0 {
            continue;
        }
        let (k, f, _) = spec.locate(x);
        raw[k] += m * (1.0 - f);
        raw[k + 1] += m * f;
        mass += m;
    }
    if !(mass > 0.0) {
        return Err(Error::EmptySupport("histogram has no voxels with positive weight".into()));
    }
    let z: f64 = raw.iter().map(|r| r + HISTOGRAM_EPS).sum();
    Ok((raw.into_iter().map(|r| (r + HISTOGRAM_EPS) / z).collect(), z))
}

/// Back-propagate `d_hist` (gradient w.r.t. normalized counts) to values and weights.
fn accumulate_adjoint(
    values: &[f64],
    weights: Option<&[f64]>,
    spec: &HistogramSpec,
    hist: &[f64],
    z: f64,
    d_hist: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let dot: f64 = d_hist.iter().zip(hist).map(|(g, h)| g * h).sum();
    let d_raw: Vec<f64> = d_hist.iter().map(|g| (g - dot) / z).collect();
    let mut d_values = vec![0.0; values.len()];
    let mut d_weights = vec![0.0; values.len()];
    for (n, &x) in values.iter().enumerate() {
        let m = weights.map_or(1.0, |w| w[n]);
        let (k, f, df) = spec.locate(x);
        let (g0, g1) = (d_raw[k], d_raw[k + 1]);
        d_values[n] = m * df * (g1 - g0);
        d_weights[n] = (1.0 - f) * g0 + f * g1;
    }
    (d_values, d_weights)
}

/// Soft histogram of `vol`, optionally weighted by a mask channel on the same grid.
pub fn soft_histogram(
    vol: &ScalarVolume,
    mask: Option<&[f64]>,
    n_bins: usize,
    range: (f64, f64),
) -> Result<SoftHistogram> {
    let spec = HistogramSpec::new(n_bins, range)?;
    if let Some(m) = mask {
        if m.len() != vol.data().len() {
            return Err(Error::InvalidParameter("mask does not match volume grid".into()));
        }
    }
    let (counts, _) = accumulate(vol.data(), mask, &spec)?;
    Ok(SoftHistogram { spec, counts })
}

/// Symmetric KL divergence `sum p ln(p/q) + q ln(q/p)` of two distributions.
pub fn jeffreys_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(&a, &b)| (a - b) * (a.ln() - b.ln())).sum()
}

fn jeffreys_divergence_grad(p: &[f64], q: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let dp = p.iter().zip(q).map(|(&a, &b)| (a / b).ln() + 1.0 - b / a).collect();
    let dq = p.iter().zip(q).map(|(&a, &b)| (b / a).ln() + 1.0 - a / b).collect();
    (dp, dq)
}

/// Gradients of the Jeffreys loss with respect to both halves' values and weights.
pub(crate) struct JeffreysGrad {
    pub left_values: Vec<f64>,
    pub left_weights: Vec<f64>,
    pub right_values: Vec<f64>,
    pub right_weights: Vec<f64>,
}

pub(crate) fn jeffreys_with_grad(
    left: &[f64],
    left_w: Option<&[f64]>,
    right: &[f64],
    right_w: Option<&[f64]>,
    spec: &HistogramSpec,
) -> Result<(f64, JeffreysGrad)> {
    let (hl, zl) = accumulate(left, left_w, spec)?;
    let (hr, zr) = accumulate(right, right_w, spec)?;
    let value = jeffreys_divergence(&hl, &hr);
    let (dl, dr) = jeffreys_divergence_grad(&hl, &hr);
    let (left_values, left_weights) = accumulate_adjoint(left, left_w, spec, &hl, zl, &dl);
    let (right_values, right_weights) = accumulate_adjoint(right, right_w, spec, &hr, zr, &dr);
    Ok((value, JeffreysGrad { left_values, left_weights, right_values, right_weights }))
}

pub(crate) fn jeffreys_value(
    left: &[f64],
    left_w: Option<&[f64]>,
    right: &[f64],
    right_w: Option<&[f64]>,
    spec: &HistogramSpec,
) -> Result<f64> {
    let (hl, _) = accumulate(left, left_w, spec)?;
    let (hr, _) = accumulate(right, right_w, spec)?;
    Ok(jeffreys_divergence(&hl, &hr))
}

/// Jeffreys divergence between the soft intensity histograms of two halves.
pub fn jeffreys_loss(
    left: &ScalarVolume,
    right: &ScalarVolume,
    n_bins: usize,
    range: (f64, f64),
    masks: Option<(&[f64], &[f64])>,
) -> Result<LossValue> {
    let spec = HistogramSpec::new(n_bins, range)?;
    let (lw, rw) = match masks {
        Some((l, r)) => {
            if l.len() != left.data().len() || r.len() != right.data().len() {
                return Err(Error::InvalidParameter("mask does not match half grid".into()));
            }
            (Some(l), Some(r))
        }
        None => (None, None),
    };
    jeffreys_value(left.data(), lw, right.data(), rw, &spec).map(LossValue::differentiable)
}

/// Window and stabilizing constants of the structural similarity index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub c1: f64,
    pub c2: f64,
}

impl SsimParams {
    /// Standard constants `C1 = (0.01 L)^2`, `C2 = (0.03 L)^2` for dynamic range `L`.
    pub fn new(window: usize, dynamic_range: f64) -> Self {
        SsimParams {
            window,
            c1: (0.01 * dynamic_range).powi(2),
            c2: (0.03 * dynamic_range).powi(2),
        }
    }
}

/// Windowed sums along one axis with windows clipped at the grid boundary.
fn box_sum_axis(src: &[f64], dims: Dims, axis: usize, radius: usize) -> Vec<f64> {
    let n = dims.0[axis];
    let stride = [1, dims.nx(), dims.nx() * dims.ny()][axis];
    let mut out = vec![0.0; src.len()];
    let mut acc = vec![0.0; stride];
    let add = |acc: &mut [f64], row: &[f64], sign: f64| acc.iter_mut().zip(row).for_each(|(a, v)| *a += sign * v);
    for (sb, ob) in src.chunks_exact(stride * n).zip(out.chunks_exact_mut(stride * n)) {
        let row = |i: usize| &sb[i * stride..(i + 1) * stride];
        acc.fill(0.0);
        for l in 0..=radius.min(n - 1) {
            add(&mut acc, row(l), 1.0);
        }
        ob[..stride].copy_from_slice(&acc);
        for i in 1..n {
            if i + radius < n {
                add(&mut acc, row(i + radius), 1.0);
            }
            if i > radius {
                add(&mut acc, row(i - radius - 1), -1.0);
            }
            ob[i * stride..(i + 1) * stride].copy_from_slice(&acc);
        }
    }
    out
}

/// Windowed sum over the cubic neighborhood (clipped at the boundary).
fn box_sum(src: &[f64], dims: Dims, radius: usize) -> Vec<f64> {
    let a = box_sum_axis(src, dims, 0, radius);
    let b = box_sum_axis(&a, dims, 1, radius);
    box_sum_axis(&b, dims, 2, radius)
}

fn inverse_window_counts(dims: Dims, radius: usize) -> Vec<f64> {
    let count = |i: usize, n: usize| ((i + radius).min(n - 1) - i.saturating_sub(radius) + 1) as f64;
    (0..dims.len())
        .map(|idx| {
            let [i, j, k] = dims.coords(idx);
            1.0 / (count(i, dims.nx()) * count(j, dims.ny()) * count(k, dims.nz()))
        })
        .collect()
}

/// Mean SSIM of two same-grid images and, optionally, its gradient.
pub(crate) fn ssim_mean(a: &[f64], b: &[f64], dims: Dims, params: &SsimParams, want_grad: bool) -> (f64, Option<(Vec<f64>, Vec<f64>)>) {
    let r = params.window / 2;
    let inv = inverse_window_counts(dims, r);
    let n = a.len();
    let mean = |x: &[f64]| -> Vec<f64> { box_sum(x, dims, r).iter().zip(&inv).map(|(s, w)| s * w).collect() };
    let sq = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = mean(a);
    let mu_b = mean(b);
    let s_aa = mean(&sq(a, a));
    let s_bb = mean(&sq(b, b));
    let s_ab = mean(&sq(a, b));
    let (c1, c2) = (params.c1, params.c2);

    let mut total = 0.0;
    let mut partials = if want_grad { Some([vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]]) } else { None };
    let scale = 1.0 / n as f64;
    for p in 0..n {
        let (ma, mb) = (mu_a[p], mu_b[p]);
        let var_a = s_aa[p] - ma * ma;
        let var_b = s_bb[p] - mb * mb;
        let cov = s_ab[p] - ma * mb;
        let a1 = 2.0 * ma * mb + c1;
        let a2 = 2.0 * cov + c2;
        let b1 = ma * ma + mb * mb + c1;
        let b2 = var_a + var_b + c2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if let Some(g) = partials.as_mut() {
            let bb = b1 * b2;
            let k = 1.0 / b1 - 1.0 / b2;
            let w = scale * inv[p];
            g[0][p] = w * (2.0 * mb * (a2 - a1) / bb - 2.0 * ma * s * k);
            g[1][p] = w * (2.0 * ma * (a2 - a1) / bb - 2.0 * mb * s * k);
            g[2][p] = w * (-s / b2);
            g[3][p] = w * (2.0 * a1 / bb);
        }
    }
    // The partials w.r.t. both second moments coincide.
    let grads = partials.map(|[g_ma, g_mb, g_sq, g_ab]| {
        let ba = box_sum(&g_ma, dims, r);
        let bb = box_sum(&g_mb, dims, r);
        let bsq = box_sum(&g_sq, dims, r);
        let bab = box_sum(&g_ab, dims, r);
        let da = (0..n).map(|p| ba[p] + 2.0 * a[p] * bsq[p] + b[p] * bab[p]).collect();
        let db = (0..n).map(|p| bb[p] + 2.0 * b[p] * bsq[p] + a[p] * bab[p]).collect();
        (da, db)
    });
    (total * scale, grads)
}

/// `-SSIM(left, flip(right))`, so mirror-identical halves score -1.
pub fn ssim_loss(left: &ScalarVolume, right: &ScalarVolume, params: &SsimParams) -> Result<LossValue> {
    left.dims().ensure_same(right.dims())?;
    let flipped = right.sagittal_flip();
    let (s, _) = ssim_mean(left.data(), flipped.data(), left.dims(), params, false);
    Ok(LossValue::differentiable(-s))
}

/// SSIM symmetry loss on a full-grid channel: `-SSIM(left half, flip(right half))`.
/// Returns the loss and, if requested, its gradient on the full grid.
pub(crate) fn ssim_symmetry(data: &[f64], dims: Dims, params: &SsimParams, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let (l, r, half) = split_channel(data, dims);
    let rf = flip_x(&r, half);
    let (s, g) = ssim_mean(&l, &rf, half, params, want_grad);
    let grad = g.map(|(dl, drf)| {
        let mut full = vec![0.0; data.len()];
        let h = half.nx();
        let dr = flip_x(&drf, half);
        crate::volume::slab_adjoint(&dl.iter().map(|v| -v).collect::<Vec<_>>(), &mut full, dims, 0, h);
        crate::volume::slab_adjoint(&dr.iter().map(|v| -v).collect::<Vec<_>>(), &mut full, dims, dims.nx() - h, h);
        full
    });
    (-s, grad)
}

#[inline]
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `|sum B(left) - sum B(right)| / sum B(X)` with `B(x) = sigmoid((x - tau) / eps)`.
pub(crate) fn volume_balance_with_grad(data: &[f64], dims: Dims, tau: f64, eps: f64, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    let nx = dims.nx();
    let h = crate::volume::half_width(nx);
    let b: Vec<f64> = data.iter().map(|&x| sigmoid((x - tau) / eps)).collect();
    let (mut left, mut right, mut total) = (0.0, 0.0, 0.0);
    for (n, &v) in b.iter().enumerate() {
        let i = n % nx;
        total += v;
        if i < h {
            left += v;
        } else if i >= nx - h {
            right += v;
        }
    }
    if !(total > 1e-6) {
        return Err(Error::EmptySupport("no foreground voxels for the volume balance".into()));
    }
    let diff = left - right;
    let value = diff.abs() / total;
    let grad = want_grad.then(|| {
        let sign = diff.signum();
        b.iter()
            .enumerate()
            .map(|(n, &v)| {
                let i = n % nx;
                let side = if i < h { sign } else if i >= nx - h { -sign } else { 0.0 };
                let d_b = side / total - value / total;
                d_b * v * (1.0 - v) / eps
            })
            .collect()
    });
    Ok((value, grad))
}

/// Foreground balance between the two halves.
pub fn volume_balance_loss(vol: &ScalarVolume, tau: f64, sharpness: f64) -> Result<LossValue> {
    if !(sharpness > 0.0) {
        return Err(Error::InvalidParameter("binarizer sharpness must be > 0".into()));
    }
    volume_balance_with_grad(vol.data(), vol.dims(), tau, sharpness, false).map(|(v, _)| LossValue::differentiable(v))
}

/// Soft Dice coefficient `2 sum(ab) / (sum a^2 + sum b^2 + eps)`.
pub fn soft_dice(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    2.0 * ab / (aa + bb + DICE_EPS)
}

pub(crate) fn soft_dice_with_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    let den = aa + bb + DICE_EPS;
    let d = 2.0 * ab / den;
    let da = a.iter().zip(b).map(|(&x, &y)| (2.0 * y - 2.0 * d * x) / den).collect();
    let db = a.iter().zip(b).map(|(&x, &y)| (2.0 * x - 2.0 * d * y) / den).collect();
    (d, da, db)
}
