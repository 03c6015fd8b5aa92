//! Voxel-grid containers and the sampling primitives every other module builds on.
//!
//! All grids use an x-fastest layout: voxel `(i, j, k)` lives at
//! `i + nx * (j + ny * k)`. Continuous coordinates are expressed in voxel
//! units with node `(i, j, k)` at position `(i, j, k)`. Sampling outside the
//! grid clamps to the nearest boundary node.
//!
//! The "left" half of a volume is the low-x half; `sagittal_flip` mirrors x.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid extent `(nx, ny, nz)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims(pub [usize; 3]);

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims([nx, ny, nz])
    }

    pub const fn cube(n: usize) -> Self {
        Dims([n, n, n])
    }

    #[inline]
    pub fn nx(&self) -> usize {
        self.0[0]
    }

    #[inline]
    pub fn ny(&self) -> usize {
        self.0[1]
    }

    #[inline]
    pub fn nz(&self) -> usize {
        self.0[2]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0[0] * self.0[1] * self.0[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.0[0] * (j + self.0[1] * k)
    }

    #[inline]
    /// Voxel positions in storage order.
    pub fn positions(&self) -> impl Iterator<Item = [f64; 3]> {
        let [nx, ny, nz] = self.0;
        (0..nz).flat_map(move |k| (0..ny).flat_map(move |j| (0..nx).map(move |i| [i as f64, j as f64, k as f64])))
    }

    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.0[0];
        let ny = self.0[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Geometric center `((nx-1)/2, (ny-1)/2, (nz-1)/2)` in voxel coordinates.
    pub fn center(&self) -> [f64; 3] {
        [
            (self.0[0] as f64 - 1.0) / 2.0,
            (self.0[1] as f64 - 1.0) / 2.0,
            (self.0[2] as f64 - 1.0) / 2.0,
        ]
    }

    pub(crate) fn ensure_same(&self, other: Dims) -> Result<()> {
        if *self != other {
            return Err(Error::DimensionMismatch { expected: self.0, actual: other.0 });
        }
        Ok(())
    }
}

/// Lower node, node step (0 or 1), fraction and whether the axis is unclamped.
#[inline]
fn axis_params(q: f64, n: usize) -> (usize, usize, f64, bool) {
    if n < 2 {
        return (0, 0, 0.0, false);
    }
    let max = (n - 1) as f64;
    if q <= 0.0 {
        (0, 1, 0.0, false)
    } else if q >= max {
        (n - 2, 1, 1.0, false)
    } else {
        let i0 = (q as usize).min(n - 2);
        (i0, 1, q - i0 as f64, true)
    }
}

/// The eight nodes and weights of a clamped trilinear lookup.
///
/// Corner `c` has offsets `(c & 1, (c >> 1) & 1, (c >> 2) & 1)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    base: usize,
    step: [u32; 3],
    frac: [f64; 3],
    /// Bit `a` set when the interpolant varies along axis `a` (not clamped).
    live: u8,
}

impl Stencil {
    #[inline]
    pub fn new(dims: Dims, q: [f64; 3]) -> Self {
        let [nx, ny, _] = dims.0;
        let (x0, sx, fx, lx) = axis_params(q[0], dims.0[0]);
        let (y0, sy, fy, ly) = axis_params(q[1], dims.0[1]);
        let (z0, sz, fz, lz) = axis_params(q[2], dims.0[2]);
        Stencil {
            base: x0 + nx * (y0 + ny * z0),
            step: [sx as u32, (sy * nx) as u32, (sz * nx * ny) as u32],
            frac: [fx, fy, fz],
            live: lx as u8 | (ly as u8) << 1 | (lz as u8) << 2,
        }
    }

    #[inline]
    pub fn nodes(&self) -> [usize; 8] {
        let [sx, sy, sz] = self.step.map(|s| s as usize);
        let b = self.base;
        [b, b + sx, b + sy, b + sx + sy, b + sz, b + sx + sz, b + sy + sz, b + sx + sy + sz]
    }

    #[inline]
    pub fn weights(&self) -> [f64; 8] {
        let [fx, fy, fz] = self.frac;
        let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
        [
            gx * gy * gz,
            fx * gy * gz,
            gx * fy * gz,
            fx * fy * gz,
            gx * gy * fz,
            fx * gy * fz,
            gx * fy * fz,
            fx * fy * fz,
        ]
    }

    #[inline]
    pub fn sample(&self, data: &[f64]) -> f64 {
        let w = self.weights();
        let v = self.corners(data);
        (0..8).map(|c| w[c] * v[c]).sum()
    }

    /// Interpolate every component of a voxel-interleaved field.
    #[inline]
    pub fn sample_vec<const K: usize>(&self, data: &[[f64; K]]) -> [f64; K] {
        let w = self.weights();
        let mut acc = [0.0; K];
        for (n, wc) in self.nodes().into_iter().zip(w) {
            for (a, v) in acc.iter_mut().zip(&data[n]) {
                *a += wc * v;
            }
        }
        acc
    }

    /// Spatial gradient of the interpolant given the eight corner values.
    #[inline]
    pub fn gradient(&self, v: [f64; 8]) -> [f64; 3] {
        let [fx, fy, fz] = self.frac;
        let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
        let ddx = gy * gz * (v[1] - v[0])
            + fy * gz * (v[3] - v[2])
            + gy * fz * (v[5] - v[4])
            + fy * fz * (v[7] - v[6]);
        let ddy = gx * gz * (v[2] - v[0])
            + fx * gz * (v[3] - v[1])
            + gx * fz * (v[6] - v[4])
            + fx * fz * (v[7] - v[5]);
        let ddz = gx * gy * (v[4] - v[0])
            + fx * gy * (v[5] - v[1])
            + gx * fy * (v[6] - v[2])
            + fx * fy * (v[7] - v[3]);
        let mask = |a: u8, d: f64| if self.live & (1 << a) != 0 { d } else { 0.0 };
        [mask(0, ddx), mask(1, ddy), mask(2, ddz)]
    }

    /// Adjoint of [`Stencil::sample_vec`]: accumulate `g` into the eight nodes.
    #[inline]
    pub fn scatter_vec(&self, out: &mut [[f64; 3]], g: [f64; 3]) {
        let w = self.weights();
        for (n, wc) in self.nodes().into_iter().zip(w) {
            let dst = &mut out[n];
            dst[0] += wc * g[0];
            dst[1] += wc * g[1];
            dst[2] += wc * g[2];
        }
    }

    #[inline]
    pub fn corners(&self, data: &[f64]) -> [f64; 8] {
        self.nodes().map(|n| data[n])
    }
}

fn validate_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::InvalidVolume(format!("spacing must be positive and finite, got {spacing:?}")));
    }
    Ok(())
}

/// A 3D scalar image with anisotropic voxel spacing in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarVolume {
    dims: Dims,
    spacing: [f64; 3],
    data: Vec<f64>,
}

impl ScalarVolume {
    pub fn new(dims: Dims, spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidVolume(format!("empty grid {:?}", dims.0)));
        }
        if data.len() != dims.len() {
            return Err(Error::InvalidVolume(format!(
                "data length {} does not match grid {:?}",
                data.len(),
                dims.0
            )));
        }
        validate_spacing(spacing)?;
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume(format!("non-finite value at voxel {pos}")));
        }
        Ok(ScalarVolume { dims, spacing, data })
    }

    pub fn filled(dims: Dims, spacing: [f64; 3], value: f64) -> Result<Self> {
        Self::new(dims, spacing, vec![value; dims.len()])
    }

    pub fn from_fn(dims: Dims, spacing: [f64; 3], f: impl Fn(usize, usize, usize) -> f64 + Sync) -> Result<Self> {
        let data = (0..dims.len())
            .into_par_iter()
            .map(|idx| {
                let [i, j, k] = dims.coords(idx);
                f(i, j, k)
            })
            .collect();
        Self::new(dims, spacing, data)
    }

    /// Construct without validation; callers guarantee the invariants.
    pub(crate) fn from_parts(dims: Dims, spacing: [f64; 3], data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), dims.len());
        ScalarVolume { dims, spacing, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.dims.index(i, j, k)]
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        validate_spacing(spacing)?;
        self.spacing = spacing;
        Ok(self)
    }

    /// Clamp-to-edge trilinear lookup at a continuous voxel coordinate.
    pub fn sample(&self, point: [f64; 3]) -> f64 {
        Stencil::new(self.dims, point).sample(&self.data)
    }
}

/// Trilinear interpolation with clamp-to-edge boundary handling.
pub fn trilinear_sample(vol: &ScalarVolume, point: [f64; 3]) -> f64 {
    vol.sample(point)
}

/// Segmentation classes carried by a [`MaskVolume`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskClass {
    Brain,
    Skull,
    Hematoma,
    VentricleLeft,
    VentricleRight,
}

impl MaskClass {
    pub const ALL: [MaskClass; 5] = [
        MaskClass::Brain,
        MaskClass::Skull,
        MaskClass::Hematoma,
        MaskClass::VentricleLeft,
        MaskClass::VentricleRight,
    ];

    pub fn channel(self) -> usize {
        match self {
            MaskClass::Brain => 0,
            MaskClass::Skull => 1,
            MaskClass::Hematoma => 2,
            MaskClass::VentricleLeft => 3,
            MaskClass::VentricleRight => 4,
        }
    }

    /// Integer code used in label images (0 is background).
    pub fn label(self) -> u8 {
        self.channel() as u8 + 1
    }

    pub fn name(self) -> &'static str {
        match self {
            MaskClass::Brain => "brain",
            MaskClass::Skull => "skull",
            MaskClass::Hematoma => "hematoma",
            MaskClass::VentricleLeft => "ventricle_left",
            MaskClass::VentricleRight => "ventricle_right",
        }
    }
}

/// Soft per-class masks on a common grid, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskVolume {
    dims: Dims,
    channels: [Vec<f64>; 5],
}

impl MaskVolume {
    pub fn zeros(dims: Dims) -> Self {
        MaskVolume { dims, channels: std::array::from_fn(|_| vec![0.0; dims.len()]) }
    }

    pub fn from_channels(dims: Dims, channels: [Vec<f64>; 5]) -> Result<Self> {
        for (class, ch) in MaskClass::ALL.iter().zip(channels.iter()) {
            if ch.len() != dims.len() {
                return Err(Error::InvalidVolume(format!(
                    "{} channel has {} voxels, grid {:?} needs {}",
                    class.name(),
                    ch.len(),
                    dims.0,
                    dims.len()
                )));
            }
            if let Some(pos) = ch.iter().position(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidVolume(format!(
                    "{} channel value {} at voxel {pos} outside [0, 1]",
                    class.name(),
                    ch[pos]
                )));
            }
        }
        Ok(MaskVolume { dims, channels })
    }

    /// Decode an integer label image (0 background, 1 brain, 2 skull, 3 hematoma,
    /// 4 left ventricle, 5 right ventricle). Hematoma and ventricle voxels are
    /// also counted as brain, since the brain channel is the intracranial region.
    pub fn from_labels(labels: &ScalarVolume) -> Result<Self> {
        let dims = labels.dims();
        let mut mask = MaskVolume::zeros(dims);
        for (idx, &v) in labels.data().iter().enumerate() {
            let code = v.round();
            if (code - v).abs() > 1e-6 || !(0.0..=5.0).contains(&code) {
                return Err(Error::InvalidVolume(format!("label value {v} at voxel {idx} is not in 0..=5")));
            }
            let code = code as u8;
            if code == 0 {
                continue;
            }
            let class = MaskClass::ALL[(code - 1) as usize];
            mask.channels[class.channel()][idx] = 1.0;
            if matches!(class, MaskClass::Hematoma | MaskClass::VentricleLeft | MaskClass::VentricleRight) {
                mask.channels[MaskClass::Brain.channel()][idx] = 1.0;
            }
        }
        Ok(mask)
    }

    /// Hard label image: each voxel takes the highest-priority class whose soft
    /// value is at least 0.5 (hematoma, ventricles, skull, then brain).
    pub fn to_labels(&self, spacing: [f64; 3]) -> Result<ScalarVolume> {
        const PRIORITY: [MaskClass; 5] = [
            MaskClass::Hematoma,
            MaskClass::VentricleLeft,
            MaskClass::VentricleRight,
            MaskClass::Skull,
            MaskClass::Brain,
        ];
        let data = (0..self.dims.len())
            .map(|idx| {
                PRIORITY
                    .iter()
                    .find(|c| self.channels[c.channel()][idx] >= 0.5)
                    .map_or(0.0, |c| c.label() as f64)
            })
            .collect();
        ScalarVolume::new(self.dims, spacing, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn channel(&self, class: MaskClass) -> &[f64] {
        &self.channels[class.channel()]
    }

    pub fn channel_mut(&mut self, class: MaskClass) -> &mut [f64] {
        &mut self.channels[class.channel()]
    }

    pub fn set_channel(&mut self, class: MaskClass, data: Vec<f64>) -> Result<()> {
        if data.len() != self.dims.len() {
            return Err(Error::InvalidVolume(format!("{} channel length mismatch", class.name())));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidVolume(format!("{} channel outside [0, 1]", class.name())));
        }
        self.channels[class.channel()] = data;
        Ok(())
    }

    pub fn channels(&self) -> &[Vec<f64>; 5] {
        &self.channels
    }

    pub fn mass(&self, class: MaskClass) -> f64 {
        self.channel(class).iter().sum()
    }

    /// Fill an empty skull channel from an intensity threshold on the paired volume.
    pub fn with_skull_fallback(mut self, vol: &ScalarVolume, threshold: f64) -> Result<Self> {
        self.dims.ensure_same(vol.dims())?;
        if self.mass(MaskClass::Skull) == 0.0 {
            log::info!("skull channel empty; deriving skull mask from intensity > {threshold}");
            self.channels[MaskClass::Skull.channel()] =
                vol.data().iter().map(|&v| if v > threshold { 1.0 } else { 0.0 }).collect();
        }
        Ok(self)
    }
}

/// A 3-component vector per voxel in voxel units (displacement or velocity).
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    dims: Dims,
    data: Vec<[f64; 3]>,
}

impl VectorField {
    pub fn zeros(dims: Dims) -> Self {
        VectorField { dims, data: vec![[0.0; 3]; dims.len()] }
    }

    pub fn constant(dims: Dims, value: [f64; 3]) -> Self {
        VectorField { dims, data: vec![value; dims.len()] }
    }

    pub fn new(dims: Dims, data: Vec<[f64; 3]>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::InvalidVolume(format!(
                "field length {} does not match grid {:?}",
                data.len(),
                dims.0
            )));
        }
        if let Some(pos) = data.iter().position(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::InvalidVolume(format!("non-finite vector at voxel {pos}")));
        }
        Ok(VectorField { dims, data })
    }

    pub fn from_fn(dims: Dims, f: impl Fn(usize, usize, usize) -> [f64; 3] + Sync) -> Result<Self> {
        let data = (0..dims.len())
            .into_par_iter()
            .map(|idx| {
                let [i, j, k] = dims.coords(idx);
                f(i, j, k)
            })
            .collect();
        Self::new(dims, data)
    }

    pub(crate) fn from_parts(dims: Dims, data: Vec<[f64; 3]>) -> Self {
        debug_assert_eq!(data.len(), dims.len());
        VectorField { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[[f64; 3]] {
        &self.data
    }

    pub fn into_data(self) -> Vec<[f64; 3]> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        self.data[self.dims.index(i, j, k)]
    }

    pub fn sample(&self, point: [f64; 3]) -> [f64; 3] {
        Stencil::new(self.dims, point).sample_vec(&self.data)
    }

    pub fn scaled(&self, factor: f64) -> VectorField {
        VectorField {
            dims: self.dims,
            data: self.data.iter().map(|v| [v[0] * factor, v[1] * factor, v[2] * factor]).collect(),
        }
    }

    pub fn max_norm(&self) -> f64 {
        self.data.iter().map(|v| norm3(*v)).fold(0.0, f64::max)
    }

    pub fn mean_norm(&self) -> f64 {
        self.data.iter().map(|v| norm3(*v)).sum::<f64>() / self.data.len() as f64
    }
}

#[inline]
pub(crate) fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Sample positions `p + u(p)` for every voxel of `field`.
pub(crate) fn warp_stencils(field: &VectorField, source: Dims) -> Vec<Stencil> {
    let dims = field.dims();
    field
        .data()
        .par_iter()
        .enumerate()
        .map(|(idx, u)| {
            let [i, j, k] = dims.coords(idx);
            Stencil::new(source, [i as f64 + u[0], j as f64 + u[1], k as f64 + u[2]])
        })
        .collect()
}

pub(crate) fn warp_channel(data: &[f64], stencils: &[Stencil]) -> Vec<f64> {
    stencils.par_iter().map(|s| s.sample(data)).collect()
}

/// Backward warping: output voxel `p` takes the input value at `p + u(p)`.
pub trait Warp: Sized {
    fn warp(&self, field: &VectorField) -> Result<Self>;
}

impl Warp for ScalarVolume {
    fn warp(&self, field: &VectorField) -> Result<Self> {
        self.dims.ensure_same(field.dims())?;
        let stencils = warp_stencils(field, self.dims);
        Ok(ScalarVolume::from_parts(self.dims, self.spacing, warp_channel(&self.data, &stencils)))
    }
}

impl Warp for MaskVolume {
    /// Channel-wise trilinear warp; values stay in `[0, 1]` as convex combinations.
    fn warp(&self, field: &VectorField) -> Result<Self> {
        self.dims.ensure_same(field.dims())?;
        let stencils = warp_stencils(field, self.dims);
        let channels = std::array::from_fn(|c| warp_channel(&self.channels[c], &stencils));
        Ok(MaskVolume { dims: self.dims, channels })
    }
}

pub fn warp<T: Warp>(input: &T, field: &VectorField) -> Result<T> {
    input.warp(field)
}

/// Mirror across the central x-plane. Vector fields also negate their x component.
pub trait SagittalFlip {
    fn sagittal_flip(&self) -> Self;
}

pub(crate) fn flip_x<T: Copy>(data: &[T], dims: Dims) -> Vec<T> {
    let nx = dims.nx();
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks_exact(nx) {
        out.extend(row.iter().rev().copied());
    }
    out
}

impl SagittalFlip for ScalarVolume {
    fn sagittal_flip(&self) -> Self {
        ScalarVolume::from_parts(self.dims, self.spacing, flip_x(&self.data, self.dims))
    }
}

impl SagittalFlip for MaskVolume {
    fn sagittal_flip(&self) -> Self {
        MaskVolume {
            dims: self.dims,
            channels: std::array::from_fn(|c| flip_x(&self.channels[c], self.dims)),
        }
    }
}

impl SagittalFlip for VectorField {
    fn sagittal_flip(&self) -> Self {
        let mut data = flip_x(&self.data, self.dims);
        for v in &mut data {
            v[0] = -v[0];
        }
        VectorField { dims: self.dims, data }
    }
}

pub fn sagittal_flip<T: SagittalFlip>(x: &T) -> T {
    x.sagittal_flip()
}

/// Width of each half after the mid-sagittal split; odd widths drop the center slice.
pub fn half_width(nx: usize) -> usize {
    nx / 2
}

/// Extract the x-slab `[x0, x0 + width)` of a channel.
pub(crate) fn slab(data: &[f64], dims: Dims, x0: usize, width: usize) -> Vec<f64> {
    let nx = dims.nx();
    let mut out = Vec::with_capacity(width * dims.ny() * dims.nz());
    for row in data.chunks_exact(nx) {
        out.extend_from_slice(&row[x0..x0 + width]);
    }
    out
}

/// Adjoint of [`slab`]: accumulate a slab gradient back into the full grid.
pub(crate) fn slab_adjoint(grad: &[f64], full: &mut [f64], dims: Dims, x0: usize, width: usize) {
    let nx = dims.nx();
    for (row, g) in full.chunks_exact_mut(nx).zip(grad.chunks_exact(width)) {
        for (dst, src) in row[x0..x0 + width].iter_mut().zip(g) {
            *dst += src;
        }
    }
}

/// Split a channel into its low-x and high-x halves (center slice excluded for odd nx).
pub(crate) fn split_channel(data: &[f64], dims: Dims) -> (Vec<f64>, Vec<f64>, Dims) {
    let h = half_width(dims.nx());
    let half = Dims::new(h, dims.ny(), dims.nz());
    (slab(data, dims, 0, h), slab(data, dims, dims.nx() - h, h), half)
}

/// Split by the mid-sagittal plane into `(left, right)` halves of `floor(nx/2)` slices.
pub fn split_halves(vol: &ScalarVolume) -> Result<(ScalarVolume, ScalarVolume)> {
    if vol.dims().nx() < 2 {
        return Err(Error::InvalidVolume(format!("cannot split a volume with nx = {}", vol.dims().nx())));
    }
    let (l, r, half) = split_channel(vol.data(), vol.dims());
    Ok((
        ScalarVolume::from_parts(half, vol.spacing(), l),
        ScalarVolume::from_parts(half, vol.spacing(), r),
    ))
}

fn resample_channel(data: &[f64], dims: Dims, scale: [f64; 3], out_dims: Dims) -> Vec<f64> {
    (0..out_dims.len())
        .into_par_iter()
        .map(|idx| {
            let [i, j, k] = out_dims.coords(idx);
            let q = [i as f64 * scale[0], j as f64 * scale[1], k as f64 * scale[2]];
            Stencil::new(dims, q).sample(data)
        })
        .collect()
}

fn resampled_grid(dims: Dims, spacing: [f64; 3], target: [f64; 3]) -> Result<(Dims, [f64; 3])> {
    validate_spacing(target)?;
    let mut out = [0usize; 3];
    let mut scale = [0.0; 3];
    for a in 0..3 {
        let extent = dims.0[a] as f64 * spacing[a];
        out[a] = (extent / target[a]).round() as usize;
        scale[a] = target[a] / spacing[a];
    }
    if out.contains(&0) {
        return Err(Error::InvalidVolume(format!(
            "resampling {:?} at {spacing:?} mm to {target:?} mm gives a degenerate grid {out:?}",
            dims.0
        )));
    }
    Ok((Dims(out), scale))
}

/// Default resampling target in millimetres.
pub const DEFAULT_TARGET_SPACING: [f64; 3] = [0.40, 0.40, 1.50];

/// Trilinear resampling onto a grid with `target_spacing` covering the same physical extent.
pub fn resample(vol: &ScalarVolume, target_spacing: [f64; 3]) -> Result<ScalarVolume> {
    let (out_dims, scale) = resampled_grid(vol.dims(), vol.spacing(), target_spacing)?;
    let data = resample_channel(vol.data(), vol.dims(), scale, out_dims);
    Ok(ScalarVolume::from_parts(out_dims, target_spacing, data))
}

/// Channel-wise counterpart of [`resample`] for masks sharing `spacing`.
pub fn resample_mask(mask: &MaskVolume, spacing: [f64; 3], target_spacing: [f64; 3]) -> Result<MaskVolume> {
    let (out_dims, scale) = resampled_grid(mask.dims(), spacing, target_spacing)?;
    let channels = std::array::from_fn(|c| resample_channel(&mask.channels[c], mask.dims, scale, out_dims));
    Ok(MaskVolume { dims: out_dims, channels })
}
