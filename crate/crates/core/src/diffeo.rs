//! Stationary velocity fields: upsampling from a control grid, scaling-and-squaring
//! integration, composition, Jacobian determinants and the two field regularizers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::LossValue;
use crate::volume::{Dims, ScalarVolume, Stencil, VectorField, Warp};

pub const DEFAULT_STEPS: usize = 7;
pub const DEFAULT_CONTROL_FACTOR: usize = 2;

/// Control-grid dimensions `ceil(n / factor)` for an image grid.
pub fn control_dims(image: Dims, factor: usize) -> Dims {
    Dims(image.0.map(|n| n.div_ceil(factor.max(1))))
}

/// A velocity field stored on a coarse control grid.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityField {
    control: VectorField,
    factor: usize,
    image_dims: Dims,
}

impl VelocityField {
    pub fn zeros(image_dims: Dims, factor: usize) -> Result<Self> {
        check_factor(factor)?;
        Ok(VelocityField { control: VectorField::zeros(control_dims(image_dims, factor)), factor, image_dims })
    }

    pub fn from_control(control: VectorField, factor: usize, image_dims: Dims) -> Result<Self> {
        check_factor(factor)?;
        control.dims().ensure_same(control_dims(image_dims, factor))?;
        Ok(VelocityField { control, factor, image_dims })
    }

    /// A velocity given directly at image resolution (control factor 1).
    pub fn full_resolution(field: VectorField) -> Self {
        let image_dims = field.dims();
        VelocityField { control: field, factor: 1, image_dims }
    }

    /// Low-frequency random field whose control values have maximum norm `max_norm`.
    pub fn random_smooth(image_dims: Dims, factor: usize, max_norm: f64, seed: u64) -> Result<Self> {
        check_factor(factor)?;
        let cdims = control_dims(image_dims, factor);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut modes = Vec::new();
        for _ in 0..4 {
            let freq: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..0.75));
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            modes.push((freq, phase, amp));
        }
        let n = cdims.0.map(|m| m.max(1) as f64);
        let mut field = VectorField::from_fn(cdims, |i, j, k| {
            let x = [i as f64 / n[0], j as f64 / n[1], k as f64 / n[2]];
            let mut v = [0.0; 3];
            for (freq, phase, amp) in &modes {
                let arg = std::f64::consts::TAU * (freq[0] * x[0] + freq[1] * x[1] + freq[2] * x[2]) + phase;
                for c in 0..3 {
                    v[c] += amp[c] * arg.sin();
                }
            }
            v
        })?;
        let peak = field.max_norm();
        if peak > 0.0 {
            field = field.scaled(max_norm / peak);
        }
        Ok(VelocityField { control: field, factor, image_dims })
    }

    /// The same field with a constant added to every control value.
    pub fn shifted(mut self, offset: [f64; 3]) -> Self {
        self.control = VectorField::from_parts(
            self.control.dims(),
            self.control.data().iter().map(|v| [v[0] + offset[0], v[1] + offset[1], v[2] + offset[2]]).collect(),
        );
        self
    }

    pub fn control(&self) -> &VectorField {
        &self.control
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn image_dims(&self) -> Dims {
        self.image_dims
    }

    /// Trilinear (corner-aligned) upsampling to the image grid.
    pub fn upsample(&self) -> VectorField {
        let up = Upsampler::new(self.control.dims(), self.image_dims);
        VectorField::from_parts(self.image_dims, up.apply(self.control.data()))
    }
}

fn check_factor(factor: usize) -> Result<()> {
    if factor == 0 {
        return Err(Error::InvalidParameter("control factor must be >= 1".into()));
    }
    Ok(())
}

/// Displacement field `u` of a map `phi(p) = p + u(p)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField(VectorField);

impl DeformationField {
    pub fn identity(dims: Dims) -> Self {
        DeformationField(VectorField::zeros(dims))
    }

    pub fn from_displacement(u: VectorField) -> Self {
        DeformationField(u)
    }

    pub fn displacement(&self) -> &VectorField {
        &self.0
    }

    pub fn into_displacement(self) -> VectorField {
        self.0
    }

    pub fn dims(&self) -> Dims {
        self.0.dims()
    }

    /// Backward-warp a volume or mask with this map.
    pub fn apply<T: Warp>(&self, input: &T) -> Result<T> {
        input.warp(&self.0)
    }
}

/// Separable linear interpolation tables mapping a control grid onto an image grid.
pub(crate) struct Upsampler {
    control: Dims,
    image: Dims,
    tables: [Vec<(usize, f64)>; 3],
    transposed: [Vec<Vec<(usize, f64)>>; 3],
}

impl Upsampler {
    pub fn new(control: Dims, image: Dims) -> Self {
        let tables: [Vec<(usize, f64)>; 3] = std::array::from_fn(|a| {
            let (m, n) = (control.0[a], image.0[a]);
            (0..n)
                .map(|i| {
                    if m < 2 || n < 2 {
                        return (0, 0.0);
                    }
                    let t = i as f64 * (m - 1) as f64 / (n - 1) as f64;
                    let i0 = (t as usize).min(m - 2);
                    (i0, t - i0 as f64)
                })
                .collect()
        });
        let transposed = std::array::from_fn(|a| {
            let m = control.0[a];
            let mut t = vec![Vec::new(); m];
            for (i, &(i0, f)) in tables[a].iter().enumerate() {
                t[i0].push((i, 1.0 - f));
                if m >= 2 {
                    t[i0 + 1].push((i, f));
                }
            }
            t
        });
        Upsampler { control, image, tables, transposed }
    }

    pub fn apply(&self, ctrl: &[[f64; 3]]) -> Vec<[f64; 3]> {
        if self.control == self.image {
            return ctrl.to_vec();
        }
        let mut dims = self.control;
        let mut data = ctrl.to_vec();
        for a in 0..3 {
            let mut out_dims = dims;
            out_dims.0[a] = self.image.0[a];
            data = interp_axis(&data, dims, out_dims, a, &self.tables[a]);
            dims = out_dims;
        }
        data
    }

    /// Transpose of [`Upsampler::apply`].
    pub fn adjoint(&self, grad: &[[f64; 3]]) -> Vec<[f64; 3]> {
        if self.control == self.image {
            return grad.to_vec();
        }
        let mut dims = self.image;
        let mut data = grad.to_vec();
        for a in (0..3).rev() {
            let mut out_dims = dims;
            out_dims.0[a] = self.control.0[a];
            data = interp_axis_transpose(&data, dims, out_dims, a, &self.transposed[a]);
            dims = out_dims;
        }
        data
    }
}

fn strides(d: Dims) -> [usize; 3] {
    [1, d.nx(), d.nx() * d.ny()]
}

fn interp_axis(src: &[[f64; 3]], src_dims: Dims, out_dims: Dims, axis: usize, table: &[(usize, f64)]) -> Vec<[f64; 3]> {
    let s = strides(src_dims);
    let m = src_dims.0[axis];
    (0..out_dims.len())
        .into_par_iter()
        .map(|idx| {
            let c = out_dims.coords(idx);
            let (i0, f) = table[c[axis]];
            let mut base = c;
            base[axis] = 0;
            let b = base[0] * s[0] + base[1] * s[1] + base[2] * s[2];
            let v0 = src[b + i0 * s[axis]];
            if m < 2 || f == 0.0 {
                return v0;
            }
            let v1 = src[b + (i0 + 1) * s[axis]];
            [v0[0] + f * (v1[0] - v0[0]), v0[1] + f * (v1[1] - v0[1]), v0[2] + f * (v1[2] - v0[2])]
        })
        .collect()
}

fn interp_axis_transpose(
    grad: &[[f64; 3]],
    grad_dims: Dims,
    out_dims: Dims,
    axis: usize,
    transposed: &[Vec<(usize, f64)>],
) -> Vec<[f64; 3]> {
    let s = strides(grad_dims);
    (0..out_dims.len())
        .into_par_iter()
        .map(|idx| {
            let c = out_dims.coords(idx);
            let mut base = c;
            base[axis] = 0;
            let b = base[0] * s[0] + base[1] * s[1] + base[2] * s[2];
            let mut acc = [0.0; 3];
            for &(i, w) in &transposed[c[axis]] {
                let g = grad[b + i * s[axis]];
                acc[0] += w * g[0];
                acc[1] += w * g[1];
                acc[2] += w * g[2];
            }
            acc
        })
        .collect()
}

#[inline]
fn add3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn displaced_stencils(u: &[[f64; 3]], dims: Dims) -> Vec<Stencil> {
    u.par_iter()
        .enumerate()
        .map(|(idx, d)| {
            let [i, j, k] = dims.coords(idx);
            Stencil::new(dims, [i as f64 + d[0], j as f64 + d[1], k as f64 + d[2]])
        })
        .collect()
}

/// `u(p) + f(p + u(p))`: composition of the map with displacement `f` after the one with `u`.
fn compose_raw(f: &[[f64; 3]], u: &[[f64; 3]], dims: Dims) -> Vec<[f64; 3]> {
    let mut out = vec![[0.0; 3]; u.len()];
    for_each_row(dims, u, &mut out, |p, &d| add3(d, Stencil::new(dims, add3(p, d)).sample_vec(f)));
    out
}

/// Map every voxel of `src` to `out` given its position and value, one x-row per task.
fn for_each_row<T: Sync, U: Send>(dims: Dims, src: &[T], out: &mut [U], f: impl Fn([f64; 3], &T) -> U + Sync) {
    let [nx, ny, _] = dims.0;
    out.par_chunks_mut(nx).zip(src.par_chunks(nx)).enumerate().for_each(|(row, (o, s))| {
        let (j, k) = ((row % ny) as f64, (row / ny) as f64);
        for (i, (o, s)) in o.iter_mut().zip(s).enumerate() {
            *o = f([i as f64, j, k], s);
        }
    });
}

/// Intermediate displacements `u_0 .. u_{N-1}`, kept for the reverse pass.
pub(crate) struct IntegrationTape {
    dims: Dims,
    steps: Vec<Vec<[f64; 3]>>,
}

/// Scaling and squaring at image resolution; returns `u_N` and the tape.
pub(crate) fn integrate_full(v: &[[f64; 3]], dims: Dims, n_steps: usize) -> (Vec<[f64; 3]>, IntegrationTape) {
    let scale = 0.5f64.powi(n_steps as i32);
    let mut u: Vec<[f64; 3]> = v.iter().map(|x| [x[0] * scale, x[1] * scale, x[2] * scale]).collect();
    let mut steps = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        let next = compose_raw(&u, &u, dims);
        steps.push(std::mem::replace(&mut u, next));
    }
    (u, IntegrationTape { dims, steps })
}

impl IntegrationTape {
    /// Gradient with respect to the full-resolution velocity given the gradient w.r.t. `u_N`.
    pub fn backward(&self, grad_final: Vec<[f64; 3]>) -> Vec<[f64; 3]> {
        let dims = self.dims;
        let mut g = grad_final;
        for u in self.steps.iter().rev() {
            // Serial so the scattered sums are accumulated in a fixed order.
            let mut next = g.clone();
            for (idx, p) in dims.positions().enumerate() {
                let (d, gp) = (&u[idx], &g[idx]);
                let s = Stencil::new(dims, add3(p, *d));
                // Dependence of the sampled value on the sample position: J^T g = grad (g . u).
                let jt = s.gradient(s.nodes().map(|n| gp[0] * u[n][0] + gp[1] * u[n][1] + gp[2] * u[n][2]));
                next[idx] = add3(next[idx], jt);
                // Dependence through the sampled field values.
                s.scatter_vec(&mut next, *gp);
            }
            g = next;
        }
        let scale = 0.5f64.powi(self.steps.len() as i32);
        g.iter().map(|x| [x[0] * scale, x[1] * scale, x[2] * scale]).collect()
    }
}

/// Integrate `v` over unit time by `n_steps` squarings of `v / 2^n_steps`.
pub fn integrate_velocity(v: &VelocityField, n_steps: usize) -> Result<DeformationField> {
    if n_steps == 0 {
        return Err(Error::InvalidParameter("scaling and squaring needs at least one step".into()));
    }
    let full = v.upsample();
    let dims = full.dims();
    let scale = 0.5f64.powi(n_steps as i32);
    let mut u: Vec<[f64; 3]> = full.data().iter().map(|x| [x[0] * scale, x[1] * scale, x[2] * scale]).collect();
    for _ in 0..n_steps {
        u = compose_raw(&u, &u, dims);
    }
    Ok(DeformationField(VectorField::from_parts(dims, u)))
}

/// `f ∘ g` under backward warping: `u(p) = u_g(p) + u_f(p + u_g(p))`.
pub fn compose(f: &DeformationField, g: &DeformationField) -> Result<DeformationField> {
    f.dims().ensure_same(g.dims())?;
    let dims = f.dims();
    Ok(DeformationField(VectorField::from_parts(dims, compose_raw(f.0.data(), g.0.data(), dims))))
}

/// Approximate inverse by the fixed point `w(p) = -u(p + w(p))`.
pub fn invert_deformation(phi: &DeformationField, iterations: usize) -> DeformationField {
    let dims = phi.dims();
    let u = phi.0.data();
    let mut w: Vec<[f64; 3]> = u.iter().map(|d| [-d[0], -d[1], -d[2]]).collect();
    for _ in 0..iterations {
        w = w
            .par_iter()
            .enumerate()
            .map(|(idx, d)| {
                let [i, j, k] = dims.coords(idx);
                let s = Stencil::new(dims, [i as f64 + d[0], j as f64 + d[1], k as f64 + d[2]]);
                let v = s.sample_vec(u);
                [-v[0], -v[1], -v[2]]
            })
            .collect();
    }
    DeformationField(VectorField::from_parts(dims, w))
}

/// Finite-difference derivative of component data along `axis` at voxel `idx`:
/// central in the interior, one-sided on boundary faces.
#[inline]
fn diff_at(u: &[[f64; 3]], dims: Dims, idx: usize, c: [usize; 3], axis: usize) -> [f64; 3] {
    let n = dims.0[axis];
    let s = strides(dims)[axis];
    if n < 2 {
        return [0.0; 3];
    }
    let (hi, lo, scale) = if c[axis] == 0 {
        (idx + s, idx, 1.0)
    } else if c[axis] == n - 1 {
        (idx, idx - s, 1.0)
    } else {
        (idx + s, idx - s, 0.5)
    };
    let (a, b) = (u[hi], u[lo]);
    [(a[0] - b[0]) * scale, (a[1] - b[1]) * scale, (a[2] - b[2]) * scale]
}

/// Transpose of [`diff_at`]: accumulate `g` (one value per component) into `out`.
#[inline]
fn diff_at_adjoint(out: &mut [[f64; 3]], dims: Dims, idx: usize, c: [usize; 3], axis: usize, g: [f64; 3]) {
    let n = dims.0[axis];
    let s = strides(dims)[axis];
    if n < 2 {
        return;
    }
    let (hi, lo, scale) = if c[axis] == 0 {
        (idx + s, idx, 1.0)
    } else if c[axis] == n - 1 {
        (idx, idx - s, 1.0)
    } else {
        (idx + s, idx - s, 0.5)
    };
    for k in 0..3 {
        out[hi][k] += scale * g[k];
        out[lo][k] -= scale * g[k];
    }
}

/// `I + grad u` at each voxel; entry `[i][a]` is `d phi_i / d x_a`.
fn jacobian_matrix(u: &[[f64; 3]], dims: Dims, idx: usize) -> [[f64; 3]; 3] {
    let c = dims.coords(idx);
    let mut m = [[0.0; 3]; 3];
    for a in 0..3 {
        let d = diff_at(u, dims, idx, c, a);
        for i in 0..3 {
            m[i][a] = d[i] + if i == a { 1.0 } else { 0.0 };
        }
    }
    m
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// `d det / d m[i][a]`.
fn cofactor3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for a in 0..3 {
            let (i1, i2) = ((i + 1) % 3, (i + 2) % 3);
            let (a1, a2) = ((a + 1) % 3, (a + 2) % 3);
            c[i][a] = m[i1][a1] * m[i2][a2] - m[i1][a2] * m[i2][a1];
        }
    }
    c
}

pub(crate) fn jacobian_determinants(u: &[[f64; 3]], dims: Dims) -> Vec<f64> {
    (0..u.len()).into_par_iter().map(|idx| det3(&jacobian_matrix(u, dims, idx))).collect()
}

/// Determinant of the Jacobian of `p + u(p)` in voxel coordinates.
pub fn jacobian_determinant(phi: &DeformationField) -> ScalarVolume {
    let dims = phi.dims();
    ScalarVolume::from_parts(dims, [1.0; 3], jacobian_determinants(phi.0.data(), dims))
}

/// Mean squared deviation of `det J` from `1 - hematoma`, and optionally its gradient w.r.t. `u`.
pub(crate) fn jacobian_loss_raw(u: &[[f64; 3]], dims: Dims, hematoma: &[f64], want_grad: bool) -> (f64, Option<Vec<[f64; 3]>>) {
    let n = u.len() as f64;
    let mats: Vec<[[f64; 3]; 3]> = (0..u.len()).into_par_iter().map(|idx| jacobian_matrix(u, dims, idx)).collect();
    let resid: Vec<f64> = mats.par_iter().zip(hematoma.par_iter()).map(|(m, h)| det3(m) - (1.0 - h)).collect();
    let value = resid.iter().map(|r| r * r).sum::<f64>() / n;
    let grad = want_grad.then(|| {
        let mut g = vec![[0.0; 3]; u.len()];
        for (idx, (m, r)) in mats.iter().zip(&resid).enumerate() {
            let w = 2.0 * r / n;
            if w == 0.0 {
                continue;
            }
            let cof = cofactor3(m);
            let c = dims.coords(idx);
            for a in 0..3 {
                diff_at_adjoint(&mut g, dims, idx, c, a, [w * cof[0][a], w * cof[1][a], w * cof[2][a]]);
            }
        }
        g
    });
    (value, grad)
}

/// Penalizes volume change away from the hematoma and pushes it towards collapse inside.
pub fn jacobian_loss(phi: &DeformationField, hematoma: &[f64]) -> Result<LossValue> {
    if hematoma.len() != phi.dims().len() {
        return Err(Error::InvalidParameter(format!(
            "hematoma channel has {} voxels, field has {}",
            hematoma.len(),
            phi.dims().len()
        )));
    }
    let (value, _) = jacobian_loss_raw(phi.0.data(), phi.dims(), hematoma, false);
    Ok(LossValue { value, differentiable: true })
}

/// Sum over axes of the mean squared forward difference (all components) on the control grid.
pub(crate) fn gradient_loss_raw(v: &[[f64; 3]], dims: Dims, want_grad: bool) -> (f64, Option<Vec<[f64; 3]>>) {
    let s = strides(dims);
    let mut value = 0.0;
    let mut grad = want_grad.then(|| vec![[0.0; 3]; v.len()]);
    for a in 0..3 {
        let n = dims.0[a];
        if n < 2 {
            continue;
        }
        let count = (v.len() / n * (n - 1)) as f64;
        let mut sum = 0.0;
        for idx in 0..v.len() {
            if dims.coords(idx)[a] == n - 1 {
                continue;
            }
            let (p, q) = (v[idx], v[idx + s[a]]);
            let d = [q[0] - p[0], q[1] - p[1], q[2] - p[2]];
            sum += d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            if let Some(g) = grad.as_mut() {
                for c in 0..3 {
                    let w = 2.0 * d[c] / count;
                    g[idx + s[a]][c] += w;
                    g[idx][c] -= w;
                }
            }
        }
        value += sum / count;
    }
    (value, grad)
}

/// Diffusion regularizer on the velocity control grid.
pub fn gradient_loss(v: &VelocityField) -> LossValue {
    let (value, _) = gradient_loss_raw(v.control.data(), v.control.dims(), false);
    LossValue { value, differentiable: true }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn interior(dims: Dims, band: usize) -> impl Iterator<Item = usize> {
        (0..dims.len()).filter(move |&idx| {
            let c = dims.coords(idx);
            (0..3).all(|a| c[a] >= band && c[a] + band < dims.0[a])
        })
    }

    /// Forward-Euler integration of `dx/dt = v(x)` for one voxel position.
    fn euler_endpoint(v: &VectorField, p: [f64; 3], steps: usize) -> [f64; 3] {
        let mut x = p;
        let h = 1.0 / steps as f64;
        for _ in 0..steps {
            let d = v.sample(x);
            for a in 0..3 {
                x[a] += h * d[a];
            }
        }
        x
    }

    #[test]
    fn zero_velocity_gives_identity_exactly() {
        let v = VelocityField::zeros(Dims::cube(9), 2).unwrap();
        let phi = integrate_velocity(&v, 7).unwrap();
        assert!(phi.displacement().data().iter().all(|d| *d == [0.0; 3]));
    }

    #[test]
    fn control_grid_dims_round_up() {
        assert_eq!(control_dims(Dims::new(64, 63, 1), 2), Dims::new(32, 32, 1));
        let v = VelocityField::zeros(Dims::new(13, 8, 5), 2).unwrap();
        assert_eq!(v.control().dims(), Dims::new(7, 4, 3));
        assert!(VelocityField::zeros(Dims::cube(4), 0).is_err());
        assert!(VelocityField::from_control(VectorField::zeros(Dims::cube(3)), 2, Dims::cube(8)).is_err());
    }

    #[test]
    fn upsample_reproduces_linear_fields_and_its_adjoint_is_the_transpose() {
        let image = Dims::new(11, 8, 7);
        let control = control_dims(image, 2);
        let up = Upsampler::new(control, image);
        // Corner-aligned: a field linear in control coordinates maps to the same physical line.
        let ctrl: Vec<[f64; 3]> = (0..control.len())
            .map(|idx| {
                let c = control.coords(idx);
                [c[0] as f64 / (control.nx() - 1) as f64, 0.0, c[2] as f64 / (control.nz() - 1) as f64]
            })
            .collect();
        let full = up.apply(&ctrl);
        for idx in 0..image.len() {
            let c = image.coords(idx);
            assert_abs_diff_eq!(full[idx][0], c[0] as f64 / (image.nx() - 1) as f64, epsilon = 1e-12);
            assert_abs_diff_eq!(full[idx][2], c[2] as f64 / (image.nz() - 1) as f64, epsilon = 1e-12);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<[f64; 3]> = (0..control.len()).map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect();
        let y: Vec<[f64; 3]> = (0..image.len()).map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect();
        let ax = up.apply(&x);
        let aty = up.adjoint(&y);
        let dot = |a: &[[f64; 3]], b: &[[f64; 3]]| a.iter().zip(b).map(|(p, q)| p[0] * q[0] + p[1] * q[1] + p[2] * q[2]).sum::<f64>();
        assert_abs_diff_eq!(dot(&ax, &y), dot(&x, &aty), epsilon = 1e-9);
    }

    #[test]
    fn constant_velocity_matches_euler_oracle() {
        let dims = Dims::cube(16);
        let v = VelocityField::from_control(VectorField::constant(control_dims(dims, 2), [2.0, 0.0, 0.0]), 2, dims).unwrap();
        let phi = integrate_velocity(&v, 7).unwrap();
        let full = v.upsample();
        for idx in interior(dims, 3) {
            let c = dims.coords(idx);
            let p = c.map(|x| x as f64);
            let end = euler_endpoint(&full, p, 1024);
            let u = phi.displacement().data()[idx];
            for a in 0..3 {
                assert!((p[a] + u[a] - end[a]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn linear_velocity_matches_matrix_exponential() {
        let dims = Dims::cube(24);
        let c = dims.center();
        let field = VectorField::from_fn(dims, |i, _, _| [0.1 * (i as f64 - c[0]), 0.0, 0.0]).unwrap();
        let v = VelocityField::full_resolution(field.clone());
        let phi = integrate_velocity(&v, 7).unwrap();
        let e = 0.1f64.exp();
        for idx in interior(dims, 4) {
            let p = dims.coords(idx).map(|x| x as f64);
            let u = phi.displacement().data()[idx];
            let expected_x = c[0] + e * (p[0] - c[0]);
            assert!((p[0] + u[0] - expected_x).abs() < 1e-2);
            let euler = euler_endpoint(&field, p, 1024);
            assert!((p[0] + u[0] - euler[0]).abs() < 1e-2);
            assert!(u[1].abs() < 1e-12 && u[2].abs() < 1e-12);
        }
    }

    #[test]
    fn compose_identities() {
        let dims = Dims::cube(8);
        let g = DeformationField::from_displacement(VectorField::constant(dims, [0.0, 2.0, 0.0]));
        let id = DeformationField::identity(dims);
        assert_eq!(compose(&id, &g).unwrap(), g);
        let f = DeformationField::from_displacement(VectorField::constant(dims, [1.0, 0.0, 0.0]));
        let fg = compose(&f, &g).unwrap();
        for idx in interior(dims, 2) {
            assert_eq!(fg.displacement().data()[idx], [1.0, 2.0, 0.0]);
        }
        assert!(compose(&f, &DeformationField::identity(Dims::cube(7))).is_err());
    }

    #[test]
    fn forward_and_backward_flows_are_inverse() {
        let dims = Dims::cube(20);
        for seed in 0..3 {
            let v = VelocityField::random_smooth(dims, 2, 2.0, seed).unwrap();
            let neg = VelocityField::from_control(v.control().scaled(-1.0), 2, dims).unwrap();
            let fwd = integrate_velocity(&v, 7).unwrap();
            let bwd = integrate_velocity(&neg, 7).unwrap();
            let both = compose(&fwd, &bwd).unwrap();
            for idx in interior(dims, 4) {
                assert!(crate::volume::norm3(both.displacement().data()[idx]) < 0.1);
            }
        }
    }

    #[test]
    fn doubling_steps_converges() {
        let dims = Dims::cube(24);
        let c = dims.center();
        let linear = VectorField::from_fn(dims, |i, j, _| [0.1 * (i as f64 - c[0]), 0.05 * (j as f64 - c[1]), 0.0]).unwrap();
        for field in [linear, VectorField::constant(dims, [2.0, -1.0, 0.5])] {
            let v = VelocityField::full_resolution(field);
            let a = integrate_velocity(&v, 7).unwrap();
            let b = integrate_velocity(&v, 14).unwrap();
            for idx in interior(dims, 4) {
                let (p, q) = (a.displacement().data()[idx], b.displacement().data()[idx]);
                assert!(crate::volume::norm3([p[0] - q[0], p[1] - q[1], p[2] - q[2]]) < 1e-3);
            }
        }
    }

    #[test]
    fn jacobian_of_simple_maps() {
        let dims = Dims::cube(7);
        let det = jacobian_determinant(&DeformationField::identity(dims));
        assert!(det.data().iter().all(|d| (d - 1.0).abs() < 1e-6));
        let c = dims.center();
        let u = VectorField::from_fn(dims, |i, _, _| [0.1 * (i as f64 - c[0]), 0.0, 0.0]).unwrap();
        let det = jacobian_determinant(&DeformationField::from_displacement(u));
        for idx in 0..dims.len() {
            assert_abs_diff_eq!(det.data()[idx], 1.1, epsilon = 1e-6);
        }
    }

    #[test]
    fn integrated_random_fields_are_diffeomorphic() {
        let dims = Dims::cube(16);
        for seed in 0..10 {
            let v = VelocityField::random_smooth(dims, 2, 2.0, 100 + seed).unwrap();
            let det = jacobian_determinant(&integrate_velocity(&v, 7).unwrap());
            assert!(det.data().iter().all(|&d| d > 0.0), "seed {seed}");
        }
    }

    #[test]
    fn jacobian_loss_cases() {
        let dims = Dims::cube(6);
        let id = DeformationField::identity(dims);
        let empty = vec![0.0; dims.len()];
        assert_abs_diff_eq!(jacobian_loss(&id, &empty).unwrap().value, 0.0, epsilon = 1e-9);
        let mut hem = empty.clone();
        for h in hem.iter_mut().take(10) {
            *h = 1.0;
        }
        assert_abs_diff_eq!(jacobian_loss(&id, &hem).unwrap().value, 10.0 / dims.len() as f64, epsilon = 1e-12);
        let c = dims.center();
        let u = VectorField::from_fn(dims, |i, _, _| [0.1 * (i as f64 - c[0]), 0.0, 0.0]).unwrap();
        let l = jacobian_loss(&DeformationField::from_displacement(u), &empty).unwrap();
        assert_abs_diff_eq!(l.value, 0.01, epsilon = 1e-9);
        assert!(jacobian_loss(&id, &[0.0; 3]).is_err());
    }

    #[test]
    fn gradient_loss_cases() {
        let dims = Dims::cube(8);
        let constant = VelocityField::full_resolution(VectorField::constant(dims, [1.0, -2.0, 0.5]));
        assert_abs_diff_eq!(gradient_loss(&constant).value, 0.0, epsilon = 1e-9);
        let ramp = VelocityField::full_resolution(VectorField::from_fn(dims, |i, _, _| [i as f64, 0.0, 0.0]).unwrap());
        assert_abs_diff_eq!(gradient_loss(&ramp).value, 1.0, epsilon = 1e-12);

        let v = VelocityField::random_smooth(Dims::new(10, 7, 9), 1, 1.5, 4).unwrap();
        let d = v.control().dims();
        let mut reference = 0.0;
        for (di, dj, dk) in [(1, 0, 0), (0, 1, 0), (0, 0, 1)] {
            let (mut sum, mut count) = (0.0, 0.0);
            for k in 0..d.nz() - dk {
                for j in 0..d.ny() - dj {
                    for i in 0..d.nx() - di {
                        let p = v.control().get(i, j, k);
                        let q = v.control().get(i + di, j + dj, k + dk);
                        sum += (0..3).map(|c| (q[c] - p[c]).powi(2)).sum::<f64>();
                        count += 1.0;
                    }
                }
            }
            reference += sum / count;
        }
        assert_abs_diff_eq!(gradient_loss(&v).value, reference, epsilon = 1e-6);
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(1e-6)
    }

    #[test]
    fn regularizer_adjoints_match_finite_differences() {
        let image = Dims::cube(12);
        // Displacements strictly inside (0, 1) voxel never cross a trilinear kink, so a
        // central difference is a valid oracle there.
        let v = VelocityField::random_smooth(image, 2, 0.3, 77).unwrap();
        let v = VelocityField::from_control(
            VectorField::new(v.control().dims(), v.control().data().iter().map(|d| d.map(|x| x + 0.5)).collect()).unwrap(),
            2,
            image,
        )
        .unwrap();
        let cdims = v.control().dims();
        let up = Upsampler::new(cdims, image);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let hem: Vec<f64> = (0..image.len()).map(|_| rng.gen_range(0.0..1.0)).collect();

        let jac = |ctrl: &[[f64; 3]]| {
            let (u, _) = integrate_full(&up.apply(ctrl), image, 7);
            jacobian_loss_raw(&u, image, &hem, false).0
        };
        let (u, tape) = integrate_full(&up.apply(v.control().data()), image, 7);
        let (_, gu) = jacobian_loss_raw(&u, image, &hem, true);
        let g_jac = up.adjoint(&tape.backward(gu.unwrap()));
        let (_, g_grad) = gradient_loss_raw(v.control().data(), cdims, true);
        let g_grad = g_grad.unwrap();
        let reg = |ctrl: &[[f64; 3]]| gradient_loss_raw(ctrl, cdims, false).0;

        let h = 1e-3;
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let idx = rng.gen_range(0..cdims.len());
            let c = rng.gen_range(0..3);
            let mut plus = v.control().data().to_vec();
            let mut minus = plus.clone();
            plus[idx][c] += h;
            minus[idx][c] -= h;
            worst = worst.max(rel_err(g_jac[idx][c], (jac(&plus) - jac(&minus)) / (2.0 * h)));
            worst = worst.max(rel_err(g_grad[idx][c], (reg(&plus) - reg(&minus)) / (2.0 * h)));
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn inverse_of_translation() {
        let dims = Dims::cube(10);
        let phi = DeformationField::from_displacement(VectorField::constant(dims, [1.5, 0.0, -0.5]));
        let inv = invert_deformation(&phi, 20);
        let both = compose(&phi, &inv).unwrap();
        for idx in interior(dims, 3) {
            assert!(crate::volume::norm3(both.displacement().data()[idx]) < 1e-9);
        }
    }
}
