//! Rigid mid-sagittal alignment by Adam on finite-difference gradients of the
//! combined symmetry loss.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{jeffreys_value, ssim_symmetry, volume_balance_with_grad, MetricsConfig};
use crate::optim::Adam;
use crate::volume::{split_channel, ScalarVolume, Stencil};

/// Rotation angles in radians and translation in voxels about the grid center.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigidTransform {
    pub pitch: f64,
    pub yaw: f64,
    pub roll: f64,
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn from_degrees(pitch: f64, yaw: f64, roll: f64, translation: [f64; 3]) -> Self {
        RigidTransform {
            pitch: pitch.to_radians(),
            yaw: yaw.to_radians(),
            roll: roll.to_radians(),
            tx: translation[0],
            ty: translation[1],
            tz: translation[2],
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn is_finite(&self) -> bool {
        self.angles().iter().chain(self.translation().iter()).all(|v| v.is_finite())
    }

    pub fn angles(&self) -> [f64; 3] {
        [self.pitch, self.yaw, self.roll]
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.tx, self.ty, self.tz]
    }

    /// `Rz(roll) * Ry(yaw) * Rx(pitch)`.
    pub fn rotation(&self) -> Matrix3<f64> {
        *Rotation3::from_euler_angles(self.pitch, self.yaw, self.roll).matrix()
    }
}

/// Backward rigid resampling: output `p` samples `c + S^-1 R^-1 S (p - c - t)`,
/// with `S` the voxel spacing so the rotation acts in millimetres.
pub fn apply_rigid(vol: &ScalarVolume, t: &RigidTransform) -> Result<ScalarVolume> {
    if !t.is_finite() {
        return Err(Error::InvalidParameter(format!("non-finite rigid transform {t:?}")));
    }
    if t.is_identity() {
        return Ok(vol.clone());
    }
    let dims = vol.dims();
    let s = Matrix3::from_diagonal(&Vector3::from(vol.spacing()));
    let s_inv = Matrix3::from_diagonal(&Vector3::from(vol.spacing().map(|x| 1.0 / x)));
    let m = s_inv * t.rotation().transpose() * s;
    let c = Vector3::from(dims.center());
    let shift = Vector3::from(t.translation());
    let data = vol.data();
    let out = (0..dims.len())
        .into_par_iter()
        .map(|idx| {
            let [i, j, k] = dims.coords(idx);
            let p = Vector3::new(i as f64, j as f64, k as f64);
            let q = c + m * (p - c - shift);
            Stencil::new(dims, [q.x, q.y, q.z]).sample(data)
        })
        .collect();
    ScalarVolume::new(dims, vol.spacing(), out)
}

/// Relative weights of the three alignment terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignWeights {
    pub jeffreys: f64,
    pub ssim: f64,
    pub volume: f64,
}

impl Default for AlignWeights {
    fn default() -> Self {
        AlignWeights { jeffreys: 1.0, ssim: 1.0, volume: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub weights: AlignWeights,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Central-difference step for the angles, radians.
    pub angle_step: f64,
    /// Central-difference step for the translation, voxels.
    pub translation_step: f64,
    /// Also optimize the shifts within the symmetry plane (ty, tz). They cannot move the
    /// plane, and left free they drift the head out of the field of view.
    pub in_plane_shifts: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            iterations: 150,
            learning_rate: 0.03,
            weights: AlignWeights::default(),
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            angle_step: 1e-3,
            translation_step: 0.1,
            in_plane_shifts: false,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        let w = self.weights;
        let checks = [
            (self.iterations >= 1, "align.iterations must be >= 1"),
            (self.learning_rate.is_finite() && self.learning_rate > 0.0, "align.learning_rate must be > 0"),
            ([w.jeffreys, w.ssim, w.volume].iter().all(|x| x.is_finite() && *x >= 0.0), "align.weights must be >= 0"),
            ((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2), "align.beta1/beta2 must lie in [0, 1)"),
            (self.epsilon > 0.0, "align.epsilon must be > 0"),
            (self.angle_step > 0.0 && self.translation_step > 0.0, "align finite-difference steps must be > 0"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config((*msg).into())),
            None => Ok(()),
        }
    }
}

/// Outcome of [`align_symmetry`].
#[derive(Clone, Debug)]
pub struct AlignResult {
    pub transform: RigidTransform,
    pub aligned: ScalarVolume,
    /// Combined loss at the start and after every Adam step.
    pub trace: Vec<f64>,
    pub best_iteration: usize,
}

impl AlignResult {
    pub fn best_loss(&self) -> f64 {
        self.trace[self.best_iteration]
    }
}

/// `w1 * Jeffreys + w2 * SSIM loss + w3 * volume balance` of a volume's two halves.
pub fn symmetry_loss(vol: &ScalarVolume, weights: &AlignWeights, metrics: &MetricsConfig) -> Result<f64> {
    let dims = vol.dims();
    let mut total = 0.0;
    if weights.jeffreys > 0.0 {
        let (l, r, _) = split_channel(vol.data(), dims);
        total += weights.jeffreys * jeffreys_value(&l, None, &r, None, &metrics.histogram())?;
    }
    if weights.ssim > 0.0 {
        total += weights.ssim * ssim_symmetry(vol.data(), dims, &metrics.ssim(), false).0;
    }
    if weights.volume > 0.0 {
        let (b, _) = volume_balance_with_grad(vol.data(), dims, metrics.binarize_threshold, metrics.binarize_sharpness, false)?;
        total += weights.volume * b;
    }
    Ok(total)
}

/// Map optimizer coordinates to a transform. Translations are optimized in units
/// of the grid half-extent so that one learning rate suits both angles and shifts.
fn to_transform(theta: &[f64; 6], half_extent: [f64; 3]) -> RigidTransform {
    RigidTransform {
        pitch: theta[0],
        yaw: theta[1],
        roll: theta[2],
        tx: theta[3] * half_extent[0],
        ty: theta[4] * half_extent[1],
        tz: theta[5] * half_extent[2],
    }
}

/// Find the rigid transform that makes the volume mirror-symmetric about its central x-plane.
pub fn align_symmetry(vol: &ScalarVolume, cfg: &AlignConfig, metrics: &MetricsConfig) -> Result<AlignResult> {
    cfg.validate()?;
    metrics.validate()?;
    if vol.dims().nx() < 2 {
        return Err(Error::InvalidVolume("alignment needs nx >= 2".into()));
    }
    let half_extent = vol.dims().0.map(|n| ((n.max(2) - 1) as f64) / 2.0);
    let eval = |theta: &[f64; 6]| -> Result<f64> {
        let moved = apply_rigid(vol, &to_transform(theta, half_extent))?;
        symmetry_loss(&moved, &cfg.weights, metrics)
    };
    let steps = [
        cfg.angle_step,
        cfg.angle_step,
        cfg.angle_step,
        cfg.translation_step / half_extent[0],
        cfg.translation_step / half_extent[1],
        cfg.translation_step / half_extent[2],
    ];

    let free: Vec<usize> = if cfg.in_plane_shifts { (0..6).collect() } else { vec![0, 1, 2, 3] };
    let mut theta = [0.0; 6];
    let mut adam = Adam::new(6, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    let (mut best_theta, mut best_iteration) = (theta, 0);
    for it in 0..=cfg.iterations {
        let probes: Vec<[f64; 6]> = std::iter::once(theta)
            .chain(free.iter().flat_map(|&a| {
                [1.0, -1.0].map(|sign| {
                    let mut p = theta;
                    p[a] += sign * steps[a];
                    p
                })
            }))
            .collect();
        // The last pass only scores the final iterate.
        let probes = if it == cfg.iterations { &probes[..1] } else { &probes[..] };
        let losses = probes.par_iter().map(eval).collect::<Result<Vec<f64>>>()?;
        if let Some(bad) = losses.iter().position(|l| !l.is_finite()) {
            return Err(Error::Diverged {
                iteration: it,
                detail: format!("non-finite symmetry loss at parameters {:?}", probes[bad]),
            });
        }
        let loss = losses[0];
        if it == 0 || loss < trace[best_iteration] {
            best_theta = theta;
            best_iteration = it;
        }
        trace.push(loss);
        log::debug!("align iteration {it}: loss {loss:.6}");
        if it == cfg.iterations {
            break;
        }
        let mut grad = vec![0.0; 6];
        for (i, &a) in free.iter().enumerate() {
            grad[a] = (losses[1 + 2 * i] - losses[2 + 2 * i]) / (2.0 * steps[a]);
        }
        adam.step(&mut theta, &grad);
    }
    let transform = to_transform(&best_theta, half_extent);
    let aligned = apply_rigid(vol, &transform)?;
    Ok(AlignResult { transform, aligned, trace, best_iteration })
}

/// Errors of a recovered alignment relative to a known perturbation of a volume that
/// was mirror-symmetric about its central x-plane.
///
/// A mirror-symmetric loss cannot see rotations about the x axis or shifts within the
/// symmetry plane, so recovery is judged on the plane itself: the angle between the
/// recovered and true plane normals and the offset of the plane along x.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaneError {
    pub normal_angle_deg: f64,
    pub offset_voxels: f64,
}

/// Compare `recovered` against the `applied` perturbation, both about a grid with `spacing`.
pub fn plane_error(applied: &RigidTransform, recovered: &RigidTransform, spacing: [f64; 3]) -> PlaneError {
    // Output p of the chained resampling reads the symmetric source at
    // c + Ra^T (Rr^T (p - c - S tr) - S ta) in millimetres.
    let s = Matrix3::from_diagonal(&Vector3::from(spacing));
    let ta = s * Vector3::from(applied.translation());
    let tr = s * Vector3::from(recovered.translation());
    let q = applied.rotation().transpose() * recovered.rotation().transpose();
    let d = -(applied.rotation().transpose() * (recovered.rotation().transpose() * tr + ta));
    let normal = q.transpose() * Vector3::x();
    let cos = normal.x.abs().min(1.0);
    PlaneError { normal_angle_deg: cos.acos().to_degrees(), offset_voxels: d.x.abs() / spacing[0] }
}
