//! Deterministic synthetic head phantoms with ground-truth masks and
//! ground-truth hematoma deformations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::biomarkers::Laterality;
use crate::diffeo::DeformationField;
use crate::error::{Error, Result};
use crate::volume::{resample, resample_mask, Dims, MaskClass, MaskVolume, ScalarVolume, VectorField};

/// Which side carries the hematoma. Left is the low-x half.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HematomaSide {
    #[default]
    None,
    Left,
    Right,
    Bilateral,
}

impl HematomaSide {
    pub fn laterality(self) -> Option<Laterality> {
        match self {
            HematomaSide::None => None,
            HematomaSide::Left | HematomaSide::Right => Some(Laterality::Unilateral),
            HematomaSide::Bilateral => Some(Laterality::Bilateral),
        }
    }
}

/// Tissue intensities in pseudo-HU.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Intensities {
    pub air: f64,
    pub brain: f64,
    pub csf: f64,
    pub skull: f64,
    pub hematoma: f64,
}

impl Default for Intensities {
    fn default() -> Self {
        Intensities { air: -1000.0, brain: 35.0, csf: 8.0, skull: 1000.0, hematoma: 70.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub seed: u64,
    pub side: HematomaSide,
    /// Maximum hematoma thickness in voxels.
    pub thickness: f64,
    pub intensities: Intensities,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [64, 64, 64],
            spacing: [1.0, 1.0, 1.0],
            seed: 0,
            side: HematomaSide::Left,
            thickness: 6.0,
            intensities: Intensities::default(),
        }
    }
}

impl PhantomSpec {
    pub fn healthy() -> Self {
        PhantomSpec { side: HematomaSide::None, thickness: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&n| n < 32) {
            return Err(Error::InvalidParameter(format!("phantom grid {:?} must be at least 32 per axis", self.dims)));
        }
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidParameter("phantom spacing must be positive".into()));
        }
        if !(self.thickness.is_finite() && self.thickness >= 0.0) {
            return Err(Error::InvalidParameter("hematoma thickness must be >= 0".into()));
        }
        let i = self.intensities;
        if ![i.air, i.brain, i.csf, i.skull, i.hematoma].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("phantom intensities must be finite".into()));
        }
        Ok(())
    }
}

/// Ellipsoid geometry of a phantom head in voxel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadGeometry {
    pub center: [f64; 3],
    pub outer_radii: [f64; 3],
    pub inner_radii: [f64; 3],
    /// Distance of each ventricle center from the mid-sagittal plane.
    pub ventricle_offset: f64,
    pub ventricle_radii: [f64; 3],
}

const SKULL_THICKNESS: f64 = 3.0;
const EDGE_SIGMA: f64 = 1.0;
const HEMATOMA_EDGE_SIGMA: f64 = 0.5;
/// Ratio of healthy to diseased depth inside the crescent.
const CRESCENT_COMPRESSION: f64 = 0.15;

impl HeadGeometry {
    /// Slightly jittered default geometry for a grid; exactly mirror-symmetric in x.
    pub fn for_grid(dims: Dims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut jitter = |amp: f64| 1.0 + rng.gen_range(-amp..=amp);
        let n = dims.0.map(|n| n as f64);
        let outer = [0.42 * n[0] * jitter(0.03), 0.44 * n[1] * jitter(0.03), 0.40 * n[2] * jitter(0.03)];
        HeadGeometry {
            center: dims.center(),
            outer_radii: outer,
            inner_radii: outer.map(|r| r - SKULL_THICKNESS),
            ventricle_offset: 0.1 * n[0] * jitter(0.05),
            ventricle_radii: [0.06 * n[0] * jitter(0.05), 0.16 * n[1] * jitter(0.05), 0.1 * n[2] * jitter(0.05)],
        }
    }

    /// Half-width of the inner skull along x at height (y, z); `None` outside it.
    fn inner_half_width(&self, y: f64, z: f64) -> Option<f64> {
        let [_, ry, rz] = self.inner_radii;
        let s = 1.0 - ((y - self.center[1]) / ry).powi(2) - ((z - self.center[2]) / rz).powi(2);
        (s > 0.0).then(|| self.inner_radii[0] * s.sqrt())
    }

    /// Depth of the lateral ventricle edge below the inner skull at mid-height.
    fn ventricle_clearance(&self) -> f64 {
        self.inner_radii[0] - self.ventricle_offset - self.ventricle_radii[0]
    }
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Gaussian-blurred indicator of an axis-aligned ellipsoid, using a first-order signed distance.
fn soft_ellipsoid(d: [f64; 3], radii: [f64; 3], sigma: f64) -> f64 {
    let q = [d[0] / radii[0], d[1] / radii[1], d[2] / radii[2]];
    let f = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
    let g = [q[0] / radii[0], q[1] / radii[1], q[2] / radii[2]];
    let grad = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
    if grad == 0.0 {
        return 1.0;
    }
    // |grad F| = |g| / F, so (F - 1) / |grad F| = (F - 1) F / |g|.
    let signed = (f - 1.0) * f / grad;
    normal_cdf(-signed / sigma)
}

struct Tissue {
    outer: f64,
    inner: f64,
    left: f64,
    right: f64,
}

fn tissue_at(g: &HeadGeometry, p: [f64; 3]) -> Tissue {
    let d = [p[0] - g.center[0], p[1] - g.center[1], p[2] - g.center[2]];
    let off = g.ventricle_offset;
    Tissue {
        outer: soft_ellipsoid(d, g.outer_radii, EDGE_SIGMA),
        inner: soft_ellipsoid(d, g.inner_radii, EDGE_SIGMA),
        left: soft_ellipsoid([d[0] + off, d[1], d[2]], g.ventricle_radii, EDGE_SIGMA),
        right: soft_ellipsoid([d[0] - off, d[1], d[2]], g.ventricle_radii, EDGE_SIGMA),
    }
}

/// Healthy phantom plus optional hematoma; the ground-truth field maps the diseased
/// grid back onto the healthy anatomy (`diseased(p) = healthy(p + u(p))` for brain tissue).
#[derive(Clone, Debug)]
pub struct PhantomCase {
    pub volume: ScalarVolume,
    pub masks: MaskVolume,
    pub ground_truth_field: DeformationField,
    pub geometry: HeadGeometry,
    pub side: HematomaSide,
    pub laterality: Option<Laterality>,
    /// Maximum hematoma thickness in voxels.
    pub severity: f64,
    pub intensities: Intensities,
}

/// Serializable description of a case, without the voxel data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub geometry: HeadGeometry,
    pub side: HematomaSide,
    pub laterality: Option<Laterality>,
    pub severity: f64,
    pub hematoma_voxels: f64,
}

impl PhantomCase {
    pub fn summary(&self) -> CaseSummary {
        CaseSummary {
            dims: self.volume.dims().0,
            spacing: self.volume.spacing(),
            geometry: self.geometry,
            side: self.side,
            laterality: self.laterality,
            severity: self.severity,
            hematoma_voxels: self.masks.mass(MaskClass::Hematoma),
        }
    }
}

/// Mirror-symmetric healthy head: skull shell, brain interior and two ventricles.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<PhantomCase> {
    spec.validate()?;
    let dims = Dims(spec.dims);
    let geometry = HeadGeometry::for_grid(dims, spec.seed);
    let it = spec.intensities;
    let voxels: Vec<(f64, [f64; 5])> = (0..dims.len())
        .into_par_iter()
        .map(|idx| {
            let [i, j, k] = dims.coords(idx);
            let t = tissue_at(&geometry, [i as f64, j as f64, k as f64]);
            let content = it.brain + (it.csf - it.brain) * (t.left + t.right);
            let value = it.air + (it.skull - it.air) * t.outer + (content - it.skull) * t.inner;
            (value, [t.inner, (t.outer - t.inner).clamp(0.0, 1.0), 0.0, t.left, t.right])
        })
        .collect();
    let (volume, masks) = assemble(dims, spec.spacing, voxels)?;
    Ok(PhantomCase {
        volume,
        masks,
        ground_truth_field: DeformationField::identity(dims),
        geometry,
        side: HematomaSide::None,
        laterality: None,
        severity: 0.0,
        intensities: it,
    })
}

fn assemble(dims: Dims, spacing: [f64; 3], voxels: Vec<(f64, [f64; 5])>) -> Result<(ScalarVolume, MaskVolume)> {
    let mut channels: [Vec<f64>; 5] = std::array::from_fn(|_| Vec::with_capacity(dims.len()));
    let mut data = Vec::with_capacity(dims.len());
    for (v, m) in voxels {
        data.push(v);
        for (c, x) in channels.iter_mut().zip(m) {
            c.push(x);
        }
    }
    Ok((ScalarVolume::new(dims, spacing, data)?, MaskVolume::from_channels(dims, channels)?))
}

/// Lateral compression profile along an x-line: zero in the skull, a crescent band of
/// depth `t` squeezed into `CRESCENT_COMPRESSION * t`, then a linear decay to zero at `reach`.
fn compression(depth: f64, t: f64, reach: f64) -> f64 {
    let peak = (1.0 - CRESCENT_COMPRESSION) * t;
    if depth <= 0.0 || depth >= reach {
        0.0
    } else if depth <= t {
        (1.0 - CRESCENT_COMPRESSION) * depth
    } else {
        peak * (reach - depth) / (reach - t)
    }
}

/// Push brain tissue medially from the chosen inner-skull surface and fill the vacated
/// subdural crescent with hematoma.
pub fn inject_hematoma(healthy: &PhantomCase, side: HematomaSide, thickness: f64) -> Result<PhantomCase> {
    if !healthy.ground_truth_field.displacement().data().iter().all(|u| *u == [0.0; 3]) {
        return Err(Error::InvalidParameter("inject_hematoma expects a healthy case".into()));
    }
    if !(thickness.is_finite() && thickness >= 0.0) {
        return Err(Error::InvalidParameter("hematoma thickness must be >= 0".into()));
    }
    if thickness == 0.0 || side == HematomaSide::None {
        return Ok(healthy.clone());
    }
    let g = healthy.geometry;
    let min_inner = g.inner_radii.iter().cloned().fold(f64::INFINITY, f64::min);
    if thickness >= min_inner / 2.0 {
        return Err(Error::InvalidParameter(format!(
            "thickness {thickness} must be below half the inner-skull radius ({:.2})",
            min_inner / 2.0
        )));
    }
    if thickness + 2.0 * HEMATOMA_EDGE_SIGMA >= g.ventricle_clearance() {
        return Err(Error::InvalidParameter(format!(
            "thickness {thickness} collides with the ventricles (clearance {:.2})",
            g.ventricle_clearance()
        )));
    }
    let dims = healthy.volume.dims();
    let it = healthy.intensities;
    let (left_on, right_on) = match side {
        HematomaSide::Left => (true, false),
        HematomaSide::Right => (false, true),
        _ => (true, true),
    };
    let bilateral = left_on && right_on;

    let voxels: Vec<([f64; 3], f64, [f64; 5])> = (0..dims.len())
        .into_par_iter()
        .map(|idx| {
            let [i, j, k] = dims.coords(idx);
            let p = [i as f64, j as f64, k as f64];
            let mut ux = 0.0;
            let mut frac: f64 = 0.0;
            if let Some(a) = g.inner_half_width(p[1], p[2]) {
                // Thinner crescent towards the poles of the inner skull.
                let t = thickness * (a / g.inner_radii[0]).powi(2);
                let reach = if bilateral { a } else { 2.0 * a };
                let x = p[0] - g.center[0];
                for (on, sign) in [(left_on, 1.0), (right_on, -1.0)] {
                    if !on {
                        continue;
                    }
                    // Depth below the inner skull, measured from this side.
                    let depth = a + sign * x;
                    ux -= sign * compression(depth, t, reach);
                    if sign * x < 0.0 {
                        frac += normal_cdf((t - depth) / HEMATOMA_EDGE_SIGMA) * t.min(1.0);
                    }
                }
            }
            let frac = frac.min(1.0);
            let here = tissue_at(&g, p);
            let moved = tissue_at(&g, [p[0] + ux, p[1], p[2]]);
            let content = it.brain + (it.csf - it.brain) * (moved.left + moved.right);
            let content = (1.0 - frac) * content + frac * it.hematoma;
            let value = it.air + (it.skull - it.air) * here.outer + (content - it.skull) * here.inner;
            let masks = [
                here.inner,
                (here.outer - here.inner).clamp(0.0, 1.0),
                frac * here.inner,
                moved.left * (1.0 - frac),
                moved.right * (1.0 - frac),
            ];
            ([ux, 0.0, 0.0], value, masks)
        })
        .collect();
    let mut field = Vec::with_capacity(dims.len());
    let rest = voxels
        .into_iter()
        .map(|(u, v, m)| {
            field.push(u);
            (v, m)
        })
        .collect();
    let (volume, masks) = assemble(dims, healthy.volume.spacing(), rest)?;
    Ok(PhantomCase {
        volume,
        masks,
        ground_truth_field: DeformationField::from_displacement(VectorField::new(dims, field)?),
        geometry: g,
        side,
        laterality: side.laterality(),
        severity: thickness,
        intensities: it,
    })
}

/// Healthy phantom followed by the hematoma described in `spec`.
pub fn generate_case(spec: &PhantomSpec) -> Result<PhantomCase> {
    inject_hematoma(&generate_phantom(spec)?, spec.side, spec.thickness)
}

/// A case generated on a 32-voxel grid and resampled to `n` voxels per axis, for
/// grids below the generator's minimum size.
pub fn generate_downsampled(spec: &PhantomSpec, n: usize) -> Result<(ScalarVolume, MaskVolume)> {
    let case = generate_case(&PhantomSpec { dims: [32, 32, 32], ..spec.clone() })?;
    let spacing = case.volume.spacing();
    let target = spacing.map(|s| s * 32.0 / n as f64);
    let volume = resample(&case.volume, target)?;
    let masks = resample_mask(&case.masks, spacing, target)?;
    Ok((volume, masks))
}

/// Settings for [`generate_cohort`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortSpec {
    pub base: PhantomSpec,
    pub thickness_range: (f64, f64),
    /// Cases with thickness at or above this value are labelled surgical.
    pub surgery_threshold: f64,
    /// No thickness is drawn within this distance of the threshold.
    pub margin: f64,
    /// Probability that a case is bilateral.
    pub bilateral_fraction: f64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            base: PhantomSpec { dims: [48, 48, 48], ..PhantomSpec::default() },
            thickness_range: (1.5, 6.5),
            surgery_threshold: 4.0,
            margin: 0.5,
            bilateral_fraction: 0.3,
        }
    }
}

/// One cohort member and its ground-truth surgery label.
#[derive(Clone, Debug)]
pub struct CohortCase {
    pub id: String,
    pub case: PhantomCase,
    pub surgery: bool,
}

/// Mixed unilateral/bilateral cohort whose surgery label is a thickness threshold,
/// alternating labels so both classes are always present.
pub fn generate_cohort(n: usize, seed: u64, spec: &CohortSpec) -> Result<Vec<CohortCase>> {
    if n < 4 {
        return Err(Error::InvalidParameter("a cohort needs at least 4 cases".into()));
    }
    let (lo, hi) = spec.thickness_range;
    let thr = spec.surgery_threshold;
    if !(lo > 0.0 && lo + spec.margin < thr && thr + spec.margin < hi) {
        return Err(Error::InvalidParameter(format!(
            "threshold {thr} with margin {} must lie strictly inside the thickness range ({lo}, {hi})",
            spec.margin
        )));
    }
    if !(0.0..=1.0).contains(&spec.bilateral_fraction) {
        return Err(Error::InvalidParameter("bilateral_fraction must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plans: Vec<(u64, HematomaSide, f64, bool)> = (0..n)
        .map(|i| {
            let surgery = i % 2 == 0;
            let thickness =
                if surgery { rng.gen_range(thr + spec.margin..=hi) } else { rng.gen_range(lo..=thr - spec.margin) };
            let side = if rng.gen_bool(spec.bilateral_fraction) {
                HematomaSide::Bilateral
            } else if rng.gen_bool(0.5) {
                HematomaSide::Left
            } else {
                HematomaSide::Right
            };
            (rng.gen(), side, thickness, surgery)
        })
        .collect();
    plans
        .into_par_iter()
        .enumerate()
        .map(|(i, (case_seed, side, thickness, surgery))| {
            let case_spec = PhantomSpec { seed: case_seed, side, thickness, ..spec.base.clone() };
            Ok(CohortCase { id: format!("case{i:03}"), case: generate_case(&case_spec)?, surgery })
        })
        .collect()
}
