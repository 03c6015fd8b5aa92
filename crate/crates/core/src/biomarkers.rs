//! Deformation-magnitude biomarkers, hematoma volumetry, laterality and the
//! biomarker CSV format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffeo::DeformationField;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::phantom::CohortCase;
use crate::volume::{half_width, Dims, MaskClass, MaskVolume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Laterality {
    Unilateral,
    Bilateral,
}

impl Laterality {
    pub fn name(self) -> &'static str {
        match self {
            Laterality::Unilateral => "unilateral",
            Laterality::Bilateral => "bilateral",
        }
    }
}

/// Default fraction of hematoma mass each half needs for a bilateral label.
pub const BILATERAL_THRESHOLD: f64 = 0.1;

/// Voxels with a brain-mask value above this count as brain.
const MASK_CUTOFF: f64 = 0.5;

/// Max, mean and sum of voxel-wise displacement magnitudes in mm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ShiftStats {
    pub max_mm: f64,
    pub mean_mm: f64,
    pub sum_mm: f64,
    pub voxels: usize,
}

/// One row of the biomarker table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiomarkerRecord {
    pub id: String,
    pub mls_mm: Option<f64>,
    pub hematoma_volume_mm3: f64,
    pub max_shift_mm: f64,
    pub mean_shift_mm: f64,
    pub sum_shift_mm: f64,
    pub laterality: Laterality,
    #[serde(with = "bool_as_int")]
    pub surgery: bool,
}

mod bool_as_int {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match String::deserialize(d)?.trim() {
            "1" | "true" => Ok(true),
            "0" | "false" => Ok(false),
            other => Err(D::Error::custom(format!("invalid surgery label `{other}`"))),
        }
    }
}

impl BiomarkerRecord {
    pub fn validate(&self) -> Result<()> {
        let shifts = [self.hematoma_volume_mm3, self.max_shift_mm, self.mean_shift_mm, self.sum_shift_mm];
        if shifts.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || self.mls_mm.is_some_and(|m| !m.is_finite()) {
            return Err(Error::InvalidParameter(format!("record `{}` has negative or non-finite values", self.id)));
        }
        if self.max_shift_mm + 1e-9 < self.mean_shift_mm {
            return Err(Error::InvalidParameter(format!("record `{}` has max shift below mean shift", self.id)));
        }
        Ok(())
    }
}

/// Displacement magnitude statistics over the brain mask.
pub fn extract_biomarkers(field: &DeformationField, brain: &[f64], spacing: [f64; 3]) -> Result<ShiftStats> {
    let u = field.displacement().data();
    if brain.len() != u.len() {
        return Err(Error::InvalidParameter(format!(
            "brain mask has {} voxels, field has {}",
            brain.len(),
            u.len()
        )));
    }
    let mut stats = ShiftStats { max_mm: 0.0, mean_mm: 0.0, sum_mm: 0.0, voxels: 0 };
    for (d, _) in u.iter().zip(brain).filter(|(_, m)| **m > MASK_CUTOFF) {
        let mag = (0..3).map(|a| (d[a] * spacing[a]).powi(2)).sum::<f64>().sqrt();
        stats.max_mm = stats.max_mm.max(mag);
        stats.sum_mm += mag;
        stats.voxels += 1;
    }
    if stats.voxels == 0 {
        return Err(Error::EmptySupport("brain mask is empty".into()));
    }
    stats.mean_mm = stats.sum_mm / stats.voxels as f64;
    Ok(stats)
}

pub fn hematoma_volume(mask: &[f64], spacing: [f64; 3]) -> f64 {
    mask.iter().sum::<f64>() * spacing.iter().product::<f64>()
}

/// Bilateral iff each half holds at least `threshold` of the hematoma mass.
pub fn laterality(mask: &[f64], dims: Dims, threshold: f64) -> Result<Laterality> {
    if mask.len() != dims.len() {
        return Err(Error::InvalidParameter("hematoma mask does not match the grid".into()));
    }
    let total: f64 = mask.iter().sum();
    if !(total > 0.0) {
        return Err(Error::EmptySupport("hematoma mask is empty".into()));
    }
    let h = half_width(dims.nx());
    let (mut left, mut right) = (0.0, 0.0);
    for (idx, v) in mask.iter().enumerate() {
        let i = idx % dims.nx();
        if i < h {
            left += v;
        } else if i >= dims.nx() - h {
            right += v;
        }
    }
    Ok(if left >= threshold * total && right >= threshold * total {
        Laterality::Bilateral
    } else {
        Laterality::Unilateral
    })
}

/// Distance in mm between the ventricle-pair midpoint and the grid's mid-sagittal plane.
pub fn ventricle_midline_shift(masks: &MaskVolume, spacing: [f64; 3]) -> Result<f64> {
    let dims = masks.dims();
    let centroid = |class: MaskClass| -> Result<f64> {
        let m = masks.channel(class);
        let mass: f64 = m.iter().sum();
        if !(mass > 0.0) {
            return Err(Error::EmptySupport(format!("{} channel is empty", class.name())));
        }
        Ok(m.iter().enumerate().map(|(i, v)| v * (i % dims.nx()) as f64).sum::<f64>() / mass)
    };
    let mid = 0.5 * (centroid(MaskClass::VentricleLeft)? + centroid(MaskClass::VentricleRight)?);
    Ok((mid - dims.center()[0]).abs() * spacing[0])
}

/// Biomarker record for one case given its deformation field.
pub fn case_record(
    id: &str,
    masks: &MaskVolume,
    field: &DeformationField,
    spacing: [f64; 3],
    surgery: bool,
    bilateral_threshold: f64,
) -> Result<BiomarkerRecord> {
    let stats = extract_biomarkers(field, masks.channel(MaskClass::Brain), spacing)?;
    let hem = masks.channel(MaskClass::Hematoma);
    Ok(BiomarkerRecord {
        id: id.to_string(),
        mls_mm: ventricle_midline_shift(masks, spacing).ok(),
        hematoma_volume_mm3: hematoma_volume(hem, spacing),
        max_shift_mm: stats.max_mm,
        mean_shift_mm: stats.mean_mm,
        sum_shift_mm: stats.sum_mm,
        laterality: laterality(hem, masks.dims(), bilateral_threshold)?,
        surgery,
    })
}

/// Records for a phantom cohort, using each case's ground-truth field as its deformation.
pub fn cohort_records(cohort: &[CohortCase]) -> Result<Vec<BiomarkerRecord>> {
    cohort
        .iter()
        .map(|c| {
            case_record(
                &c.id,
                &c.case.masks,
                &c.case.ground_truth_field,
                c.case.volume.spacing(),
                c.surgery,
                BILATERAL_THRESHOLD,
            )
        })
        .collect()
}

pub fn records_to_csv(records: &[BiomarkerRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::InvalidParameter(format!("csv buffer: {e}")))
}

pub fn write_records(path: &Path, records: &[BiomarkerRecord]) -> Result<()> {
    write_atomic(path, &records_to_csv(records)?)
}

pub fn read_records(path: &Path) -> Result<Vec<BiomarkerRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_records(file)
}

pub fn parse_records(reader: impl std::io::Read) -> Result<Vec<BiomarkerRecord>> {
    let mut r = csv::Reader::from_reader(reader);
    let records = r.deserialize().collect::<std::result::Result<Vec<BiomarkerRecord>, _>>()?;
    records.iter().try_for_each(BiomarkerRecord::validate)?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{flip_x, VectorField};
    use approx::assert_abs_diff_eq;

    #[test]
    fn extract_cases() {
        let dims = Dims::new(4, 3, 2);
        let brain = vec![1.0; dims.len()];
        let zero = extract_biomarkers(&DeformationField::identity(dims), &brain, [1.0; 3]).unwrap();
        assert_eq!((zero.max_mm, zero.mean_mm, zero.sum_mm), (0.0, 0.0, 0.0));

        let mut mask = vec![0.0; dims.len()];
        mask[..5].fill(1.0);
        let field = DeformationField::from_displacement(VectorField::constant(dims, [0.0, 0.0, 1.0]));
        let s = extract_biomarkers(&field, &mask, [0.4, 0.4, 1.5]).unwrap();
        assert_abs_diff_eq!(s.max_mm, 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(s.mean_mm, 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(s.sum_mm, 7.5, epsilon = 1e-12);

        let mut one = vec![0.0; dims.len()];
        one[7] = 1.0;
        let field = DeformationField::from_displacement(VectorField::constant(dims, [1.0, 0.0, 0.0]));
        assert_abs_diff_eq!(extract_biomarkers(&field, &one, [0.4; 3]).unwrap().max_mm, 0.4, epsilon = 1e-12);
        assert!(extract_biomarkers(&field, &vec![0.0; dims.len()], [1.0; 3]).is_err());
    }

    #[test]
    fn volume_and_laterality() {
        assert_eq!(hematoma_volume(&[0.0; 10], [1.0; 3]), 0.0);
        assert_abs_diff_eq!(hematoma_volume(&[1.0; 100], [0.4, 0.4, 1.5]), 24.0, epsilon = 1e-9);
        assert_abs_diff_eq!(hematoma_volume(&[0.25, 0.5], [1.0; 3]), 0.75, epsilon = 1e-12);

        let dims = Dims::new(10, 1, 1);
        let mut m = vec![0.0; 10];
        m[1] = 1.0;
        assert_eq!(laterality(&m, dims, 0.1).unwrap(), Laterality::Unilateral);
        assert_eq!(laterality(&flip_x(&m, dims), dims, 0.1).unwrap(), Laterality::Unilateral);
        m[8] = 1.0;
        assert_eq!(laterality(&m, dims, 0.1).unwrap(), Laterality::Bilateral);
        m[1] = 0.95;
        m[8] = 0.05;
        assert_eq!(laterality(&m, dims, 0.1).unwrap(), Laterality::Unilateral);
        assert!(laterality(&[0.0; 10], dims, 0.1).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let records = vec![
            BiomarkerRecord {
                id: "a".into(),
                mls_mm: Some(2.5),
                hematoma_volume_mm3: 10.0,
                max_shift_mm: 3.0,
                mean_shift_mm: 1.0,
                sum_shift_mm: 100.0,
                laterality: Laterality::Unilateral,
                surgery: true,
            },
            BiomarkerRecord {
                id: "b".into(),
                mls_mm: None,
                hematoma_volume_mm3: 0.0,
                max_shift_mm: 0.0,
                mean_shift_mm: 0.0,
                sum_shift_mm: 0.0,
                laterality: Laterality::Bilateral,
                surgery: false,
            },
        ];
        let bytes = records_to_csv(&records).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with(
            "id,mls_mm,hematoma_volume_mm3,max_shift_mm,mean_shift_mm,sum_shift_mm,laterality,surgery\n"
        ));
        assert!(text.contains("b,,0.0,"));
        assert_eq!(parse_records(bytes.as_slice()).unwrap(), records);
        let bad = text.replace("3.0,1.0", "-3.0,1.0");
        assert!(parse_records(bad.as_bytes()).is_err());
    }
}
