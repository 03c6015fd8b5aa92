//! Write a phantom and its ground-truth field to NIfTI, read them back and
//! check that values and biomarkers survive the round trip.

use brainshift::biomarkers::extract_biomarkers;
use brainshift::diffeo::DeformationField;
use brainshift::nifti::{read_field, read_nifti, write_field, write_nifti};
use brainshift::phantom::{generate_case, PhantomSpec};
use brainshift::volume::MaskClass;

fn main() -> brainshift::error::Result<()> {
    let dir = std::env::temp_dir().join(format!("brainshift-nifti-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| brainshift::error::Error::Io { path: dir.clone(), source: e })?;
    let case = generate_case(&PhantomSpec::default())?;
    let spacing = case.volume.spacing();

    write_nifti(&case.volume, dir.join("volume.nii"))?;
    let back = read_nifti(dir.join("volume.nii"))?;
    let worst = case.volume.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("volume round trip: dims {:?}, max |difference| {worst:.3e} (float32 storage)", back.dims().0);

    write_field(case.ground_truth_field.displacement(), spacing, dir.join("field.nii"))?;
    let (field, field_spacing) = read_field(dir.join("field.nii"))?;
    let brain = case.masks.channel(MaskClass::Brain);
    let before = extract_biomarkers(&case.ground_truth_field, brain, spacing)?;
    let after = extract_biomarkers(&DeformationField::from_displacement(field), brain, field_spacing)?;
    println!("biomarkers before: {before:?}");
    println!("biomarkers after:  {after:?}");
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
