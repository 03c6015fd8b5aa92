//! Single-file NIfTI-1 (`.nii`) reading and writing.
//!
//! Scalar volumes are written as float32 (or int16 for label images). Vector
//! fields are written as 4-D images with `dim[4] = 3`, one volume per component,
//! stored as float64 so displacement values survive a round trip unchanged.
//! Only axis-aligned geometry is kept: spacing comes from `pixdim`, and any
//! rotation in the sform/qform is ignored with a warning.

use std::path::Path;

use crate::error::{Error, NiftiError, Result};
use crate::io::write_atomic;
use crate::volume::{Dims, ScalarVolume, VectorField};

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;
const INTENT_VECTOR: i16 = 1007;

/// Descriptor written into deformation-field headers.
pub const FIELD_DESCRIPTION: &str = "brainshift displacement, voxel units, backward warp p -> p+u(p)";

/// Supported on-disk element types.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Datatype {
    Int16,
    Float32,
    Float64,
}

impl Datatype {
    fn code(self) -> i16 {
        match self {
            Datatype::Int16 => 4,
            Datatype::Float32 => 16,
            Datatype::Float64 => 64,
        }
    }

    fn from_code(code: i16) -> std::result::Result<Self, NiftiError> {
        match code {
            4 => Ok(Datatype::Int16),
            16 => Ok(Datatype::Float32),
            64 => Ok(Datatype::Float64),
            other => Err(NiftiError::UnsupportedDatatype(other)),
        }
    }

    fn size(self) -> usize {
        match self {
            Datatype::Int16 => 2,
            Datatype::Float32 => 4,
            Datatype::Float64 => 8,
        }
    }
}

/// Decoded image: up to four dimensions, scaled to reals.
#[derive(Clone, Debug)]
pub struct NiftiImage {
    pub dims: Dims,
    pub components: usize,
    pub spacing: [f64; 3],
    pub datatype: Datatype,
    pub description: String,
    pub data: Vec<f64>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    little: bool,
}

impl Reader<'_> {
    fn i16(&self, at: usize) -> i16 {
        let b = [self.bytes[at], self.bytes[at + 1]];
        if self.little { i16::from_le_bytes(b) } else { i16::from_be_bytes(b) }
    }

    fn f32(&self, at: usize) -> f32 {
        let b: [u8; 4] = self.bytes[at..at + 4].try_into().unwrap();
        if self.little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }
    }

    fn f64(&self, at: usize) -> f64 {
        let b: [u8; 8] = self.bytes[at..at + 8].try_into().unwrap();
        if self.little { f64::from_le_bytes(b) } else { f64::from_be_bytes(b) }
    }
}

/// Parse a complete `.nii` byte buffer.
pub fn decode(bytes: &[u8]) -> std::result::Result<NiftiImage, NiftiError> {
    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::Truncated { expected: HEADER_SIZE, actual: bytes.len() });
    }
    let magic: [u8; 4] = bytes[344..348].try_into().unwrap();
    match &magic {
        b"n+1\0" => {}
        b"n+2\0" | b"ni1\0" | b"ni2\0" => {
            let text = String::from_utf8_lossy(&magic[..3]).into_owned();
            return Err(NiftiError::UnsupportedFormat(text));
        }
        _ => return Err(NiftiError::BadMagic(magic)),
    }
    let little = i32::from_le_bytes(bytes[0..4].try_into().unwrap()) == HEADER_SIZE as i32;
    let big = i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == HEADER_SIZE as i32;
    if !little && !big {
        return Err(NiftiError::InvalidHeader("sizeof_hdr is not 348".into()));
    }
    let r = Reader { bytes, little };

    let ndim = r.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(NiftiError::InvalidHeader(format!("dim[0] = {ndim}")));
    }
    let mut dim = [1usize; 7];
    for (d, slot) in dim.iter_mut().enumerate().take(ndim as usize) {
        let v = r.i16(42 + 2 * d);
        if v < 1 {
            return Err(NiftiError::InvalidHeader(format!("dim[{}] = {v}", d + 1)));
        }
        *slot = v as usize;
    }
    if dim[4..].iter().any(|&d| d != 1) {
        return Err(NiftiError::InvalidHeader("more than four dimensions".into()));
    }
    let datatype = Datatype::from_code(r.i16(70))?;
    let mut spacing = [1.0; 3];
    for (a, s) in spacing.iter_mut().enumerate() {
        let p = r.f32(80 + 4 * a).abs() as f64;
        *s = if p > 0.0 && p.is_finite() { p } else { 1.0 };
    }
    let vox_offset = r.f32(108);
    if !(vox_offset >= HEADER_SIZE as f32) {
        return Err(NiftiError::InvalidHeader(format!("vox_offset = {vox_offset}")));
    }
    let offset = vox_offset as usize;
    let mut slope = r.f32(112) as f64;
    let inter = r.f32(116) as f64;
    if slope == 0.0 || !slope.is_finite() {
        slope = 1.0;
    }
    let inter = if inter.is_finite() { inter } else { 0.0 };

    let qform = r.i16(252);
    let sform = r.i16(254);
    if sform > 0 {
        // off-diagonal entries of the 3x3 part of srow_x/y/z
        let off_diag = [284, 288, 296, 304, 312, 316];
        if off_diag.iter().any(|&at| r.f32(at).abs() > 1e-6) {
            log::warn!("sform contains rotation/shear; ignoring it and using pixdim spacing");
        }
    } else if qform > 0 && (r.f32(256).abs() > 1e-6 || r.f32(260).abs() > 1e-6 || r.f32(264).abs() > 1e-6) {
        log::warn!("qform contains a rotation; ignoring it and using pixdim spacing");
    }

    let descrip_raw = &bytes[148..228];
    let end = descrip_raw.iter().position(|&b| b == 0).unwrap_or(descrip_raw.len());
    let description = String::from_utf8_lossy(&descrip_raw[..end]).into_owned();

    let dims = Dims::new(dim[0], dim[1], dim[2]);
    let components = dim[3];
    let count = dims.len() * components;
    let needed = offset + count * datatype.size();
    if bytes.len() < needed {
        return Err(NiftiError::Truncated { expected: needed, actual: bytes.len() });
    }
    let mut data = Vec::with_capacity(count);
    for n in 0..count {
        let at = offset + n * datatype.size();
        let raw = match datatype {
            Datatype::Int16 => r.i16(at) as f64,
            Datatype::Float32 => r.f32(at) as f64,
            Datatype::Float64 => r.f64(at),
        };
        data.push(raw * slope + inter);
    }
    Ok(NiftiImage { dims, components, spacing, datatype, description, data })
}

/// Serialize `components` stacked volumes into a little-endian `.nii` buffer.
pub fn encode(
    dims: Dims,
    components: usize,
    spacing: [f64; 3],
    datatype: Datatype,
    description: &str,
    data: &[f64],
) -> Result<Vec<u8>> {
    assert_eq!(data.len(), dims.len() * components);
    for &n in dims.0.iter().chain(std::iter::once(&components)) {
        if n == 0 || n > i16::MAX as usize {
            return Err(Error::InvalidVolume(format!("dimension {n} cannot be stored in NIfTI-1")));
        }
    }
    let mut h = vec![0u8; DATA_OFFSET];
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r';
    let ndim: i16 = if components > 1 { 4 } else { 3 };
    let dim = [ndim, dims.0[0] as i16, dims.0[1] as i16, dims.0[2] as i16, components as i16, 1, 1, 1];
    for (d, v) in dim.iter().enumerate() {
        h[40 + 2 * d..42 + 2 * d].copy_from_slice(&v.to_le_bytes());
    }
    if components > 1 {
        h[68..70].copy_from_slice(&INTENT_VECTOR.to_le_bytes());
    }
    h[70..72].copy_from_slice(&datatype.code().to_le_bytes());
    h[72..74].copy_from_slice(&((datatype.size() * 8) as i16).to_le_bytes());
    let pixdim = [1.0f32, spacing[0] as f32, spacing[1] as f32, spacing[2] as f32, 1.0, 1.0, 1.0, 1.0];
    for (d, v) in pixdim.iter().enumerate() {
        h[76 + 4 * d..80 + 4 * d].copy_from_slice(&v.to_le_bytes());
    }
    h[108..112].copy_from_slice(&(DATA_OFFSET as f32).to_le_bytes());
    h[112..116].copy_from_slice(&1.0f32.to_le_bytes());
    // xyzt_units: millimetres
    h[123] = 2;
    let desc = description.as_bytes();
    let n = desc.len().min(79);
    h[148..148 + n].copy_from_slice(&desc[..n]);
    // scanner-anat sform with the voxel spacing on the diagonal
    h[254..256].copy_from_slice(&1i16.to_le_bytes());
    h[280..284].copy_from_slice(&pixdim[1].to_le_bytes());
    h[296 + 4..296 + 8].copy_from_slice(&pixdim[2].to_le_bytes());
    h[312 + 8..312 + 12].copy_from_slice(&pixdim[3].to_le_bytes());
    h[344..348].copy_from_slice(b"n+1\0");

    let mut out = h;
    out.reserve(data.len() * datatype.size());
    match datatype {
        Datatype::Int16 => {
            for &v in data {
                let r = v.round();
                if !(i16::MIN as f64..=i16::MAX as f64).contains(&r) {
                    return Err(Error::InvalidVolume(format!("value {v} does not fit int16")));
                }
                out.extend_from_slice(&(r as i16).to_le_bytes());
            }
        }
        Datatype::Float32 => data.iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Datatype::Float64 => data.iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Read a 3-D scalar volume (int16, float32 or float64 on disk).
pub fn read_nifti(path: impl AsRef<Path>) -> Result<ScalarVolume> {
    let img = decode(&read_bytes(path.as_ref())?)?;
    if img.components != 1 {
        return Err(NiftiError::InvalidHeader(format!("expected a 3-D volume, found {} components", img.components))
            .into());
    }
    ScalarVolume::new(img.dims, img.spacing, img.data)
}

/// Write a scalar volume as float32.
pub fn write_nifti(vol: &ScalarVolume, path: impl AsRef<Path>) -> Result<()> {
    write_nifti_as(vol, path, Datatype::Float32)
}

pub fn write_nifti_as(vol: &ScalarVolume, path: impl AsRef<Path>, datatype: Datatype) -> Result<()> {
    let bytes = encode(vol.dims(), 1, vol.spacing(), datatype, "brainshift", vol.data())?;
    write_atomic(path.as_ref(), &bytes)
}

/// Write a displacement field as a 4-D float64 image with `dim[4] = 3`.
pub fn write_field(field: &VectorField, spacing: [f64; 3], path: impl AsRef<Path>) -> Result<()> {
    let n = field.dims().len();
    let mut data = vec![0.0; 3 * n];
    for (idx, v) in field.data().iter().enumerate() {
        for c in 0..3 {
            data[c * n + idx] = v[c];
        }
    }
    let bytes = encode(field.dims(), 3, spacing, Datatype::Float64, FIELD_DESCRIPTION, &data)?;
    write_atomic(path.as_ref(), &bytes)
}

/// Read a field written by [`write_field`]; returns the field and its voxel spacing.
pub fn read_field(path: impl AsRef<Path>) -> Result<(VectorField, [f64; 3])> {
    let img = decode(&read_bytes(path.as_ref())?)?;
    if img.components != 3 {
        return Err(NiftiError::InvalidHeader(format!("expected 3 components, found {}", img.components)).into());
    }
    let n = img.dims.len();
    let data = (0..n).map(|idx| [img.data[idx], img.data[n + idx], img.data[2 * n + idx]]).collect();
    Ok((VectorField::new(img.dims, data)?, img.spacing))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_volume() -> ScalarVolume {
        ScalarVolume::from_fn(Dims::cube(8), [0.5, 0.75, 1.5], |i, j, k| {
            ((i as f32 * 0.37 - j as f32 * 1.1) * (k as f32 + 0.3)) as f64
        })
        .unwrap()
    }

    #[test]
    fn float32_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.nii");
        let v = sample_volume();
        write_nifti(&v, &path).unwrap();
        let back = read_nifti(&path).unwrap();
        assert_eq!(back.dims(), v.dims());
        assert_eq!(back.spacing(), v.spacing());
        for (a, b) in back.data().iter().zip(v.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_nifti2_magic() {
        let v = sample_volume();
        let mut bytes = encode(v.dims(), 1, v.spacing(), Datatype::Float32, "", v.data()).unwrap();
        bytes[344..348].copy_from_slice(b"n+2\0");
        assert!(matches!(decode(&bytes), Err(NiftiError::UnsupportedFormat(_))));
        bytes[344..348].copy_from_slice(b"abcd");
        assert!(matches!(decode(&bytes), Err(NiftiError::BadMagic(_))));
    }

    #[test]
    fn rejects_unsupported_datatype_and_truncation() {
        let v = sample_volume();
        let mut bytes = encode(v.dims(), 1, v.spacing(), Datatype::Float32, "", v.data()).unwrap();
        let full = bytes.clone();
        bytes[70..72].copy_from_slice(&2i16.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(NiftiError::UnsupportedDatatype(2))));
        assert!(matches!(decode(&full[..full.len() - 1]), Err(NiftiError::Truncated { .. })));
        assert!(matches!(decode(&full[..100]), Err(NiftiError::Truncated { .. })));
    }

    #[test]
    fn int16_with_unit_scaling_is_exact() {
        let vals: Vec<f64> = (0..27).map(|n| (n as f64 - 13.0) * 77.0).collect();
        let v = ScalarVolume::new(Dims::cube(3), [1.0; 3], vals.clone()).unwrap();
        let bytes = encode(v.dims(), 1, v.spacing(), Datatype::Int16, "", v.data()).unwrap();
        let img = decode(&bytes).unwrap();
        assert_eq!(img.datatype, Datatype::Int16);
        assert_eq!(img.data, vals);
    }

    #[test]
    fn int16_applies_slope_and_intercept() {
        let v = ScalarVolume::new(Dims::new(2, 1, 1), [1.0; 3], vec![3.0, -4.0]).unwrap();
        let mut bytes = encode(v.dims(), 1, v.spacing(), Datatype::Int16, "", v.data()).unwrap();
        bytes[112..116].copy_from_slice(&2.0f32.to_le_bytes());
        bytes[116..120].copy_from_slice(&(-1.0f32).to_le_bytes());
        assert_eq!(decode(&bytes).unwrap().data, vec![5.0, -9.0]);
    }

    #[test]
    fn big_endian_header_is_accepted() {
        let v = ScalarVolume::new(Dims::new(2, 1, 1), [1.0; 3], vec![1.5, -2.0]).unwrap();
        let le = encode(v.dims(), 1, v.spacing(), Datatype::Float32, "", v.data()).unwrap();
        let mut be = le.clone();
        be[0..4].copy_from_slice(&348i32.to_be_bytes());
        for d in 0..8 {
            let x = i16::from_le_bytes([le[40 + 2 * d], le[41 + 2 * d]]);
            be[40 + 2 * d..42 + 2 * d].copy_from_slice(&x.to_be_bytes());
        }
        be[70..72].copy_from_slice(&16i16.to_be_bytes());
        for at in [80usize, 84, 88, 108, 112, 116] {
            let x = f32::from_le_bytes(le[at..at + 4].try_into().unwrap());
            be[at..at + 4].copy_from_slice(&x.to_be_bytes());
        }
        be[254..256].copy_from_slice(&0i16.to_be_bytes());
        for n in 0..2 {
            let at = DATA_OFFSET + 4 * n;
            let x = f32::from_le_bytes(le[at..at + 4].try_into().unwrap());
            be[at..at + 4].copy_from_slice(&x.to_be_bytes());
        }
        assert_eq!(decode(&be).unwrap().data, vec![1.5, -2.0]);
    }

    #[test]
    fn field_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.nii");
        let f = VectorField::from_fn(Dims::new(4, 5, 3), |i, j, k| {
            [0.1 * i as f64 + 1e-9, -(j as f64).sqrt(), (k as f64 * 0.7).sin()]
        })
        .unwrap();
        write_field(&f, [0.4, 0.4, 1.5], &path).unwrap();
        let (back, spacing) = read_field(&path).unwrap();
        assert_eq!(back, f);
        assert_eq!(spacing, [0.4f32 as f64, 0.4f32 as f64, 1.5]);
        let img = decode(&std::fs::read(&path).unwrap()).unwrap();
        assert_eq!(img.description, FIELD_DESCRIPTION);
        assert!(read_nifti(&path).is_err());
    }
}
