//! Single-file NIfTI-1 (`.nii`) subset.
//!
//! Reading accepts either byte order (detected from `sizeof_hdr`), the integer
//! and float datatypes listed in [`Datatype`], and applies `scl_slope` /
//! `scl_inter` when the slope is non-zero. Writing always produces
//! little-endian float32 with the payload at byte 352.

use std::path::Path;

use thiserror::Error;

use crate::error::{Error, Result};
use crate::volume::{DisplacementField, GridShape, LabelVolume, ScalarVolume, TimeSeriesVolume};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";

pub const INTENT_NONE: i16 = 0;
pub const INTENT_LABEL: i16 = 1002;
pub const INTENT_VECTOR: i16 = 1007;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NiftiError {
    #[error("bad magic {0:?} (only single-file n+1 is supported)")]
    BadMagic([u8; 4]),
    #[error("unsupported datatype {0}")]
    UnsupportedDatatype(i16),
    #[error("truncated file: need {needed} bytes, have {actual}")]
    Truncated { needed: usize, actual: usize },
    #[error("invalid header: {0}")]
    BadHeader(String),
    #[error("unsupported dimensions {0:?}")]
    UnsupportedDims(Vec<i16>),
    #[error("expected {expected}, file holds {found}")]
    WrongKind { expected: &'static str, found: &'static str },
}

impl NiftiError {
    /// Stable numeric code per failure kind (used as the CLI exit status).
    pub fn code(&self) -> i32 {
        match self {
            NiftiError::BadMagic(_) => 10,
            NiftiError::UnsupportedDatatype(_) => 11,
            NiftiError::Truncated { .. } => 12,
            NiftiError::BadHeader(_) => 13,
            NiftiError::UnsupportedDims(_) => 14,
            NiftiError::WrongKind { .. } => 15,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Datatype {
    U8,
    I16,
    I32,
    F32,
    F64,
}

impl Datatype {
    pub fn from_code(code: i16) -> Option<Datatype> {
        Some(match code {
            2 => Datatype::U8,
            4 => Datatype::I16,
            8 => Datatype::I32,
            16 => Datatype::F32,
            64 => Datatype::F64,
            _ => return None,
        })
    }

    pub fn code(self) -> i16 {
        match self {
            Datatype::U8 => 2,
            Datatype::I16 => 4,
            Datatype::I32 => 8,
            Datatype::F32 => 16,
            Datatype::F64 => 64,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Datatype::U8 => 1,
            Datatype::I16 => 2,
            Datatype::I32 | Datatype::F32 => 4,
            Datatype::F64 => 8,
        }
    }
}

/// The header fields this crate reads and writes.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiHeaderSubset {
    /// Extents of axes 1..=5 (missing axes are 1).
    pub dims: [usize; 5],
    pub ndim: usize,
    pub datatype: Datatype,
    pub spacing: [f64; 3],
    pub scl_slope: f64,
    pub scl_inter: f64,
    pub vox_offset: usize,
    pub intent_code: i16,
    pub little_endian: bool,
}

struct Bytes<'a> {
    buf: &'a [u8],
    le: bool,
}

impl Bytes<'_> {
    fn i16(&self, at: usize) -> i16 {
        let b = [self.buf[at], self.buf[at + 1]];
        if self.le { i16::from_le_bytes(b) } else { i16::from_be_bytes(b) }
    }

    fn i32(&self, at: usize) -> i32 {
        let b: [u8; 4] = self.buf[at..at + 4].try_into().unwrap();
        if self.le { i32::from_le_bytes(b) } else { i32::from_be_bytes(b) }
    }

    fn f32(&self, at: usize) -> f32 {
        let b: [u8; 4] = self.buf[at..at + 4].try_into().unwrap();
        if self.le { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }
    }

    fn f64(&self, at: usize) -> f64 {
        let b: [u8; 8] = self.buf[at..at + 8].try_into().unwrap();
        if self.le { f64::from_le_bytes(b) } else { f64::from_be_bytes(b) }
    }
}

pub fn parse_header(buf: &[u8]) -> std::result::Result<NiftiHeaderSubset, NiftiError> {
    if buf.len() < HEADER_SIZE {
        return Err(NiftiError::Truncated { needed: HEADER_SIZE, actual: buf.len() });
    }
    let le = match (
        i32::from_le_bytes(buf[0..4].try_into().unwrap()),
        i32::from_be_bytes(buf[0..4].try_into().unwrap()),
    ) {
        (348, _) => true,
        (_, 348) => false,
        (v, _) => return Err(NiftiError::BadHeader(format!("sizeof_hdr is {v}, expected 348"))),
    };
    let magic: [u8; 4] = buf[344..348].try_into().unwrap();
    if &magic != MAGIC {
        return Err(NiftiError::BadMagic(magic));
    }
    let b = Bytes { buf, le };
    let raw_dims: Vec<i16> = (0..8).map(|i| b.i16(40 + 2 * i)).collect();
    let ndim = raw_dims[0];
    if !(1..=7).contains(&ndim) {
        return Err(NiftiError::UnsupportedDims(raw_dims));
    }
    let mut dims = [1usize; 5];
    for i in 0..ndim as usize {
        let n = raw_dims[i + 1];
        if n < 1 || (i >= 5 && n != 1) {
            return Err(NiftiError::UnsupportedDims(raw_dims));
        }
        if i < 5 {
            dims[i] = n as usize;
        }
    }
    let code = b.i16(70);
    let datatype = Datatype::from_code(code).ok_or(NiftiError::UnsupportedDatatype(code))?;
    let spacing = [1, 2, 3].map(|i| {
        let p = b.f32(76 + 4 * i) as f64;
        if p.is_finite() && p > 0.0 { p } else { 1.0 }
    });
    let vox_offset = b.f32(108);
    if !(vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f32) {
        return Err(NiftiError::BadHeader(format!("vox_offset {vox_offset}")));
    }
    Ok(NiftiHeaderSubset {
        dims,
        ndim: (ndim as usize).min(5),
        datatype,
        spacing,
        scl_slope: b.f32(112) as f64,
        scl_inter: b.f32(116) as f64,
        vox_offset: vox_offset as usize,
        intent_code: b.i16(68),
        little_endian: le,
    })
}

/// Header plus payload decoded to reals (scaling applied), in file order.
pub fn decode(buf: &[u8]) -> std::result::Result<(NiftiHeaderSubset, Vec<f64>), NiftiError> {
    let h = parse_header(buf)?;
    let count: usize = h.dims.iter().product();
    let needed = h.vox_offset + count * h.datatype.size();
    if buf.len() < needed {
        return Err(NiftiError::Truncated { needed, actual: buf.len() });
    }
    let b = Bytes { buf, le: h.little_endian };
    let size = h.datatype.size();
    let (slope, inter) = if h.scl_slope != 0.0 && h.scl_slope.is_finite() {
        (h.scl_slope, if h.scl_inter.is_finite() { h.scl_inter } else { 0.0 })
    } else {
        (1.0, 0.0)
    };
    let values = (0..count)
        .map(|i| {
            let at = h.vox_offset + i * size;
            let raw = match h.datatype {
                Datatype::U8 => buf[at] as f64,
                Datatype::I16 => b.i16(at) as f64,
                Datatype::I32 => b.i32(at) as f64,
                Datatype::F32 => b.f32(at) as f64,
                Datatype::F64 => b.f64(at),
            };
            if (slope, inter) == (1.0, 0.0) {
                raw
            } else {
                slope * raw + inter
            }
        })
        .collect();
    Ok((h, values))
}

/// Any volume kind the engine handles.
#[derive(Clone, Debug, PartialEq)]
pub enum NiftiVolume {
    Scalar(ScalarVolume),
    TimeSeries(TimeSeriesVolume),
    Labels(LabelVolume),
    Field(DisplacementField),
}

impl NiftiVolume {
    pub fn kind(&self) -> &'static str {
        match self {
            NiftiVolume::Scalar(_) => "scalar volume",
            NiftiVolume::TimeSeries(_) => "time series",
            NiftiVolume::Labels(_) => "label volume",
            NiftiVolume::Field(_) => "displacement field",
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Decodes a file into the matching volume kind: 5D with three components is a
/// displacement field, a label intent is a label volume, more than one time
/// point is a time series, anything else a scalar volume.
pub fn read_nifti(path: impl AsRef<Path>) -> Result<NiftiVolume> {
    let path = path.as_ref();
    from_bytes(&read_bytes(path)?)
}

pub fn from_bytes(buf: &[u8]) -> Result<NiftiVolume> {
    let (h, values) = decode(buf)?;
    let [nx, ny, nz, nt, nc] = h.dims;
    if h.ndim == 5 && nc == 3 && nt == 1 {
        let shape = GridShape::new(nx, ny, nz)?;
        let nv = shape.voxels();
        let vectors = (0..nv).map(|i| [values[i], values[i + nv], values[i + 2 * nv]]).collect();
        return Ok(NiftiVolume::Field(DisplacementField::new(shape, vectors)?));
    }
    if nc != 1 {
        return Err(NiftiError::UnsupportedDims(vec![h.ndim as i16, nx as i16, ny as i16, nz as i16, nt as i16, nc as i16]).into());
    }
    if nt > 1 {
        let shape = GridShape::with_time(nx, ny, nz, nt)?;
        return Ok(NiftiVolume::TimeSeries(TimeSeriesVolume::new(shape, values)?.with_spacing(h.spacing)));
    }
    let shape = GridShape::new(nx, ny, nz)?;
    if h.intent_code == INTENT_LABEL {
        return Ok(NiftiVolume::Labels(LabelVolume::new(shape, to_labels(&values)?)?));
    }
    Ok(NiftiVolume::Scalar(ScalarVolume::new(shape, values)?.with_spacing(h.spacing)))
}

fn to_labels(values: &[f64]) -> Result<Vec<u32>> {
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let r = v.round();
            if !(r >= 0.0 && r <= u32::MAX as f64) {
                return Err(Error::InvalidConfig(format!("value {v} at element {i} is not a valid label")));
            }
            Ok(r as u32)
        })
        .collect()
}

pub fn read_scalar(path: impl AsRef<Path>) -> Result<ScalarVolume> {
    match read_nifti(path)? {
        NiftiVolume::Scalar(v) => Ok(v),
        NiftiVolume::Labels(l) => {
            let data = l.labels().iter().map(|&x| x as f64).collect();
            ScalarVolume::new(l.shape(), data)
        }
        other => Err(NiftiError::WrongKind { expected: "scalar volume", found: other.kind() }.into()),
    }
}

pub fn read_time_series(path: impl AsRef<Path>) -> Result<TimeSeriesVolume> {
    match read_nifti(path)? {
        NiftiVolume::TimeSeries(v) => Ok(v),
        other => Err(NiftiError::WrongKind { expected: "time series", found: other.kind() }.into()),
    }
}

/// Reads any 3D volume as labels (values rounded to the nearest integer).
pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    match read_nifti(path)? {
        NiftiVolume::Labels(l) => Ok(l),
        NiftiVolume::Scalar(v) => LabelVolume::new(v.shape(), to_labels(v.data())?),
        other => Err(NiftiError::WrongKind { expected: "label volume", found: other.kind() }.into()),
    }
}

pub fn read_field(path: impl AsRef<Path>) -> Result<DisplacementField> {
    match read_nifti(path)? {
        NiftiVolume::Field(f) => Ok(f),
        other => Err(NiftiError::WrongKind { expected: "displacement field", found: other.kind() }.into()),
    }
}

/// Serialises a raw float32 image. `dims` lists the extents of axes 1..=ndim.
pub fn encode_raw(dims: &[usize], spacing: [f64; 3], intent_code: i16, values: &[f64]) -> Vec<u8> {
    assert!((1..=5).contains(&dims.len()));
    assert_eq!(dims.iter().product::<usize>(), values.len());
    let mut h = vec![0u8; VOX_OFFSET];
    let put_i16 = |h: &mut [u8], at: usize, v: i16| h[at..at + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], at: usize, v: f32| h[at..at + 4].copy_from_slice(&v.to_le_bytes());

    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r';
    put_i16(&mut h, 40, dims.len() as i16);
    for d in 0..7 {
        put_i16(&mut h, 42 + 2 * d, dims.get(d).map_or(1, |&n| n as i16));
    }
    put_i16(&mut h, 68, intent_code);
    put_i16(&mut h, 70, Datatype::F32.code());
    put_i16(&mut h, 72, 32);
    put_f32(&mut h, 76, 1.0);
    for d in 0..7 {
        let p = if d < 3 { spacing[d] as f32 } else { 1.0 };
        put_f32(&mut h, 80 + 4 * d, p);
    }
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    // mm + seconds
    h[123] = 2 | 8;
    let desc = b"fcreg";
    h[148..148 + desc.len()].copy_from_slice(desc);
    put_i16(&mut h, 254, 1);
    for (row, at) in [(0usize, 280usize), (1, 296), (2, 312)] {
        put_f32(&mut h, at + 4 * row, spacing[row] as f32);
    }
    h[344..348].copy_from_slice(MAGIC);

    h.reserve(values.len() * 4);
    for &v in values {
        h.extend_from_slice(&(v as f32).to_le_bytes());
    }
    h
}

pub fn to_bytes(volume: &NiftiVolume) -> Vec<u8> {
    match volume {
        NiftiVolume::Scalar(v) => {
            let s = v.shape();
            encode_raw(&[s.nx, s.ny, s.nz], v.spacing(), INTENT_NONE, v.data())
        }
        NiftiVolume::TimeSeries(v) => {
            let s = v.shape();
            encode_raw(&[s.nx, s.ny, s.nz, s.nt], v.spacing(), INTENT_NONE, v.data())
        }
        NiftiVolume::Labels(l) => {
            let s = l.shape();
            let data: Vec<f64> = l.labels().iter().map(|&x| x as f64).collect();
            encode_raw(&[s.nx, s.ny, s.nz], [1.0; 3], INTENT_LABEL, &data)
        }
        NiftiVolume::Field(f) => {
            let s = f.shape();
            let nv = s.voxels();
            let mut data = vec![0.0; nv * 3];
            for (i, u) in f.vectors().iter().enumerate() {
                for c in 0..3 {
                    data[i + c * nv] = u[c];
                }
            }
            encode_raw(&[s.nx, s.ny, s.nz, 1, 3], [1.0; 3], INTENT_VECTOR, &data)
        }
    }
}

pub fn write_nifti(volume: &NiftiVolume, path: impl AsRef<Path>) -> Result<()> {
    super::write_atomic(path.as_ref(), &to_bytes(volume))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header_with(datatype: i16, slope: f32, inter: f32, values: &[u8]) -> Vec<u8> {
        let mut b = encode_raw(&[1, 1, 1], [1.0; 3], INTENT_NONE, &[0.0]);
        b.truncate(VOX_OFFSET);
        b[70..72].copy_from_slice(&datatype.to_le_bytes());
        b[112..116].copy_from_slice(&slope.to_le_bytes());
        b[116..120].copy_from_slice(&inter.to_le_bytes());
        b.extend_from_slice(values);
        b
    }

    #[test]
    fn scaled_int16() {
        let b = header_with(4, 2.0, 1.0, &3i16.to_le_bytes());
        match from_bytes(&b).unwrap() {
            NiftiVolume::Scalar(v) => assert_eq!(v.data(), &[7.0]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_slope_means_unscaled() {
        let b = header_with(2, 0.0, 5.0, &[9]);
        match from_bytes(&b).unwrap() {
            NiftiVolume::Scalar(v) => assert_eq!(v.data(), &[9.0]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unsupported_datatype() {
        let b = header_with(128, 1.0, 0.0, &[0, 0, 0]);
        let err = from_bytes(&b).unwrap_err();
        assert!(matches!(err, Error::Nifti(NiftiError::UnsupportedDatatype(128))));
    }

    #[test]
    fn bad_magic_and_truncation_have_distinct_codes() {
        let mut b = header_with(16, 1.0, 0.0, &1f32.to_le_bytes());
        let short = &b[..b.len() - 2];
        let Error::Nifti(t) = from_bytes(short).unwrap_err() else { panic!() };
        assert!(matches!(t, NiftiError::Truncated { .. }));
        b[344] = b'x';
        let Error::Nifti(m) = from_bytes(&b).unwrap_err() else { panic!() };
        assert!(matches!(m, NiftiError::BadMagic(_)));
        assert_ne!(t.code(), m.code());
    }

    #[test]
    fn big_endian_files_are_read() {
        let mut b = vec![0u8; VOX_OFFSET];
        b[0..4].copy_from_slice(&348i32.to_be_bytes());
        for (i, v) in [3i16, 2, 1, 1, 1, 1, 1, 1].iter().enumerate() {
            b[40 + 2 * i..42 + 2 * i].copy_from_slice(&v.to_be_bytes());
        }
        b[70..72].copy_from_slice(&64i16.to_be_bytes());
        b[108..112].copy_from_slice(&352f32.to_be_bytes());
        b[344..348].copy_from_slice(MAGIC);
        b.extend_from_slice(&1.5f64.to_be_bytes());
        b.extend_from_slice(&(-2.25f64).to_be_bytes());
        match from_bytes(&b).unwrap() {
            NiftiVolume::Scalar(v) => assert_eq!(v.data(), &[1.5, -2.25]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn payload_size_and_offset() {
        let s = GridShape::new(48, 64, 64).unwrap();
        let bytes = to_bytes(&NiftiVolume::Scalar(ScalarVolume::zeros(s)));
        assert_eq!(bytes.len(), 352 + 48 * 64 * 64 * 4);
        let h = parse_header(&bytes).unwrap();
        assert_eq!(h.vox_offset, 352);
        assert_eq!(h.datatype, Datatype::F32);
        assert!(h.little_endian);
    }

    #[test]
    fn field_is_five_dimensional_vector() {
        let s = GridShape::new(2, 3, 1).unwrap();
        let f = DisplacementField::from_fn(s, |ix| [ix.x as f64, ix.y as f64, -1.0]).unwrap();
        let bytes = to_bytes(&NiftiVolume::Field(f.clone()));
        let h = parse_header(&bytes).unwrap();
        assert_eq!((h.ndim, h.dims, h.intent_code), (5, [2, 3, 1, 1, 3], INTENT_VECTOR));
        assert_eq!(from_bytes(&bytes).unwrap(), NiftiVolume::Field(f));
    }
}
