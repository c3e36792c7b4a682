//! Volumetric containers shared by every other module.
//!
//! All grids are stored row-major with `x` varying fastest and `t` slowest, so
//! the flat offset of `(x, y, z, t)` is `x + nx * (y + ny * (z + nz * t))`.
//! Displacement vectors are expressed in voxel units of the grid they live on.

use std::fmt;

use crate::error::{Error, Result};
use crate::util::ordered_sum;

/// Extent of a grid: three spatial axes plus a time axis (1 for static volumes).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridShape {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub nt: usize,
}

impl GridShape {
    /// A static (single time point) grid.
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self> {
        Self::with_time(nx, ny, nz, 1)
    }

    pub fn with_time(nx: usize, ny: usize, nz: usize, nt: usize) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 || nt == 0 {
            return Err(Error::InvalidShape(format!(
                "all extents must be >= 1, got {nx}x{ny}x{nz}x{nt}"
            )));
        }
        let total = nx
            .checked_mul(ny)
            .and_then(|v| v.checked_mul(nz))
            .and_then(|v| v.checked_mul(nt));
        if total.is_none() {
            return Err(Error::InvalidShape(format!(
                "{nx}x{ny}x{nz}x{nt} overflows the address space"
            )));
        }
        Ok(GridShape { nx, ny, nz, nt })
    }

    /// The same spatial grid with a single time point.
    pub fn spatial(&self) -> GridShape {
        GridShape { nt: 1, ..*self }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    /// Number of spatial voxels, `nx * ny * nz`.
    pub fn voxels(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    /// Number of stored values including the time axis.
    pub fn len(&self) -> usize {
        self.voxels() * self.nt
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn contains(&self, ix: VoxelIndex) -> bool {
        ix.x < self.nx && ix.y < self.ny && ix.z < self.nz
    }

    /// Flat spatial offset of an in-bounds voxel.
    #[inline]
    pub fn offset(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub fn index_of(&self, offset: usize) -> VoxelIndex {
        let x = offset % self.nx;
        let rest = offset / self.nx;
        VoxelIndex { x, y: rest % self.ny, z: rest / self.ny }
    }

    pub(crate) fn check_spatial(&self, other: &GridShape) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(*self, *other));
        }
        Ok(())
    }

    fn checked_offset(&self, ix: VoxelIndex) -> Result<usize> {
        if !self.contains(ix) {
            return Err(Error::OutOfBounds { x: ix.x, y: ix.y, z: ix.z, shape: *self });
        }
        Ok(self.offset(ix.x, ix.y, ix.z))
    }
}

impl fmt::Display for GridShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.nt == 1 {
            write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
        } else {
            write!(f, "{}x{}x{}x{}", self.nx, self.ny, self.nz, self.nt)
        }
    }
}

/// Integer voxel coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelIndex {
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl VoxelIndex {
    pub const fn new(x: usize, y: usize, z: usize) -> Self {
        VoxelIndex { x, y, z }
    }
}

fn check_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(i)),
        None => Ok(()),
    }
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DataLength { expected, actual });
    }
    Ok(())
}

const UNIT_SPACING: [f64; 3] = [1.0, 1.0, 1.0];

/// A static 3D image of real intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarVolume {
    shape: GridShape,
    data: Vec<f64>,
    spacing: [f64; 3],
}

impl ScalarVolume {
    pub fn new(shape: GridShape, data: Vec<f64>) -> Result<Self> {
        let shape = shape.spatial();
        check_len(shape.voxels(), data.len())?;
        check_finite(&data)?;
        Ok(ScalarVolume { shape, data, spacing: UNIT_SPACING })
    }

    pub fn zeros(shape: GridShape) -> Self {
        let shape = shape.spatial();
        ScalarVolume { shape, data: vec![0.0; shape.voxels()], spacing: UNIT_SPACING }
    }

    /// Builds a volume by evaluating `f` at every voxel.
    pub fn from_fn(shape: GridShape, mut f: impl FnMut(VoxelIndex) -> f64) -> Result<Self> {
        let shape = shape.spatial();
        let data = (0..shape.voxels()).map(|i| f(shape.index_of(i))).collect();
        Self::new(shape, data)
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn shape(&self) -> GridShape {
        self.shape
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

    pub fn get(&self, ix: VoxelIndex) -> Result<f64> {
        Ok(self.data[self.shape.checked_offset(ix)?])
    }

    pub fn set(&mut self, ix: VoxelIndex, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite(0));
        }
        let o = self.shape.checked_offset(ix)?;
        self.data[o] = value;
        Ok(())
    }
}

/// A 4D functional image: one time series per spatial voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesVolume {
    shape: GridShape,
    data: Vec<f64>,
    spacing: [f64; 3],
}

impl TimeSeriesVolume {
    pub fn new(shape: GridShape, data: Vec<f64>) -> Result<Self> {
        if shape.nt < 2 {
            return Err(Error::InvalidShape(format!(
                "time series need at least 2 time points, got {}",
                shape.nt
            )));
        }
        check_len(shape.len(), data.len())?;
        check_finite(&data)?;
        Ok(TimeSeriesVolume { shape, data, spacing: UNIT_SPACING })
    }

    /// Stacks equally shaped static frames along the time axis.
    pub fn from_frames(frames: &[ScalarVolume]) -> Result<Self> {
        let first = frames.first().ok_or(Error::EmptyDomain)?;
        let s = first.shape();
        let mut data = Vec::with_capacity(s.voxels() * frames.len());
        for f in frames {
            s.check_spatial(&f.shape())?;
            data.extend_from_slice(f.data());
        }
        let shape = GridShape::with_time(s.nx, s.ny, s.nz, frames.len())?;
        Ok(Self::new(shape, data)?.with_spacing(first.spacing()))
    }

    /// Builds from voxel-major storage (all time points of voxel 0, then voxel 1, ...).
    pub(crate) fn from_voxel_major(shape: GridShape, series: &[f64], spacing: [f64; 3]) -> Self {
        let nv = shape.voxels();
        let nt = shape.nt;
        let mut data = vec![0.0; nv * nt];
        for v in 0..nv {
            for t in 0..nt {
                data[v + nv * t] = series[v * nt + t];
            }
        }
        TimeSeriesVolume { shape, data, spacing }
    }

    /// Copies the data into voxel-major order (time fastest).
    pub(crate) fn to_voxel_major(&self) -> Vec<f64> {
        let nv = self.shape.voxels();
        let nt = self.shape.nt;
        let mut out = vec![0.0; nv * nt];
        for t in 0..nt {
            let frame = &self.data[t * nv..(t + 1) * nv];
            for (v, &x) in frame.iter().enumerate() {
                out[v * nt + t] = x;
            }
        }
        out
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn shape(&self) -> GridShape {
        self.shape
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

    pub fn get(&self, ix: VoxelIndex, t: usize) -> Result<f64> {
        let o = self.shape.checked_offset(ix)?;
        if t >= self.shape.nt {
            return Err(Error::OutOfBounds { x: ix.x, y: ix.y, z: ix.z, shape: self.shape });
        }
        Ok(self.data[o + self.shape.voxels() * t])
    }

    pub fn set(&mut self, ix: VoxelIndex, t: usize, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite(0));
        }
        let o = self.shape.checked_offset(ix)?;
        if t >= self.shape.nt {
            return Err(Error::OutOfBounds { x: ix.x, y: ix.y, z: ix.z, shape: self.shape });
        }
        let nv = self.shape.voxels();
        self.data[o + nv * t] = value;
        Ok(())
    }

    /// The static volume at time point `t`.
    pub fn frame(&self, t: usize) -> ScalarVolume {
        let nv = self.shape.voxels();
        ScalarVolume {
            shape: self.shape.spatial(),
            data: self.data[t * nv..(t + 1) * nv].to_vec(),
            spacing: self.spacing,
        }
    }

    /// The series `I(n)` of one voxel, in temporal order.
    pub fn time_series_at(&self, ix: VoxelIndex) -> Result<Vec<f64>> {
        let o = self.shape.checked_offset(ix)?;
        let nv = self.shape.voxels();
        Ok((0..self.shape.nt).map(|t| self.data[o + nv * t]).collect())
    }
}

/// Per-voxel displacement `(ux, uy, uz)` in voxel units of its own grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    shape: GridShape,
    vectors: Vec<[f64; 3]>,
}

impl DisplacementField {
    pub fn new(shape: GridShape, vectors: Vec<[f64; 3]>) -> Result<Self> {
        let shape = shape.spatial();
        check_len(shape.voxels(), vectors.len())?;
        if let Some(i) = vectors.iter().position(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite(i));
        }
        Ok(DisplacementField { shape, vectors })
    }

    pub fn zeros(shape: GridShape) -> Self {
        let shape = shape.spatial();
        DisplacementField { shape, vectors: vec![[0.0; 3]; shape.voxels()] }
    }

    pub fn constant(shape: GridShape, u: [f64; 3]) -> Result<Self> {
        let shape = shape.spatial();
        Self::new(shape, vec![u; shape.voxels()])
    }

    pub fn from_fn(shape: GridShape, mut f: impl FnMut(VoxelIndex) -> [f64; 3]) -> Result<Self> {
        let shape = shape.spatial();
        let vectors = (0..shape.voxels()).map(|i| f(shape.index_of(i))).collect();
        Self::new(shape, vectors)
    }

    /// Interprets a flat `[ux0, uy0, uz0, ux1, ...]` buffer.
    pub fn from_flat(shape: GridShape, flat: &[f64]) -> Result<Self> {
        check_len(shape.voxels() * 3, flat.len())?;
        let vectors = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Self::new(shape, vectors)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.vectors.iter().flatten().copied().collect()
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn vectors(&self) -> &[[f64; 3]] {
        &self.vectors
    }

    pub fn into_vectors(self) -> Vec<[f64; 3]> {
        self.vectors
    }

    pub fn get(&self, ix: VoxelIndex) -> Result<[f64; 3]> {
        Ok(self.vectors[self.shape.checked_offset(ix)?])
    }

    /// Mean Euclidean vector length, optionally restricted to a mask.
    pub fn mean_magnitude(&self, mask: Option<&BrainMask>) -> Result<f64> {
        let norms: Vec<f64> = self
            .vectors
            .iter()
            .map(|u| (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt())
            .collect();
        masked_mean(&norms, self.shape, mask)
    }

    pub fn max_magnitude(&self) -> f64 {
        self.vectors
            .iter()
            .map(|u| (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn masked_mean(values: &[f64], shape: GridShape, mask: Option<&BrainMask>) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    match mask {
        Some(m) => {
            shape.check_spatial(&m.shape())?;
            for (v, &inside) in values.iter().zip(m.inside()) {
                if inside {
                    sum += v;
                    n += 1;
                }
            }
        }
        None => {
            sum = values.iter().sum();
            n = values.len();
        }
    }
    if n == 0 {
        return Err(Error::EmptyDomain);
    }
    Ok(sum / n as f64)
}

/// Integer anatomical labels; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    shape: GridShape,
    labels: Vec<u32>,
}

impl LabelVolume {
    pub fn new(shape: GridShape, labels: Vec<u32>) -> Result<Self> {
        let shape = shape.spatial();
        check_len(shape.voxels(), labels.len())?;
        Ok(LabelVolume { shape, labels })
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Sorted distinct non-zero labels.
    pub fn distinct(&self) -> Vec<u32> {
        let mut l: Vec<u32> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        l.sort_unstable();
        l.dedup();
        l
    }
}

/// Boolean restriction of the image domain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BrainMask {
    shape: GridShape,
    inside: Vec<bool>,
}

impl BrainMask {
    pub fn new(shape: GridShape, inside: Vec<bool>) -> Result<Self> {
        let shape = shape.spatial();
        check_len(shape.voxels(), inside.len())?;
        Ok(BrainMask { shape, inside })
    }

    pub fn full(shape: GridShape) -> Self {
        let shape = shape.spatial();
        BrainMask { shape, inside: vec![true; shape.voxels()] }
    }

    pub fn from_labels(labels: &LabelVolume) -> Self {
        BrainMask {
            shape: labels.shape(),
            inside: labels.labels().iter().map(|&l| l != 0).collect(),
        }
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn inside(&self) -> &[bool] {
        &self.inside
    }

    pub fn count(&self) -> usize {
        self.inside.iter().filter(|&&b| b).count()
    }

    #[inline]
    pub fn contains(&self, ix: VoxelIndex) -> bool {
        self.shape.contains(ix) && self.inside[self.shape.offset(ix.x, ix.y, ix.z)]
    }
}

/// Descriptive statistics of a (masked) volume. `std` is the population value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VolumeStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
}

pub fn volume_stats(v: &ScalarVolume, mask: Option<&BrainMask>) -> Result<VolumeStats> {
    let values: Vec<f64> = match mask {
        Some(m) => {
            v.shape().check_spatial(&m.shape())?;
            v.data().iter().zip(m.inside()).filter(|(_, &b)| b).map(|(&x, _)| x).collect()
        }
        None => v.data().to_vec(),
    };
    if values.is_empty() {
        return Err(Error::EmptyDomain);
    }
    let n = values.len() as f64;
    let mean = ordered_sum(&values) / n;
    let sq: Vec<f64> = values.iter().map(|x| (x - mean) * (x - mean)).collect();
    let std = (ordered_sum(&sq) / n).sqrt();
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    Ok(VolumeStats { min, max, mean, std })
}

/// Rescales intensities to `[0, 1]`. A constant volume maps to all zeros.
pub fn normalize_intensity(v: &ScalarVolume) -> ScalarVolume {
    let (lo, hi) = v
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let range = hi - lo;
    let data = if range > 0.0 {
        v.data().iter().map(|&x| ((x - lo) / range).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; v.data().len()]
    };
    ScalarVolume { shape: v.shape(), data, spacing: v.spacing() }
}

/// `I(n)`: the time series at voxel `n`.
pub fn time_series_at(v: &TimeSeriesVolume, n: VoxelIndex) -> Result<Vec<f64>> {
    v.time_series_at(n)
}
