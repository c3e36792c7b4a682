//! Local functional-connectivity (FC) patterns.
//!
//! The brain is tiled into non-overlapping cubes of side `w`. Inside each cube
//! every voxel's time series is correlated with the series of the cube centre,
//! the correlations are binned into a histogram over `[-1, 1]`, and two images
//! are compared cube by cube with the Bhattacharyya distance between their
//! histograms. Binning throws away where in the cube a correlation came from,
//! so the pattern only describes how connected the neighbourhood is.
//!
//! Two binning modes exist. Hard binning rounds `b = (r + 1)(bins - 1)/2` to
//! the nearest bin. Soft binning splits each sample between the two nearest
//! bins with a triangular kernel, which makes the histogram (and therefore the
//! loss) piecewise differentiable in the correlations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{BrainMask, GridShape, TimeSeriesVolume, VoxelIndex};

/// Population-variance floor below which a series counts as flat.
pub const DEFAULT_VAR_EPS: f64 = 1e-10;

/// Floor applied under the square roots of the distance's derivative.
pub const SQRT_EPS: f64 = 1e-12;

/// Tolerance for correlations that rounding pushed just outside `[-1, 1]`.
const CORR_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FcConfig {
    /// Cube side length in voxels (odd, at least 3).
    pub w: usize,
    pub bins: usize,
    /// Triangular-kernel binning (differentiable) instead of nearest-bin.
    pub soft: bool,
    pub var_eps: f64,
}

impl Default for FcConfig {
    fn default() -> Self {
        FcConfig { w: 21, bins: 21, soft: true, var_eps: DEFAULT_VAR_EPS }
    }
}

impl FcConfig {
    pub fn with_w(w: usize) -> Self {
        FcConfig { w, ..Self::default() }
    }

    pub fn hard(mut self) -> Self {
        self.soft = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.w < 3 || self.w % 2 == 0 {
            return Err(Error::InvalidConfig(format!("w must be odd and >= 3, got {}", self.w)));
        }
        if self.bins < 2 {
            return Err(Error::InvalidConfig(format!("bins must be >= 2, got {}", self.bins)));
        }
        if !(self.var_eps >= 0.0 && self.var_eps.is_finite()) {
            return Err(Error::InvalidConfig(format!("var_eps must be finite and >= 0, got {}", self.var_eps)));
        }
        Ok(())
    }

    /// Maps a correlation onto the continuous bin axis `[0, bins - 1]`.
    #[inline]
    fn bin_coord(&self, r: f64) -> f64 {
        (r + 1.0) * self.bin_scale()
    }

    #[inline]
    fn bin_scale(&self) -> f64 {
        (self.bins - 1) as f64 / 2.0
    }
}

/// One tile of the cube grid. `lo..hi` is the (possibly truncated) extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cube {
    pub center: VoxelIndex,
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl Cube {
    pub fn voxel_count(&self) -> usize {
        (0..3).map(|d| self.hi[d] - self.lo[d]).product()
    }

    /// Flat offsets of the cube's voxels, z-major then y then x.
    pub fn offsets(&self, shape: &GridShape) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.voxel_count());
        for z in self.lo[2]..self.hi[2] {
            for y in self.lo[1]..self.hi[1] {
                for x in self.lo[0]..self.hi[0] {
                    out.push(shape.offset(x, y, z));
                }
            }
        }
        out
    }
}

/// Non-overlapping cubes anchored at the origin. Trailing partial cubes at the
/// far faces are kept, truncated, and centred on the middle of what remains.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CubeGrid {
    pub w: usize,
    pub cubes: Vec<Cube>,
}

impl CubeGrid {
    pub fn tile(shape: &GridShape, w: usize) -> CubeGrid {
        let axis = |n: usize| -> Vec<(usize, usize)> {
            (0..n).step_by(w).map(|lo| (lo, (lo + w).min(n))).collect()
        };
        let (ax, ay, az) = (axis(shape.nx), axis(shape.ny), axis(shape.nz));
        let mut cubes = Vec::with_capacity(ax.len() * ay.len() * az.len());
        for &(z0, z1) in &az {
            for &(y0, y1) in &ay {
                for &(x0, x1) in &ax {
                    let mid = |lo: usize, hi: usize| lo + (hi - lo - 1) / 2;
                    cubes.push(Cube {
                        center: VoxelIndex::new(mid(x0, x1), mid(y0, y1), mid(z0, z1)),
                        lo: [x0, y0, z0],
                        hi: [x1, y1, z1],
                    });
                }
            }
        }
        CubeGrid { w, cubes }
    }

    pub fn centers(&self) -> Vec<VoxelIndex> {
        self.cubes.iter().map(|c| c.center).collect()
    }
}

/// Correlation-distribution histogram of one cube.
#[derive(Clone, Debug, PartialEq)]
pub struct FcHistogram {
    pub counts: Vec<f64>,
    pub center: Option<VoxelIndex>,
}

impl FcHistogram {
    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    /// `H̄`, the mean bin height.
    pub fn mean(&self) -> f64 {
        self.total() / self.counts.len() as f64
    }
}

/// A series centred on its mean and scaled to unit Euclidean norm.
struct UnitSeries {
    unit: Vec<f64>,
    norm: f64,
    flat: bool,
}

impl UnitSeries {
    fn new(series: &[f64], var_eps: f64) -> UnitSeries {
        let n = series.len() as f64;
        let mean = series.iter().sum::<f64>() / n;
        let mut unit: Vec<f64> = series.iter().map(|x| x - mean).collect();
        let ss: f64 = unit.iter().map(|x| x * x).sum();
        let flat = ss / n < var_eps || ss == 0.0;
        let norm = ss.sqrt();
        if !flat {
            unit.iter_mut().for_each(|x| *x /= norm);
        }
        UnitSeries { unit, norm, flat }
    }

    fn dot(&self, other: &UnitSeries) -> f64 {
        if self.flat || other.flat {
            return 0.0;
        }
        self.unit.iter().zip(&other.unit).map(|(a, b)| a * b).sum()
    }
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::SeriesLength(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(Error::SeriesTooShort(a.len()));
    }
    Ok(())
}

/// Pearson correlation with the default flatness floor.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    pearson_with_floor(a, b, DEFAULT_VAR_EPS)
}

/// Pearson correlation; 0 when either series' population variance is below `var_eps`.
pub fn pearson_with_floor(a: &[f64], b: &[f64], var_eps: f64) -> Result<f64> {
    check_pair(a, b)?;
    let ua = UnitSeries::new(a, var_eps);
    let ub = UnitSeries::new(b, var_eps);
    Ok(ua.dot(&ub).clamp(-1.0, 1.0))
}

/// Correlations of every voxel in a `w`-cube around `center` with the centre series.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalFcMap {
    pub center: VoxelIndex,
    pub voxels: Vec<VoxelIndex>,
    pub correlations: Vec<f64>,
}

/// The centred cube is truncated at the grid faces.
pub fn local_fc_map(v: &TimeSeriesVolume, center: VoxelIndex, cfg: &FcConfig) -> Result<LocalFcMap> {
    cfg.validate()?;
    let shape = v.shape();
    if !shape.contains(center) {
        return Err(Error::OutOfBounds { x: center.x, y: center.y, z: center.z, shape });
    }
    let half = cfg.w / 2;
    let range = |c: usize, n: usize| c.saturating_sub(half)..(c + half + 1).min(n);
    let cs = UnitSeries::new(&v.time_series_at(center)?, cfg.var_eps);
    let mut voxels = Vec::new();
    let mut correlations = Vec::new();
    for z in range(center.z, shape.nz) {
        for y in range(center.y, shape.ny) {
            for x in range(center.x, shape.nx) {
                let ix = VoxelIndex::new(x, y, z);
                let r = if ix == center {
                    if cs.flat { 0.0 } else { 1.0 }
                } else {
                    cs.dot(&UnitSeries::new(&v.time_series_at(ix)?, cfg.var_eps)).clamp(-1.0, 1.0)
                };
                voxels.push(ix);
                correlations.push(r);
            }
        }
    }
    Ok(LocalFcMap { center, voxels, correlations })
}

fn checked_corr(r: f64) -> Result<f64> {
    if !(r >= -1.0 - CORR_SLACK && r <= 1.0 + CORR_SLACK) {
        return Err(Error::InvalidCorrelation(r));
    }
    Ok(r.clamp(-1.0, 1.0))
}

/// Soft-binning support of one sample: the lower bin and the weight given to
/// the bin above it. Samples at the top edge use the last interval so the
/// derivative stays defined.
#[inline]
fn soft_support(b: f64, bins: usize) -> (usize, f64) {
    let k = (b.floor() as usize).min(bins - 2);
    (k, b - k as f64)
}

pub fn fc_histogram(correlations: &[f64], cfg: &FcConfig) -> Result<FcHistogram> {
    if cfg.bins < 2 {
        return Err(Error::InvalidConfig(format!("bins must be >= 2, got {}", cfg.bins)));
    }
    let mut counts = vec![0.0; cfg.bins];
    for &r in correlations {
        let b = cfg.bin_coord(checked_corr(r)?);
        if cfg.soft {
            let (k, frac) = soft_support(b, cfg.bins);
            counts[k] += 1.0 - frac;
            counts[k + 1] += frac;
        } else {
            let k = (b.round() as usize).min(cfg.bins - 1);
            counts[k] += 1.0;
        }
    }
    Ok(FcHistogram { counts, center: None })
}

/// `sqrt(1 - ρ)` with `ρ` the Bhattacharyya coefficient of two histograms.
pub fn bc_distance(hf: &FcHistogram, hr: &FcHistogram) -> Result<f64> {
    Ok(bc_distance_parts(&hf.counts, &hr.counts, false)?.0)
}

/// Distance and, when requested, its derivative with respect to every bin of `hr`.
pub(crate) fn bc_distance_parts(hf: &[f64], hr: &[f64], want_grad: bool) -> Result<(f64, Vec<f64>)> {
    if hf.len() != hr.len() {
        return Err(Error::BinMismatch(hf.len(), hr.len()));
    }
    let bins = hf.len() as f64;
    let (tf, tr): (f64, f64) = (hf.iter().sum(), hr.iter().sum());
    if !(tf > 0.0 && tr > 0.0) {
        return Err(Error::EmptyHistogram);
    }
    let (mf, mr) = (tf / bins, tr / bins);
    let norm = bins * (mf * mr).sqrt();
    let overlap: f64 = hf.iter().zip(hr).map(|(a, b)| (a * b).sqrt()).sum();
    let rho = overlap / norm;
    let gap = (1.0 - rho).max(0.0);
    let dist = gap.sqrt();
    if !want_grad {
        return Ok((dist, Vec::new()));
    }
    let d_rho = -0.5 / gap.max(SQRT_EPS).sqrt();
    let grad = hf
        .iter()
        .zip(hr)
        .map(|(&f, &r)| {
            let d_overlap = 0.5 * f / (f * r).max(SQRT_EPS).sqrt();
            d_rho * (d_overlap / norm - rho / (2.0 * mr * bins))
        })
        .collect();
    Ok((dist, grad))
}

/// Mean Bhattacharyya distance between the local-FC histograms of two images.
pub fn fc_loss(
    f: &TimeSeriesVolume,
    r: &TimeSeriesVolume,
    cfg: &FcConfig,
    mask: Option<&BrainMask>,
) -> Result<f64> {
    if f.shape() != r.shape() {
        return Err(Error::shape(f.shape(), r.shape()));
    }
    let term = LocalFcTerm::new(f, cfg, mask)?;
    term.value(&r.to_voxel_major())
}

/// Hard-or-soft histograms of every cube in the tiling, in grid order.
pub fn fc_histograms(v: &TimeSeriesVolume, cfg: &FcConfig) -> Result<Vec<FcHistogram>> {
    cfg.validate()?;
    let shape = v.shape();
    let grid = CubeGrid::tile(&shape, cfg.w);
    let series = v.to_voxel_major();
    grid.cubes
        .par_iter()
        .map(|cube| {
            let corr = cube_correlations(&series, &shape, cube, cfg);
            let mut h = fc_histogram(&corr.values, cfg)?;
            h.center = Some(cube.center);
            Ok(h)
        })
        .collect()
}

/// Correlations of one tiled cube, plus what the gradient needs.
struct CubeCorrelations {
    offsets: Vec<usize>,
    center_pos: usize,
    units: Vec<UnitSeries>,
    values: Vec<f64>,
}

fn cube_correlations(series: &[f64], shape: &GridShape, cube: &Cube, cfg: &FcConfig) -> CubeCorrelations {
    let nt = shape.nt;
    let offsets = cube.offsets(shape);
    let center_off = shape.offset(cube.center.x, cube.center.y, cube.center.z);
    let center_pos = offsets.iter().position(|&o| o == center_off).expect("centre lies inside its cube");
    let units: Vec<UnitSeries> =
        offsets.iter().map(|&o| UnitSeries::new(&series[o * nt..(o + 1) * nt], cfg.var_eps)).collect();
    let c = &units[center_pos];
    let values = units
        .iter()
        .enumerate()
        .map(|(i, u)| {
            if i == center_pos {
                if c.flat { 0.0 } else { 1.0 }
            } else {
                c.dot(u).clamp(-1.0, 1.0)
            }
        })
        .collect();
    CubeCorrelations { offsets, center_pos, units, values }
}

/// The functional similarity term against a fixed image, with its gradient
/// with respect to the moving image's (warped) voxel series.
pub(crate) struct LocalFcTerm {
    cfg: FcConfig,
    shape: GridShape,
    cubes: Vec<Cube>,
    fixed: Vec<Vec<f64>>,
}

impl LocalFcTerm {
    pub(crate) fn new(fixed: &TimeSeriesVolume, cfg: &FcConfig, mask: Option<&BrainMask>) -> Result<Self> {
        cfg.validate()?;
        let shape = fixed.shape();
        if let Some(m) = mask {
            shape.check_spatial(&m.shape())?;
        }
        let grid = CubeGrid::tile(&shape, cfg.w);
        let cubes: Vec<Cube> = grid
            .cubes
            .into_iter()
            .filter(|c| mask.is_none_or(|m| m.contains(c.center)))
            .collect();
        if cubes.is_empty() {
            return Err(Error::NoEligibleCubes);
        }
        let series = fixed.to_voxel_major();
        let fixed = cubes
            .par_iter()
            .map(|cube| {
                let corr = cube_correlations(&series, &shape, cube, cfg);
                Ok(fc_histogram(&corr.values, cfg)?.counts)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LocalFcTerm { cfg: *cfg, shape, cubes, fixed })
    }

    pub(crate) fn shape(&self) -> GridShape {
        self.shape
    }

    pub(crate) fn cube_count(&self) -> usize {
        self.cubes.len()
    }

    fn cube_distance(&self, idx: usize, series: &[f64]) -> Result<f64> {
        let corr = cube_correlations(series, &self.shape, &self.cubes[idx], &self.cfg);
        let h = fc_histogram(&corr.values, &self.cfg)?;
        Ok(bc_distance_parts(&self.fixed[idx], &h.counts, false)?.0)
    }

    pub(crate) fn value(&self, series: &[f64]) -> Result<f64> {
        let d = (0..self.cubes.len())
            .into_par_iter()
            .map(|i| self.cube_distance(i, series))
            .collect::<Result<Vec<f64>>>()?;
        Ok(d.iter().sum::<f64>() / d.len() as f64)
    }

    /// Loss value and `∂loss/∂series` (voxel-major, same layout as `series`).
    pub(crate) fn value_and_grad(&self, series: &[f64]) -> Result<(f64, Vec<f64>)> {
        debug_assert!(self.cfg.soft);
        let nt = self.shape.nt;
        let per_cube = (0..self.cubes.len())
            .into_par_iter()
            .map(|i| self.cube_grad(i, series))
            .collect::<Result<Vec<_>>>()?;
        let scale = 1.0 / self.cubes.len() as f64;
        let mut grad = vec![0.0; series.len()];
        let mut total = 0.0;
        for (d, parts) in per_cube {
            total += d;
            for (o, g) in parts {
                for (dst, src) in grad[o * nt..(o + 1) * nt].iter_mut().zip(&g) {
                    *dst += scale * src;
                }
            }
        }
        Ok((total * scale, grad))
    }

    #[allow(clippy::type_complexity)]
    fn cube_grad(&self, idx: usize, series: &[f64]) -> Result<(f64, Vec<(usize, Vec<f64>)>)> {
        let cfg = &self.cfg;
        let nt = self.shape.nt;
        let corr = cube_correlations(series, &self.shape, &self.cubes[idx], cfg);
        let hist = fc_histogram(&corr.values, cfg)?;
        let (dist, d_hist) = bc_distance_parts(&self.fixed[idx], &hist.counts, true)?;

        let center = &corr.units[corr.center_pos];
        let mut out = Vec::new();
        if center.flat {
            return Ok((dist, out));
        }
        let scale = cfg.bin_scale();
        let mut g_center = vec![0.0; nt];
        for (i, unit) in corr.units.iter().enumerate() {
            if i == corr.center_pos || unit.flat {
                continue;
            }
            let r = corr.values[i];
            let (k, _) = soft_support(cfg.bin_coord(r), cfg.bins);
            // d(weight_k)/db = -1, d(weight_{k+1})/db = +1
            let g = scale * (d_hist[k + 1] - d_hist[k]);
            if g == 0.0 {
                continue;
            }
            let a = g / unit.norm;
            let b = g / center.norm;
            let gi: Vec<f64> =
                center.unit.iter().zip(&unit.unit).map(|(x, y)| a * (x - r * y)).collect();
            for ((gc, x), y) in g_center.iter_mut().zip(&center.unit).zip(&unit.unit) {
                *gc += b * (y - r * x);
            }
            out.push((corr.offsets[i], gi));
        }
        out.push((corr.offsets[corr.center_pos], g_center));
        Ok((dist, out))
    }
}
