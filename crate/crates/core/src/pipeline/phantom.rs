//! Synthetic structural/functional phantom pairs with a known deformation.
//!
//! The fixed subject is an ellipsoidal "brain" split into Voronoi parcels.
//! Each parcel has its own structural intensity (with smooth blobs layered on
//! top) and its own sinusoidal time course at a distinct frequency, so parcels
//! differ both in T1 contrast and in local FC. The ground-truth field `t` is a
//! smoothed random vector field that vanishes on the grid boundary. Moving
//! images are built so that warping them by `t` recovers the fixed images:
//! `M(p - t(p)) = F(p)`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{
    normalize_intensity, BrainMask, DisplacementField, GridShape, LabelVolume, ScalarVolume,
    TimeSeriesVolume,
};
use crate::warp::{warp_labels, warp_scalar, warp_time_series, Stencil};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhantomSpec {
    pub size: [usize; 3],
    pub timepoints: usize,
    pub seed: u64,
    /// Largest ground-truth displacement length, in voxels.
    pub max_displacement: f64,
    pub n_regions: usize,
    pub noise_std: f64,
    /// Make the structural image constant inside the brain, leaving parcels
    /// distinguishable only by their functional signals.
    pub flat_structure: bool,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            size: [24, 24, 24],
            timepoints: 30,
            seed: 0,
            max_displacement: 2.0,
            n_regions: 8,
            noise_std: 0.3,
            flat_structure: false,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|&n| n < 8) {
            return Err(Error::InvalidConfig(format!("phantom size must be >= 8 per axis, got {:?}", self.size)));
        }
        if self.timepoints < 10 {
            return Err(Error::InvalidConfig(format!("phantom needs >= 10 time points, got {}", self.timepoints)));
        }
        let limit = *self.size.iter().min().unwrap() as f64 / 4.0;
        if !(self.max_displacement >= 0.0 && self.max_displacement < limit) {
            return Err(Error::InvalidConfig(format!(
                "max_displacement must lie in [0, {limit}), got {}",
                self.max_displacement
            )));
        }
        if self.n_regions < 1 {
            return Err(Error::InvalidConfig("phantom needs at least one region".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidConfig(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub fixed_t1: ScalarVolume,
    pub moving_t1: ScalarVolume,
    pub fixed_fmri: TimeSeriesVolume,
    pub moving_fmri: TimeSeriesVolume,
    pub labels_fixed: LabelVolume,
    pub labels_moving: LabelVolume,
    /// The field that registers the moving images onto the fixed ones.
    pub truth: DisplacementField,
    /// Brain region of the fixed subject.
    pub mask: BrainMask,
}

pub fn make_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let [nx, ny, nz] = spec.size;
    let shape = GridShape::new(nx, ny, nz)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let centre = [0, 1, 2].map(|d| (spec.size[d] as f64 - 1.0) / 2.0);
    let radii = [0, 1, 2].map(|d| 0.4 * spec.size[d] as f64);
    let in_brain = |p: [f64; 3]| -> bool {
        (0..3).map(|d| ((p[d] - centre[d]) / radii[d]).powi(2)).sum::<f64>() <= 1.0
    };
    let coords = |i: usize| {
        let ix = shape.index_of(i);
        [ix.x as f64, ix.y as f64, ix.z as f64]
    };
    let inside: Vec<bool> = (0..shape.voxels()).map(|i| in_brain(coords(i))).collect();
    let mask = BrainMask::new(shape, inside.clone())?;

    // Voronoi parcels around random seeds inside the brain.
    let mut seeds = Vec::with_capacity(spec.n_regions);
    while seeds.len() < spec.n_regions {
        let p = [0, 1, 2].map(|d| rng.random_range(0.0..spec.size[d] as f64 - 1.0));
        if in_brain(p) {
            seeds.push(p);
        }
    }
    let labels: Vec<u32> = (0..shape.voxels())
        .map(|i| {
            if !inside[i] {
                return 0;
            }
            let p = coords(i);
            let nearest = seeds
                .iter()
                .enumerate()
                .map(|(k, s)| (k, (0..3).map(|d| (p[d] - s[d]).powi(2)).sum::<f64>()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(k, _)| k)
                .unwrap();
            nearest as u32 + 1
        })
        .collect();
    let labels_fixed = LabelVolume::new(shape, labels.clone())?;

    // Structural contrast.
    let mut levels: Vec<f64> = (0..spec.n_regions)
        .map(|k| 0.3 + 0.7 * (k as f64 + 1.0) / spec.n_regions as f64)
        .collect();
    levels.shuffle(&mut rng);
    let min_dim = *spec.size.iter().min().unwrap() as f64;
    let blobs: Vec<([f64; 3], f64, f64)> = (0..2 * spec.n_regions)
        .map(|_| {
            let c = [0, 1, 2].map(|d| rng.random_range(0.0..spec.size[d] as f64));
            let sigma = rng.random_range(0.06..0.14) * min_dim;
            let amp = rng.random_range(-0.25..0.25);
            (c, sigma, amp)
        })
        .collect();
    let raw_t1: Vec<f64> = (0..shape.voxels())
        .map(|i| {
            if labels[i] == 0 {
                return 0.0;
            }
            if spec.flat_structure {
                return 0.7;
            }
            let p = coords(i);
            let blob: f64 = blobs
                .iter()
                .map(|(c, s, a)| {
                    let r2: f64 = (0..3).map(|d| (p[d] - c[d]).powi(2)).sum();
                    a * (-r2 / (2.0 * s * s)).exp()
                })
                .sum();
            levels[labels[i] as usize - 1] + blob
        })
        .collect();
    let fixed_t1 = normalize_intensity(&ScalarVolume::new(shape, gaussian_smooth(&raw_t1, &shape, 1.0))?);

    // Functional signals: one sinusoid per parcel, integer cycles so distinct
    // frequencies are orthogonal over the run.
    let nt = spec.timepoints;
    let max_cycles = (nt / 2 - 1).max(1);
    let courses: Vec<Vec<f64>> = (0..spec.n_regions)
        .map(|k| {
            let cycles = 1 + k % max_cycles;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (0..nt)
                .map(|t| (std::f64::consts::TAU * cycles as f64 * t as f64 / nt as f64 + phase).sin())
                .collect()
        })
        .collect();
    let mut frames = Vec::with_capacity(nt);
    for t in 0..nt {
        let raw: Vec<f64> = labels
            .iter()
            .map(|&l| {
                if l == 0 {
                    0.0
                } else {
                    courses[l as usize - 1][t] + spec.noise_std * normal.sample(&mut rng)
                }
            })
            .collect();
        let smooth = gaussian_smooth(&raw, &shape, 1.0);
        let masked = smooth.iter().zip(&inside).map(|(&v, &b)| if b { v } else { 0.0 }).collect();
        frames.push(ScalarVolume::new(shape, masked)?);
    }
    let fixed_fmri = TimeSeriesVolume::from_frames(&frames)?;

    let truth = random_smooth_field(&shape, spec.max_displacement, &mut rng, &normal)?;
    let inverse = invert_field(&truth)?;
    let moving_t1 = warp_scalar(&fixed_t1, &inverse)?;
    let moving_fmri = warp_time_series(&fixed_fmri, &inverse)?;
    let labels_moving = warp_labels(&labels_fixed, &inverse)?;

    Ok(Phantom { fixed_t1, moving_t1, fixed_fmri, moving_fmri, labels_fixed, labels_moving, truth, mask })
}

/// Smoothed white noise, tapered to zero on the outer voxel shell and scaled
/// so the longest vector has length `max_len`.
fn random_smooth_field(
    shape: &GridShape,
    max_len: f64,
    rng: &mut ChaCha8Rng,
    normal: &Normal<f64>,
) -> Result<DisplacementField> {
    let nv = shape.voxels();
    let dims = shape.dims();
    let sigma = *dims.iter().min().unwrap() as f64 / 6.0;
    let comps: Vec<Vec<f64>> = (0..3)
        .map(|_| {
            let noise: Vec<f64> = (0..nv).map(|_| normal.sample(rng)).collect();
            gaussian_smooth(&noise, shape, sigma)
        })
        .collect();
    let taper = |i: usize| -> f64 {
        let ix = shape.index_of(i);
        [ix.x, ix.y, ix.z]
            .iter()
            .zip(dims)
            .map(|(&c, n)| (std::f64::consts::PI * c as f64 / (n as f64 - 1.0)).sin().max(0.0))
            .product()
    };
    let mut vectors: Vec<[f64; 3]> = (0..nv)
        .map(|i| {
            let w = taper(i);
            [comps[0][i] * w, comps[1][i] * w, comps[2][i] * w]
        })
        .collect();
    let longest = vectors
        .iter()
        .map(|u| (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt())
        .fold(0.0, f64::max);
    let scale = if longest > 0.0 { max_len / longest } else { 0.0 };
    for u in &mut vectors {
        for c in u.iter_mut() {
            *c *= scale;
        }
    }
    DisplacementField::new(*shape, vectors)
}

/// Field `v` with `warp(warp(F, v), t) = F`: solves `s(y) = t(y + s(y))` by
/// fixed-point iteration and returns `v = -s`.
fn invert_field(t: &DisplacementField) -> Result<DisplacementField> {
    let shape = t.shape();
    let comps: Vec<Vec<f64>> = (0..3).map(|c| t.vectors().iter().map(|u| u[c]).collect()).collect();
    let mut s = vec![[0.0; 3]; shape.voxels()];
    for _ in 0..50 {
        s = s
            .par_iter()
            .enumerate()
            .map(|(i, cur)| {
                let ix = shape.index_of(i);
                let p = [ix.x as f64 + cur[0], ix.y as f64 + cur[1], ix.z as f64 + cur[2]];
                let st = Stencil::new(&shape, p);
                [st.sample(&comps[0]), st.sample(&comps[1]), st.sample(&comps[2])]
            })
            .collect();
    }
    DisplacementField::new(shape, s.into_iter().map(|u| [-u[0], -u[1], -u[2]]).collect())
}

/// Separable Gaussian filter with zero padding.
pub(crate) fn gaussian_smooth(data: &[f64], shape: &GridShape, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let dims = shape.dims();
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let n = dims[axis] as i64;
        let stride = strides[axis];
        let src = cur;
        cur = (0..src.len())
            .into_par_iter()
            .map(|i| {
                let pos = ((i / stride) % dims[axis]) as i64;
                let mut acc = 0.0;
                for (j, k) in (-radius..=radius).zip(&kernel) {
                    let q = pos + j;
                    if q >= 0 && q < n {
                        let o = (i as i64 + j * stride as i64) as usize;
                        acc += k * src[o];
                    }
                }
                acc
            })
            .collect();
    }
    cur
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalsuite::dice;

    fn small() -> PhantomSpec {
        PhantomSpec { size: [16, 16, 16], timepoints: 12, seed: 5, max_displacement: 2.0, ..Default::default() }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = make_phantom(&small()).unwrap();
        let b = make_phantom(&small()).unwrap();
        assert_eq!(a, b);
        let c = make_phantom(&PhantomSpec { seed: 6, ..small() }).unwrap();
        assert_ne!(a.truth, c.truth);
    }

    #[test]
    fn truth_is_rescaled_and_vanishes_on_boundary() {
        let p = make_phantom(&small()).unwrap();
        assert!((p.truth.max_magnitude() - 2.0).abs() < 1e-6);
        let s = p.truth.shape();
        for (i, u) in p.truth.vectors().iter().enumerate() {
            let ix = s.index_of(i);
            if ix.x == 0 || ix.y == 0 || ix.z == 0 || ix.x == 15 || ix.y == 15 || ix.z == 15 {
                assert!(u.iter().all(|c| c.abs() < 1e-12));
            }
        }
    }

    #[test]
    fn inverse_field_solves_fixed_point() {
        let p = make_phantom(&small()).unwrap();
        let inv = invert_field(&p.truth).unwrap();
        let s = p.truth.shape();
        let comps: Vec<Vec<f64>> = (0..3).map(|c| p.truth.vectors().iter().map(|u| u[c]).collect()).collect();
        for (i, v) in inv.vectors().iter().enumerate() {
            let ix = s.index_of(i);
            let q = [ix.x as f64 - v[0], ix.y as f64 - v[1], ix.z as f64 - v[2]];
            let st = Stencil::new(&s, q);
            for c in 0..3 {
                assert!((st.sample(&comps[c]) + v[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn truth_registers_moving_onto_fixed() {
        let p = make_phantom(&small()).unwrap();
        let back = warp_scalar(&p.moving_t1, &p.truth).unwrap();
        let err = crate::objective::mse_loss(&p.fixed_t1, &back, None).unwrap();
        let before = crate::objective::mse_loss(&p.fixed_t1, &p.moving_t1, None).unwrap();
        // What remains is the blur of interpolating twice.
        assert!(err < 0.25 * before, "{err} vs {before}");
    }

    #[test]
    fn displacement_lowers_label_overlap() {
        let spec = PhantomSpec { size: [24, 24, 24], max_displacement: 2.0, ..small() };
        let p = make_phantom(&spec).unwrap();
        let labels = p.labels_fixed.distinct();
        assert!(dice(&p.labels_fixed, &p.labels_moving, &labels).unwrap().mean < 1.0);
    }

    #[test]
    fn spec_invariants_enforced() {
        assert!(make_phantom(&PhantomSpec { size: [7, 16, 16], ..small() }).is_err());
        assert!(make_phantom(&PhantomSpec { timepoints: 9, ..small() }).is_err());
        assert!(make_phantom(&PhantomSpec { max_displacement: 4.0, ..small() }).is_err());
    }

    #[test]
    fn smoothing_preserves_interior_constants() {
        let s = GridShape::new(12, 12, 12).unwrap();
        let out = gaussian_smooth(&vec![2.0; s.voxels()], &s, 1.0);
        assert!((out[s.offset(6, 6, 6)] - 2.0).abs() < 1e-12);
        assert!(out[0] < 2.0);
    }
}
