//! Spatial-transformer warping.
//!
//! A displacement field `u` resamples a moving image at `p̂ = p - u(p)` for
//! every output voxel `p`, using trilinear interpolation over the (up to) eight
//! lattice neighbours of `p̂`. Neighbours outside the grid contribute zero.
//!
//! The structural field lives on the fine grid; the functional image is warped
//! by a block-averaged copy of it (see [`downsample_field`]).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{
    DisplacementField, GridShape, LabelVolume, ScalarVolume, TimeSeriesVolume,
};

/// A real-valued position in voxel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplePoint {
    pub px: f64,
    pub py: f64,
    pub pz: f64,
}

impl SamplePoint {
    pub const fn new(px: f64, py: f64, pz: f64) -> Self {
        SamplePoint { px, py, pz }
    }

    fn as_array(&self) -> [f64; 3] {
        [self.px, self.py, self.pz]
    }
}

/// Interpolation weights of one sample point: the in-bounds lattice neighbours,
/// their trilinear weights and the derivative of each weight with respect to
/// the sample coordinates.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    len: usize,
    offsets: [usize; 8],
    weights: [f64; 8],
    dweights: [[f64; 3]; 8],
}

impl Stencil {
    pub(crate) fn new(shape: &GridShape, p: [f64; 3]) -> Stencil {
        let mut st = Stencil { len: 0, offsets: [0; 8], weights: [0.0; 8], dweights: [[0.0; 3]; 8] };
        let dims = shape.dims();
        let mut base = [0i64; 3];
        let mut frac = [0.0; 3];
        for d in 0..3 {
            // Beyond one voxel outside the grid every neighbour is padding.
            if !(p[d] > -1.0 && p[d] < dims[d] as f64) {
                return st;
            }
            let f = p[d].floor();
            base[d] = f as i64;
            frac[d] = p[d] - f;
        }
        for corner in 0..8usize {
            let mut q = [0usize; 3];
            let mut w = [0.0; 3];
            let mut dw = [0.0; 3];
            let mut inside = true;
            for d in 0..3 {
                let hi = (corner >> d) & 1 == 1;
                let c = base[d] + hi as i64;
                if c < 0 || c >= dims[d] as i64 {
                    inside = false;
                    break;
                }
                q[d] = c as usize;
                if hi {
                    w[d] = frac[d];
                    dw[d] = 1.0;
                } else {
                    w[d] = 1.0 - frac[d];
                    dw[d] = -1.0;
                }
            }
            if !inside {
                continue;
            }
            let k = st.len;
            st.offsets[k] = shape.offset(q[0], q[1], q[2]);
            st.weights[k] = w[0] * w[1] * w[2];
            st.dweights[k] = [dw[0] * w[1] * w[2], w[0] * dw[1] * w[2], w[0] * w[1] * dw[2]];
            st.len += 1;
        }
        st
    }

    /// Sample point `p - u(p)` for the voxel at flat offset `offset`.
    #[inline]
    pub(crate) fn displaced(shape: &GridShape, offset: usize, u: [f64; 3]) -> Stencil {
        let ix = shape.index_of(offset);
        Stencil::new(shape, [ix.x as f64 - u[0], ix.y as f64 - u[1], ix.z as f64 - u[2]])
    }

    #[inline]
    pub(crate) fn sample(&self, data: &[f64]) -> f64 {
        let mut acc = 0.0;
        for k in 0..self.len {
            acc += self.weights[k] * data[self.offsets[k]];
        }
        acc
    }

    /// Spatial gradient of the interpolant at the sample point.
    #[inline]
    pub(crate) fn gradient(&self, data: &[f64]) -> [f64; 3] {
        let mut g = [0.0; 3];
        for k in 0..self.len {
            let v = data[self.offsets[k]];
            for d in 0..3 {
                g[d] += self.dweights[k][d] * v;
            }
        }
        g
    }

    /// Interpolates every time point of voxel-major series (`nt` values per voxel).
    #[inline]
    pub(crate) fn sample_series(&self, series: &[f64], nt: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for k in 0..self.len {
            let w = self.weights[k];
            let src = &series[self.offsets[k] * nt..(self.offsets[k] + 1) * nt];
            for (o, s) in out.iter_mut().zip(src) {
                *o += w * s;
            }
        }
    }

    /// `Σ_t g[t] · ∇S_t(p̂)` for voxel-major series.
    #[inline]
    pub(crate) fn series_gradient_dot(&self, series: &[f64], nt: usize, g: &[f64]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for k in 0..self.len {
            let src = &series[self.offsets[k] * nt..(self.offsets[k] + 1) * nt];
            let dot: f64 = src.iter().zip(g).map(|(a, b)| a * b).sum();
            for d in 0..3 {
                out[d] += self.dweights[k][d] * dot;
            }
        }
        out
    }

    #[cfg(test)]
    pub(crate) fn weight_sum(&self) -> f64 {
        self.weights[..self.len].iter().sum()
    }
}

fn check_point(s: &SamplePoint) -> Result<()> {
    if let Some(i) = s.as_array().iter().position(|c| !c.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    Ok(())
}

/// Trilinear interpolation of `v` at `s` with zero padding outside the grid.
pub fn trilinear_sample(v: &ScalarVolume, s: SamplePoint) -> Result<f64> {
    check_point(&s)?;
    Ok(Stencil::new(&v.shape(), s.as_array()).sample(v.data()))
}

/// Gradient of the trilinear interpolant with respect to the sample position.
///
/// At lattice coordinates the one-sided derivative towards `+axis` is returned.
pub fn trilinear_gradient(v: &ScalarVolume, s: SamplePoint) -> Result<[f64; 3]> {
    check_point(&s)?;
    Ok(Stencil::new(&v.shape(), s.as_array()).gradient(v.data()))
}

/// `R(p) = M(p - u(p))`.
pub fn warp_scalar(m: &ScalarVolume, field: &DisplacementField) -> Result<ScalarVolume> {
    let shape = m.shape();
    shape.check_spatial(&field.shape())?;
    let data: Vec<f64> = field
        .vectors()
        .par_iter()
        .enumerate()
        .map(|(i, &u)| Stencil::displaced(&shape, i, u).sample(m.data()))
        .collect();
    Ok(ScalarVolume::new(shape, data)?.with_spacing(m.spacing()))
}

/// Applies one spatial field to every time point of a functional image.
pub fn warp_time_series(m: &TimeSeriesVolume, field: &DisplacementField) -> Result<TimeSeriesVolume> {
    let shape = m.shape();
    shape.check_spatial(&field.shape())?;
    let nt = shape.nt;
    let warped = warp_series_voxel_major(&m.to_voxel_major(), &shape, field);
    debug_assert_eq!(warped.len(), shape.voxels() * nt);
    Ok(TimeSeriesVolume::from_voxel_major(shape, &warped, m.spacing()))
}

/// Warps voxel-major series (`shape.nt` values per voxel) by `field`.
pub(crate) fn warp_series_voxel_major(series: &[f64], shape: &GridShape, field: &DisplacementField) -> Vec<f64> {
    let nt = shape.nt;
    let mut out = vec![0.0; shape.voxels() * nt];
    out.par_chunks_mut(nt)
        .zip(field.vectors().par_iter())
        .enumerate()
        .for_each(|(i, (dst, &u))| Stencil::displaced(shape, i, u).sample_series(series, nt, dst));
    out
}

/// Nearest-neighbour label warp: `R(p) = L(round(p - u(p)))`, 0 outside the grid.
pub fn warp_labels(labels: &LabelVolume, field: &DisplacementField) -> Result<LabelVolume> {
    let shape = labels.shape();
    shape.check_spatial(&field.shape())?;
    let dims = shape.dims();
    let out = field
        .vectors()
        .par_iter()
        .enumerate()
        .map(|(i, u)| {
            let ix = shape.index_of(i);
            let p = [ix.x as f64 - u[0], ix.y as f64 - u[1], ix.z as f64 - u[2]];
            let mut q = [0usize; 3];
            for d in 0..3 {
                let r = p[d].round();
                if r < 0.0 || r >= dims[d] as f64 {
                    return 0;
                }
                q[d] = r as usize;
            }
            labels.labels()[shape.offset(q[0], q[1], q[2])]
        })
        .collect();
    LabelVolume::new(shape, out)
}

fn coarse_shape(shape: &GridShape, factor: usize) -> Result<GridShape> {
    if factor == 0 {
        return Err(Error::InvalidConfig("downsample factor must be >= 1".into()));
    }
    let dims = shape.dims();
    if dims.iter().any(|&n| n % factor != 0) {
        return Err(Error::InvalidShape(format!(
            "{shape} is not divisible by downsample factor {factor}"
        )));
    }
    GridShape::new(dims[0] / factor, dims[1] / factor, dims[2] / factor)
}

/// Block-mean downsampling with unit conversion: every coarse vector is the mean
/// of its `factor³` fine block divided by `factor`.
pub fn downsample_field(field: &DisplacementField, factor: usize) -> Result<DisplacementField> {
    let fine = field.shape();
    let coarse = coarse_shape(&fine, factor)?;
    if factor == 1 {
        return Ok(field.clone());
    }
    let scale = 1.0 / ((factor * factor * factor) as f64 * factor as f64);
    let vectors: Vec<[f64; 3]> = (0..coarse.voxels())
        .into_par_iter()
        .map(|c| {
            let ci = coarse.index_of(c);
            let mut acc = [0.0; 3];
            for dz in 0..factor {
                for dy in 0..factor {
                    for dx in 0..factor {
                        let o = fine.offset(ci.x * factor + dx, ci.y * factor + dy, ci.z * factor + dz);
                        let u = field.vectors()[o];
                        for d in 0..3 {
                            acc[d] += u[d];
                        }
                    }
                }
            }
            [acc[0] * scale, acc[1] * scale, acc[2] * scale]
        })
        .collect();
    DisplacementField::new(coarse, vectors)
}

/// Adjoint of [`downsample_field`]: scatters a coarse-grid gradient back onto
/// the fine grid.
pub(crate) fn downsample_adjoint(coarse_grad: &[[f64; 3]], fine: &GridShape, factor: usize) -> Vec<[f64; 3]> {
    if factor == 1 {
        return coarse_grad.to_vec();
    }
    let coarse = GridShape { nx: fine.nx / factor, ny: fine.ny / factor, nz: fine.nz / factor, nt: 1 };
    let scale = 1.0 / ((factor * factor * factor) as f64 * factor as f64);
    (0..fine.voxels())
        .into_par_iter()
        .map(|i| {
            let ix = fine.index_of(i);
            let g = coarse_grad[coarse.offset(ix.x / factor, ix.y / factor, ix.z / factor)];
            [g[0] * scale, g[1] * scale, g[2] * scale]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VoxelIndex;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(shape: GridShape, seed: u64) -> ScalarVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ScalarVolume::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn lattice_points_are_exact() {
        let s = GridShape::new(4, 5, 3).unwrap();
        let v = random_volume(s, 1);
        for i in 0..s.voxels() {
            let ix = s.index_of(i);
            let p = SamplePoint::new(ix.x as f64, ix.y as f64, ix.z as f64);
            assert_eq!(trilinear_sample(&v, p).unwrap(), v.data()[i]);
        }
    }

    #[test]
    fn hand_evaluated_weights() {
        let s = GridShape::new(2, 1, 1).unwrap();
        let v = ScalarVolume::new(s, vec![0.0, 4.0]).unwrap();
        assert_eq!(trilinear_sample(&v, SamplePoint::new(0.25, 0.0, 0.0)).unwrap(), 1.0);
    }

    #[test]
    fn far_outside_is_zero() {
        let s = GridShape::new(3, 3, 3).unwrap();
        let v = ScalarVolume::from_fn(s, |_| 2.0).unwrap();
        assert_eq!(trilinear_sample(&v, SamplePoint::new(-5.0, -5.0, -5.0)).unwrap(), 0.0);
        // Half a voxel outside: only the in-bounds half of the stencil remains.
        assert_eq!(trilinear_sample(&v, SamplePoint::new(-0.5, 1.0, 1.0)).unwrap(), 1.0);
    }

    #[test]
    fn non_finite_point_rejected() {
        let s = GridShape::new(2, 2, 2).unwrap();
        let v = ScalarVolume::zeros(s);
        assert!(trilinear_sample(&v, SamplePoint::new(f64::NAN, 0.0, 0.0)).is_err());
    }

    #[test]
    fn zero_field_is_identity() {
        let s = GridShape::new(5, 4, 6).unwrap();
        let v = random_volume(s, 2);
        assert_eq!(warp_scalar(&v, &DisplacementField::zeros(s)).unwrap(), v);
    }

    #[test]
    fn constant_shift_follows_sign_convention() {
        let s = GridShape::new(6, 4, 4).unwrap();
        let v = ScalarVolume::from_fn(s, |ix| ix.x as f64).unwrap();
        let f = DisplacementField::constant(s, [1.0, 0.0, 0.0]).unwrap();
        let w = warp_scalar(&v, &f).unwrap();
        for i in 0..s.voxels() {
            let ix = s.index_of(i);
            if ix.x >= 1 {
                assert_eq!(w.data()[i], ix.x as f64 - 1.0);
            }
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let v = ScalarVolume::zeros(GridShape::new(4, 4, 4).unwrap());
        let f = DisplacementField::zeros(GridShape::new(4, 4, 3).unwrap());
        assert!(matches!(warp_scalar(&v, &f), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn time_series_warp_matches_per_frame() {
        let s = GridShape::with_time(8, 8, 8, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ts = TimeSeriesVolume::new(s, (0..s.len()).map(|_| rng.random_range(-2.0..2.0)).collect())
            .unwrap();
        let f = DisplacementField::from_fn(s, |_| {
            [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)]
        })
        .unwrap();
        let w = warp_time_series(&ts, &f).unwrap();
        for t in 0..s.nt {
            let oracle = warp_scalar(&ts.frame(t), &f).unwrap();
            assert_eq!(w.frame(t).data(), oracle.data());
        }
        let id = warp_time_series(&ts, &DisplacementField::zeros(s)).unwrap();
        assert_eq!(id, ts);
    }

    #[test]
    fn downsample_constant_and_zero() {
        let s = GridShape::new(6, 9, 3).unwrap();
        let f = DisplacementField::constant(s, [3.0, 0.0, 0.0]).unwrap();
        let d = downsample_field(&f, 3).unwrap();
        assert_eq!(d.shape().dims(), [2, 3, 1]);
        assert!(d.vectors().iter().all(|&u| u == [1.0, 0.0, 0.0]));
        let z = downsample_field(&DisplacementField::zeros(s), 3).unwrap();
        assert!(z.vectors().iter().all(|&u| u == [0.0; 3]));
        assert!(downsample_field(&f, 2).is_err());
    }

    #[test]
    fn downsample_matches_block_mean_oracle() {
        let s = GridShape::new(6, 6, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = DisplacementField::from_fn(s, |_| {
            [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]
        })
        .unwrap();
        let d = downsample_field(&f, 3).unwrap();
        for cz in 0..2 {
            for cy in 0..2 {
                for cx in 0..2 {
                    let mut sum = [0.0; 3];
                    for z in cz * 3..cz * 3 + 3 {
                        for y in cy * 3..cy * 3 + 3 {
                            for x in cx * 3..cx * 3 + 3 {
                                let u = f.get(VoxelIndex::new(x, y, z)).unwrap();
                                for c in 0..3 {
                                    sum[c] += u[c];
                                }
                            }
                        }
                    }
                    let got = d.get(VoxelIndex::new(cx, cy, cz)).unwrap();
                    for c in 0..3 {
                        assert!((got[c] - sum[c] / 27.0 / 3.0).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn adjoint_identity_holds() {
        // <D u, g> == <u, D^T g>
        let fine = GridShape::new(4, 6, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = DisplacementField::from_fn(fine, |_| [rng.random(), rng.random(), rng.random()]).unwrap();
        let du = downsample_field(&u, 2).unwrap();
        let g: Vec<[f64; 3]> = (0..du.shape().voxels()).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let lhs: f64 = du.vectors().iter().zip(&g).map(|(a, b)| a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).sum();
        let back = downsample_adjoint(&g, &fine, 2);
        let rhs: f64 = u.vectors().iter().zip(&back).map(|(a, b)| a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn label_warp_nearest_neighbour() {
        let s = GridShape::new(4, 1, 1).unwrap();
        let l = LabelVolume::new(s, vec![1, 2, 3, 4]).unwrap();
        let f = DisplacementField::constant(s, [1.2, 0.0, 0.0]).unwrap();
        assert_eq!(warp_labels(&l, &f).unwrap().labels(), &[0, 1, 2, 3]);
    }

    proptest! {
        #[test]
        fn weights_partition_unity(x in 0.0f64..6.999, y in 0.0f64..4.999, z in 0.0f64..3.999) {
            let s = GridShape::new(8, 6, 5).unwrap();
            let st = Stencil::new(&s, [x, y, z]);
            prop_assert!((st.weight_sum() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn warp_is_linear_in_values(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
            let s = GridShape::new(5, 5, 5).unwrap();
            let m1 = random_volume(s, seed);
            let m2 = random_volume(s, seed + 1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
            let f = DisplacementField::from_fn(s, |_| {
                [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]
            }).unwrap();
            let combo = ScalarVolume::new(
                s,
                m1.data().iter().zip(m2.data()).map(|(x, y)| a * x + b * y).collect(),
            ).unwrap();
            let lhs = warp_scalar(&combo, &f).unwrap();
            let w1 = warp_scalar(&m1, &f).unwrap();
            let w2 = warp_scalar(&m2, &f).unwrap();
            for i in 0..s.voxels() {
                prop_assert!((lhs.data()[i] - (a * w1.data()[i] + b * w2.data()[i])).abs() < 1e-9);
            }
        }

        #[test]
        fn constants_commute_at_interior(c in -5.0f64..5.0, ux in -0.9f64..0.9, uy in -0.9f64..0.9, uz in -0.9f64..0.9) {
            let s = GridShape::new(6, 6, 6).unwrap();
            let v = ScalarVolume::from_fn(s, |_| c).unwrap();
            let f = DisplacementField::constant(s, [ux, uy, uz]).unwrap();
            let w = warp_scalar(&v, &f).unwrap();
            for i in 0..s.voxels() {
                let ix = s.index_of(i);
                if [ix.x, ix.y, ix.z].iter().all(|&k| (1..5).contains(&k)) {
                    prop_assert!((w.data()[i] - c).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn downsample_scales_constants(c in -10.0f64..10.0, factor in 1usize..4) {
            let s = GridShape::new(factor * 2, factor * 3, factor).unwrap();
            let f = DisplacementField::constant(s, [c, -c, 0.5 * c]).unwrap();
            let d = downsample_field(&f, factor).unwrap();
            let expect = [c / factor as f64, -c / factor as f64, 0.5 * c / factor as f64];
            for u in d.vectors() {
                for k in 0..3 {
                    prop_assert!((u[k] - expect[k]).abs() <= 1e-12 * expect[k].abs().max(1.0));
                }
            }
        }
    }
}
