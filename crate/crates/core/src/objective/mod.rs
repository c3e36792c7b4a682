//! The registration objective
//!
//! ```text
//! L(u) = MSE(F_T1, M_T1 ∘ u) + λ · FC(F_f, M_f ∘ D(u)) + γ · Σ_p ‖∇u(p)‖²
//! ```
//!
//! where `D` is the block-mean field downsampling onto the functional grid and
//! `∇` uses forward differences. [`Objective`] evaluates the loss and its
//! analytic gradient with respect to every component of `u`; [`register`]
//! minimises it with Adam starting from the zero field.

mod adam;
mod register;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use register::{register, GradMode, OptimizerConfig, Registration};

use crate::error::{Error, Result};
use crate::funcconn::{FcConfig, LocalFcTerm};
use crate::util::ordered_sum;
use crate::volume::{BrainMask, DisplacementField, GridShape, ScalarVolume, TimeSeriesVolume};
use crate::warp::{downsample_adjoint, downsample_field, warp_series_voxel_major, Stencil};

/// Step used for central-difference gradients.
pub const FD_STEP: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the functional (local FC) term.
    pub lambda: f64,
    /// Weight of the smoothness term.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda: 0.01, gamma: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite() && self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "loss weights must be finite and >= 0, got lambda={} gamma={}",
                self.lambda, self.gamma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub t1_sim: f64,
    pub f_sim: f64,
    pub smooth: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(t1_sim: f64, f_sim: f64, smooth: f64, w: &LossWeights) -> Self {
        LossBreakdown { t1_sim, f_sim, smooth, total: t1_sim + w.lambda * f_sim + w.gamma * smooth }
    }
}

/// Mean squared intensity difference over the (masked) domain.
pub fn mse_loss(f: &ScalarVolume, r: &ScalarVolume, mask: Option<&BrainMask>) -> Result<f64> {
    if f.shape() != r.shape() {
        return Err(Error::shape(f.shape(), r.shape()));
    }
    let sq: Vec<f64> = f.data().iter().zip(r.data()).map(|(a, b)| (a - b) * (a - b)).collect();
    masked_average(&sq, f.shape(), mask)
}

fn masked_average(values: &[f64], shape: GridShape, mask: Option<&BrainMask>) -> Result<f64> {
    match mask {
        None => Ok(ordered_sum(values) / values.len() as f64),
        Some(m) => {
            shape.check_spatial(&m.shape())?;
            let kept: Vec<f64> =
                values.iter().zip(m.inside()).map(|(&v, &b)| if b { v } else { 0.0 }).collect();
            let n = m.count();
            if n == 0 {
                return Err(Error::EmptyDomain);
            }
            Ok(ordered_sum(&kept) / n as f64)
        }
    }
}

/// Sum over voxels of the squared forward differences of every field
/// component. Differences that would leave the grid contribute nothing.
pub fn smoothness_loss(field: &DisplacementField) -> f64 {
    let shape = field.shape();
    let u = field.vectors();
    let per_voxel: Vec<f64> = (0..shape.voxels())
        .into_par_iter()
        .map(|i| {
            let ix = shape.index_of(i);
            let here = u[i];
            let mut acc = 0.0;
            for j in forward_neighbours(&shape, ix.x, ix.y, ix.z).into_iter().flatten() {
                for c in 0..3 {
                    let diff = u[j][c] - here[c];
                    acc += diff * diff;
                }
            }
            acc
        })
        .collect();
    ordered_sum(&per_voxel)
}

#[inline]
fn forward_neighbours(shape: &GridShape, x: usize, y: usize, z: usize) -> [Option<usize>; 3] {
    [
        (x + 1 < shape.nx).then(|| shape.offset(x + 1, y, z)),
        (y + 1 < shape.ny).then(|| shape.offset(x, y + 1, z)),
        (z + 1 < shape.nz).then(|| shape.offset(x, y, z + 1)),
    ]
}

#[inline]
fn backward_neighbours(shape: &GridShape, x: usize, y: usize, z: usize) -> [Option<usize>; 3] {
    [
        (x > 0).then(|| shape.offset(x - 1, y, z)),
        (y > 0).then(|| shape.offset(x, y - 1, z)),
        (z > 0).then(|| shape.offset(x, y, z - 1)),
    ]
}

/// `∂/∂u` of [`smoothness_loss`]: twice the graph Laplacian of the field.
pub(crate) fn smoothness_gradient(field: &DisplacementField) -> Vec<[f64; 3]> {
    let shape = field.shape();
    let u = field.vectors();
    (0..shape.voxels())
        .into_par_iter()
        .map(|i| {
            let ix = shape.index_of(i);
            let here = u[i];
            let mut g = [0.0; 3];
            let fwd = forward_neighbours(&shape, ix.x, ix.y, ix.z);
            let bwd = backward_neighbours(&shape, ix.x, ix.y, ix.z);
            for j in fwd.into_iter().chain(bwd).flatten() {
                for c in 0..3 {
                    g[c] += 2.0 * (here[c] - u[j][c]);
                }
            }
            g
        })
        .collect()
}

/// The inputs of one registration: a structural pair on the fine grid and a
/// functional pair on a grid `factor` times coarser along every axis.
#[derive(Clone, Debug)]
pub struct RegistrationProblem {
    pub fixed_t1: ScalarVolume,
    pub moving_t1: ScalarVolume,
    pub fixed_fmri: TimeSeriesVolume,
    pub moving_fmri: TimeSeriesVolume,
    pub factor: usize,
    /// Restricts the structural MSE; `None` means the whole grid.
    pub t1_mask: Option<BrainMask>,
    /// Restricts which cubes enter the functional term.
    pub fmri_mask: Option<BrainMask>,
}

impl RegistrationProblem {
    pub fn new(
        fixed_t1: ScalarVolume,
        moving_t1: ScalarVolume,
        fixed_fmri: TimeSeriesVolume,
        moving_fmri: TimeSeriesVolume,
        factor: usize,
    ) -> Result<Self> {
        let p = RegistrationProblem {
            fixed_t1,
            moving_t1,
            fixed_fmri,
            moving_fmri,
            factor,
            t1_mask: None,
            fmri_mask: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_masks(mut self, t1_mask: Option<BrainMask>, fmri_mask: Option<BrainMask>) -> Result<Self> {
        self.t1_mask = t1_mask;
        self.fmri_mask = fmri_mask;
        self.validate()?;
        Ok(self)
    }

    pub fn t1_shape(&self) -> GridShape {
        self.fixed_t1.shape()
    }

    fn validate(&self) -> Result<()> {
        let t1 = self.fixed_t1.shape();
        if self.moving_t1.shape() != t1 {
            return Err(Error::shape(t1, self.moving_t1.shape()));
        }
        let f = self.fixed_fmri.shape();
        if self.moving_fmri.shape() != f {
            return Err(Error::shape(f, self.moving_fmri.shape()));
        }
        if self.factor == 0 {
            return Err(Error::InvalidConfig("downsample factor must be >= 1".into()));
        }
        let k = self.factor;
        if [f.nx * k, f.ny * k, f.nz * k] != t1.dims() {
            return Err(Error::InvalidShape(format!(
                "structural grid {t1} must equal functional grid {} times {k}",
                f.spatial()
            )));
        }
        if let Some(m) = &self.t1_mask {
            t1.check_spatial(&m.shape())?;
        }
        if let Some(m) = &self.fmri_mask {
            f.check_spatial(&m.shape())?;
        }
        Ok(())
    }
}

/// Precomputed objective for one problem. Fixed-image histograms are built
/// once; every evaluation only touches the moving images.
pub struct Objective<'a> {
    problem: &'a RegistrationProblem,
    weights: LossWeights,
    fc: LocalFcTerm,
    moving_series: Vec<f64>,
}

impl<'a> Objective<'a> {
    pub fn new(problem: &'a RegistrationProblem, weights: LossWeights, cfg: &FcConfig) -> Result<Self> {
        weights.validate()?;
        let fc = LocalFcTerm::new(&problem.fixed_fmri, cfg, problem.fmri_mask.as_ref())?;
        Ok(Objective { problem, weights, fc, moving_series: problem.moving_fmri.to_voxel_major() })
    }

    pub fn weights(&self) -> LossWeights {
        self.weights
    }

    pub fn problem(&self) -> &RegistrationProblem {
        self.problem
    }

    /// Number of cubes contributing to the functional term.
    pub fn cube_count(&self) -> usize {
        self.fc.cube_count()
    }

    fn check_field(&self, field: &DisplacementField) -> Result<()> {
        self.problem.t1_shape().check_spatial(&field.shape())
    }

    pub fn evaluate(&self, field: &DisplacementField) -> Result<LossBreakdown> {
        self.check_field(field)?;
        let p = self.problem;
        let warped = crate::warp::warp_scalar(&p.moving_t1, field)?;
        let t1 = mse_loss(&p.fixed_t1, &warped, p.t1_mask.as_ref())?;
        let coarse = downsample_field(field, p.factor)?;
        let series = warp_series_voxel_major(&self.moving_series, &self.fc.shape(), &coarse);
        let f = self.fc.value(&series)?;
        Ok(LossBreakdown::compose(t1, f, smoothness_loss(field), &self.weights))
    }

    /// Loss and its analytic gradient with respect to every displacement component.
    pub fn gradient(&self, field: &DisplacementField) -> Result<(LossBreakdown, Vec<[f64; 3]>)> {
        self.check_field(field)?;
        let p = self.problem;
        let (t1, mut grad) = self.structural_part(field)?;

        let coarse = downsample_field(field, p.factor)?;
        let fshape = self.fc.shape();
        let series = warp_series_voxel_major(&self.moving_series, &fshape, &coarse);
        let f_sim = if self.weights.lambda > 0.0 {
            let (f, g_series) = self.fc.value_and_grad(&series)?;
            let nt = fshape.nt;
            let coarse_grad: Vec<[f64; 3]> = coarse
                .vectors()
                .par_iter()
                .enumerate()
                .map(|(i, &u)| {
                    let g = &g_series[i * nt..(i + 1) * nt];
                    if g.iter().all(|&x| x == 0.0) {
                        return [0.0; 3];
                    }
                    let dot = Stencil::displaced(&fshape, i, u).series_gradient_dot(&self.moving_series, nt, g);
                    // R(n) = S(n - u(n))
                    [-dot[0], -dot[1], -dot[2]]
                })
                .collect();
            let fine = downsample_adjoint(&coarse_grad, &p.t1_shape(), p.factor);
            let lambda = self.weights.lambda;
            grad.par_iter_mut().zip(&fine).for_each(|(g, h)| {
                for c in 0..3 {
                    g[c] += lambda * h[c];
                }
            });
            f
        } else {
            self.fc.value(&series)?
        };

        let smooth = smoothness_loss(field);
        if self.weights.gamma > 0.0 {
            let gamma = self.weights.gamma;
            let sg = smoothness_gradient(field);
            grad.par_iter_mut().zip(&sg).for_each(|(g, h)| {
                for c in 0..3 {
                    g[c] += gamma * h[c];
                }
            });
        }
        Ok((LossBreakdown::compose(t1, f_sim, smooth, &self.weights), grad))
    }

    fn structural_part(&self, field: &DisplacementField) -> Result<(f64, Vec<[f64; 3]>)> {
        let p = self.problem;
        let shape = p.t1_shape();
        let mask = p.t1_mask.as_ref().map(|m| m.inside());
        let n = match mask {
            Some(m) => m.iter().filter(|&&b| b).count(),
            None => shape.voxels(),
        };
        if n == 0 {
            return Err(Error::EmptyDomain);
        }
        let scale = 2.0 / n as f64;
        let fixed = p.fixed_t1.data();
        let moving = p.moving_t1.data();
        let per_voxel: Vec<(f64, [f64; 3])> = field
            .vectors()
            .par_iter()
            .enumerate()
            .map(|(i, &u)| {
                if mask.is_some_and(|m| !m[i]) {
                    return (0.0, [0.0; 3]);
                }
                let st = Stencil::displaced(&shape, i, u);
                let resid = st.sample(moving) - fixed[i];
                let g = st.gradient(moving);
                // dR/du = -∇M(p̂)
                (resid * resid, [-scale * resid * g[0], -scale * resid * g[1], -scale * resid * g[2]])
            })
            .collect();
        let sq: Vec<f64> = per_voxel.iter().map(|(s, _)| *s).collect();
        let grad = per_voxel.into_iter().map(|(_, g)| g).collect();
        Ok((ordered_sum(&sq) / n as f64, grad))
    }

    /// Central-difference gradient of the total loss; `3·N` pairs of evaluations.
    pub fn finite_difference_gradient(&self, field: &DisplacementField, step: f64) -> Result<Vec<[f64; 3]>> {
        self.check_field(field)?;
        let shape = field.shape();
        let base = field.vectors();
        (0..shape.voxels() * 3)
            .into_par_iter()
            .map(|k| {
                let (i, c) = (k / 3, k % 3);
                let mut v = base.to_vec();
                v[i][c] = base[i][c] + step;
                let up = self.evaluate(&DisplacementField::new(shape, v.clone())?)?.total;
                v[i][c] = base[i][c] - step;
                let dn = self.evaluate(&DisplacementField::new(shape, v)?)?.total;
                Ok((up - dn) / (2.0 * step))
            })
            .collect::<Result<Vec<f64>>>()
            .map(|flat| flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }
}

fn check_differentiable(weights: &LossWeights, cfg: &FcConfig, mode: GradMode) -> Result<()> {
    if mode == GradMode::Analytic && weights.lambda > 0.0 && !cfg.soft {
        return Err(Error::NonDifferentiable);
    }
    Ok(())
}

/// Warps both moving images by `field` and evaluates every term of the loss.
pub fn total_loss(
    problem: &RegistrationProblem,
    field: &DisplacementField,
    weights: &LossWeights,
    cfg: &FcConfig,
) -> Result<LossBreakdown> {
    Objective::new(problem, *weights, cfg)?.evaluate(field)
}

/// Gradient of [`total_loss`] with respect to the field, analytic or by
/// central differences with step [`FD_STEP`].
pub fn loss_gradient(
    problem: &RegistrationProblem,
    field: &DisplacementField,
    weights: &LossWeights,
    cfg: &FcConfig,
    mode: GradMode,
) -> Result<Vec<[f64; 3]>> {
    check_differentiable(weights, cfg, mode)?;
    let obj = Objective::new(problem, *weights, cfg)?;
    match mode {
        GradMode::Analytic => Ok(obj.gradient(field)?.1),
        GradMode::FiniteDifference => obj.finite_difference_gradient(field, FD_STEP),
    }
}
