//! Fixtures shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use fcreg::objective::{Objective, FD_STEP};
use fcreg::{
    DisplacementField, FcConfig, GridShape, LossWeights, RegistrationProblem, ScalarVolume, TimeSeriesVolume,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Denominator floor for relative errors, so components where both gradients
/// vanish compare as equal instead of 0/0.
pub const REL_FLOOR: f64 = 1e-9;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_scalar(shape: GridShape, rng: &mut ChaCha8Rng) -> ScalarVolume {
    ScalarVolume::from_fn(shape, |_| rng.random_range(0.0..1.0)).unwrap()
}

pub fn random_series(shape: GridShape, nt: usize, rng: &mut ChaCha8Rng) -> TimeSeriesVolume {
    let s = GridShape::with_time(shape.nx, shape.ny, shape.nz, nt).unwrap();
    let data = (0..s.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    TimeSeriesVolume::new(s, data).unwrap()
}

/// Field with components uniform in `(-amp, amp)`: evaluation points sit off
/// the lattice, where trilinear sampling is smooth.
pub fn random_field(shape: GridShape, amp: f64, rng: &mut ChaCha8Rng) -> DisplacementField {
    DisplacementField::from_fn(shape, |_| [0, 1, 2].map(|_| rng.random_range(-amp..amp))).unwrap()
}

/// Random 8³ structural pair and 8³×12 functional pair on the same grid.
pub fn random_problem(seed: u64) -> RegistrationProblem {
    let mut r = rng(seed);
    let shape = GridShape::new(8, 8, 8).unwrap();
    RegistrationProblem::new(
        random_scalar(shape, &mut r),
        random_scalar(shape, &mut r),
        random_series(shape, 12, &mut r),
        random_series(shape, 12, &mut r),
        1,
    )
    .unwrap()
}

/// Same functional pair with both structural images zeroed, which removes the
/// structural term and its gradient entirely.
pub fn without_structure(p: &RegistrationProblem) -> RegistrationProblem {
    let zero = ScalarVolume::zeros(p.t1_shape());
    RegistrationProblem::new(zero.clone(), zero, p.fixed_fmri.clone(), p.moving_fmri.clone(), p.factor).unwrap()
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub components: usize,
    pub passing: usize,
    pub worst: f64,
    pub max_abs_grad: f64,
}

impl GradCheck {
    pub fn fraction(&self) -> f64 {
        self.passing as f64 / self.components as f64
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Analytic gradient against central differences with the library step.
pub fn grad_check(
    p: &RegistrationProblem,
    weights: LossWeights,
    cfg: &FcConfig,
    field: &DisplacementField,
    tol: f64,
) -> GradCheck {
    grad_check_with_step(p, weights, cfg, field, tol, FD_STEP)
}

pub fn grad_check_with_step(
    p: &RegistrationProblem,
    weights: LossWeights,
    cfg: &FcConfig,
    field: &DisplacementField,
    tol: f64,
    step: f64,
) -> GradCheck {
    let obj = Objective::new(p, weights, cfg).unwrap();
    let (_, analytic) = obj.gradient(field).unwrap();
    let numeric = obj.finite_difference_gradient(field, step).unwrap();
    let mut out = GradCheck { components: 0, passing: 0, worst: 0.0, max_abs_grad: 0.0 };
    for (a, n) in analytic.iter().flatten().zip(numeric.iter().flatten()) {
        let e = rel_err(*a, *n);
        out.components += 1;
        out.passing += (e < tol) as usize;
        out.worst = out.worst.max(e);
        out.max_abs_grad = out.max_abs_grad.max(a.abs());
    }
    out
}
