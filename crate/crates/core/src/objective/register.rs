use serde::{Deserialize, Serialize};

use super::{check_differentiable, Adam, LossBreakdown, LossWeights, Objective, RegistrationProblem, FD_STEP};
use crate::error::{Error, Result};
use crate::funcconn::FcConfig;
use crate::volume::DisplacementField;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    Analytic,
    FiniteDifference,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Recorded with every run. The optimisation itself draws no random numbers.
    pub seed: u64,
    pub grad_mode: GradMode,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-4,
            iterations: 300,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            grad_mode: GradMode::Analytic,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidConfig(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            return Err(Error::InvalidConfig(format!("adam_eps must be > 0, got {}", self.adam_eps)));
        }
        Ok(())
    }
}

/// Result of [`register`]: the final field and the loss seen at the start of
/// every iteration.
#[derive(Clone, Debug)]
pub struct Registration {
    pub field: DisplacementField,
    pub history: Vec<LossBreakdown>,
}

/// Minimises the objective over the displacement field with Adam, starting
/// from zero displacement.
pub fn register(
    problem: &RegistrationProblem,
    weights: &LossWeights,
    cfg: &FcConfig,
    opt: &OptimizerConfig,
) -> Result<Registration> {
    opt.validate()?;
    check_differentiable(weights, cfg, opt.grad_mode)?;
    let objective = Objective::new(problem, *weights, cfg)?;
    let shape = problem.t1_shape();
    let mut params = vec![0.0; shape.voxels() * 3];
    let mut adam = Adam::new(params.len(), opt.learning_rate, opt.beta1, opt.beta2, opt.adam_eps);
    let mut history = Vec::with_capacity(opt.iterations);

    for iteration in 0..opt.iterations {
        let field = DisplacementField::from_flat(shape, &params)?;
        let (loss, grad) = match opt.grad_mode {
            GradMode::Analytic => objective.gradient(&field)?,
            GradMode::FiniteDifference => {
                (objective.evaluate(&field)?, objective.finite_difference_gradient(&field, FD_STEP)?)
            }
        };
        if !loss.total.is_finite() {
            return Err(Error::Diverged { iteration, loss: loss.total });
        }
        let flat: Vec<f64> = grad.into_iter().flatten().collect();
        if let Some(bad) = flat.iter().find(|g| !g.is_finite()) {
            return Err(Error::Diverged { iteration, loss: *bad });
        }
        history.push(loss);
        adam.step(&mut params, &flat);
    }
    let field = DisplacementField::from_flat(shape, &params).map_err(|_| Error::Diverged {
        iteration: opt.iterations,
        loss: f64::NAN,
    })?;
    Ok(Registration { field, history })
}
