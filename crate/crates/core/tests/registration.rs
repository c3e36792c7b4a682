mod common;

use fcreg::*;

fn small_phantom(seed: u64) -> Phantom {
    make_phantom(&PhantomSpec { size: [16, 16, 16], timepoints: 12, seed, max_displacement: 2.0, ..Default::default() })
        .unwrap()
}

fn problem(p: &Phantom) -> RegistrationProblem {
    RegistrationProblem::new(p.fixed_t1.clone(), p.moving_t1.clone(), p.fixed_fmri.clone(), p.moving_fmri.clone(), 1)
        .unwrap()
}

fn cfg() -> FcConfig {
    FcConfig::with_w(5)
}

#[test]
fn zero_iterations_returns_zero_field() {
    let p = small_phantom(1);
    let opt = OptimizerConfig { iterations: 0, ..Default::default() };
    let out = register(&problem(&p), &LossWeights::default(), &cfg(), &opt).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(out.field, DisplacementField::zeros(p.fixed_t1.shape()));
}

#[test]
fn registration_reduces_loss_and_endpoint_error() {
    let p = small_phantom(2);
    let prob = problem(&p);
    let gamma = 0.01 / prob.t1_shape().voxels() as f64;
    let opt = OptimizerConfig { learning_rate: 0.05, iterations: 150, ..Default::default() };
    let out = register(&prob, &LossWeights { lambda: 0.01, gamma }, &cfg(), &opt).unwrap();
    let first = out.history.first().unwrap().total;
    let last = out.history.last().unwrap().total;
    assert!(last < 0.9 * first, "{first} -> {last}");
    let err = |u: &DisplacementField| {
        let d: Vec<f64> = u
            .vectors()
            .iter()
            .zip(p.truth.vectors())
            .map(|(a, b)| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>().sqrt())
            .collect();
        d.iter().zip(p.mask.inside()).filter(|(_, &m)| m).map(|(e, _)| e).sum::<f64>() / p.mask.count() as f64
    };
    assert!(err(&out.field) < err(&DisplacementField::zeros(p.truth.shape())));
}

#[test]
fn registration_is_deterministic() {
    let p = small_phantom(3);
    let prob = problem(&p);
    let opt = OptimizerConfig { learning_rate: 0.05, iterations: 10, ..Default::default() };
    let a = register(&prob, &LossWeights::default(), &cfg(), &opt).unwrap();
    let b = register(&prob, &LossWeights::default(), &cfg(), &opt).unwrap();
    assert_eq!(a.field, b.field);
    assert_eq!(a.history, b.history);
}

#[test]
fn finite_difference_mode_runs_with_hard_bins() {
    let p = make_phantom(&PhantomSpec { size: [8, 8, 8], timepoints: 10, seed: 4, max_displacement: 1.0, ..Default::default() })
        .unwrap();
    let opt = OptimizerConfig { learning_rate: 0.05, iterations: 2, grad_mode: GradMode::FiniteDifference, ..Default::default() };
    let out = register(&problem(&p), &LossWeights::default(), &FcConfig::with_w(3).hard(), &opt).unwrap();
    assert_eq!(out.history.len(), 2);
    let analytic = OptimizerConfig { grad_mode: GradMode::Analytic, ..opt };
    assert!(matches!(
        register(&problem(&p), &LossWeights::default(), &FcConfig::with_w(3).hard(), &analytic),
        Err(Error::NonDifferentiable)
    ));
}

#[test]
fn factor_three_problem_validates_grids() {
    let p = make_phantom(&PhantomSpec { size: [12, 12, 12], timepoints: 10, seed: 5, max_displacement: 1.0, ..Default::default() })
        .unwrap();
    let coarse = GridShape::with_time(4, 4, 4, 10).unwrap();
    let series = |seed| common::random_series(coarse.spatial(), 10, &mut common::rng(seed));
    let ok = RegistrationProblem::new(p.fixed_t1.clone(), p.moving_t1.clone(), series(1), series(2), 3).unwrap();
    let opt = OptimizerConfig { learning_rate: 0.05, iterations: 3, ..Default::default() };
    let out = register(&ok, &LossWeights::default(), &FcConfig::with_w(3), &opt).unwrap();
    assert_eq!(out.field.shape(), p.fixed_t1.shape());
    assert!(RegistrationProblem::new(p.fixed_t1.clone(), p.moving_t1.clone(), series(1), series(2), 2).is_err());
}

#[test]
fn phantom_labels_overlap_below_one_when_displaced() {
    let p = make_phantom(&PhantomSpec { size: [24, 24, 24], max_displacement: 2.0, seed: 11, ..Default::default() }).unwrap();
    let labels: Vec<u32> = p.labels_fixed.distinct().into_iter().filter(|&k| k != 0).collect();
    assert!(dice(&p.labels_fixed, &p.labels_moving, &labels).unwrap().mean < 1.0);
}
