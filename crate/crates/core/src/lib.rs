//! Deformable registration of paired structural (T1w) and functional (fMRI)
//! volumes.
//!
//! A dense displacement field `u` on the structural grid is optimised directly
//! with Adam to minimise
//!
//! ```text
//! L(u) = MSE(F_t1, M_t1 ∘ u) + λ · L_fc(F_fmri, M_fmri ∘ S(u)) + γ · Σ |∇u|²
//! ```
//!
//! where `L_fc` compares local functional-connectivity histograms through the
//! Bhattacharyya distance and `S` block-averages the field onto the functional
//! grid. Warping samples the moving image at `p - u(p)` with trilinear
//! interpolation and zero padding.
//!
//! ```
//! use fcreg::{DisplacementField, GridShape, ScalarVolume, warp_scalar};
//!
//! let shape = GridShape::new(4, 4, 4)?;
//! let m = ScalarVolume::from_fn(shape, |ix| ix.x as f64)?;
//! let shifted = warp_scalar(&m, &DisplacementField::constant(shape, [1.0, 0.0, 0.0])?)?;
//! assert_eq!(shifted.data()[shape.offset(2, 0, 0)], 1.0);
//! # Ok::<(), fcreg::Error>(())
//! ```
//!
//! Module map:
//!
//! - [`volume`]: grids, scalar/time-series/label volumes, masks, fields.
//! - [`warp`]: trilinear sampling, warping, field downsampling.
//! - [`funcconn`]: Pearson correlation, local FC histograms, Bhattacharyya distance.
//! - [`objective`]: the loss, its analytic gradient and the Adam driver.
//! - [`evalsuite`]: Dice, z-scores, one-sample t-maps, threshold counts.
//! - [`pipeline`]: NIfTI I/O, TOML configuration, synthetic phantoms, CLI.

mod error;
mod util;

pub mod evalsuite;
pub mod funcconn;
pub mod objective;
pub mod pipeline;
pub mod volume;
pub mod warp;

pub use error::{Error, Result};
pub use evalsuite::{dice, one_sample_tmap, overlap_count, threshold_report, zscore_map, DiceReport, TMap, ThresholdReport};
pub use funcconn::{bc_distance, fc_histogram, fc_loss, local_fc_map, pearson, FcConfig, FcHistogram};
pub use objective::{
    loss_gradient, mse_loss, register, smoothness_loss, total_loss, GradMode, LossBreakdown, LossWeights,
    OptimizerConfig, Registration, RegistrationProblem,
};
pub use pipeline::config::{load_config, RunConfig};
pub use pipeline::nifti::{read_nifti, write_nifti, NiftiError, NiftiVolume};
pub use pipeline::phantom::{make_phantom, Phantom, PhantomSpec};
pub use volume::{
    normalize_intensity, time_series_at, volume_stats, BrainMask, DisplacementField, GridShape, LabelVolume,
    ScalarVolume, TimeSeriesVolume, VoxelIndex,
};
pub use warp::{downsample_field, trilinear_gradient, trilinear_sample, warp_labels, warp_scalar, warp_time_series, SamplePoint};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/volumes.md")]
    mod volumes {}
    #[doc = include_str!("../../../book/src/funcconn.md")]
    mod funcconn {}
    #[doc = include_str!("../../../book/src/objective.md")]
    mod objective {}
    #[doc = include_str!("../../../book/src/registration.md")]
    mod registration {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/files.md")]
    mod files {}
}
