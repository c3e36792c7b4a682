//! `fcreg` command-line driver.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use super::config::{load_config, RunConfig};
use super::nifti::{read_field, read_labels, read_nifti, read_scalar, read_time_series, write_nifti, NiftiVolume};
use super::phantom::{make_phantom, PhantomSpec};
use super::{configured_threads, format_dice, format_fc_histograms, format_loss_log, format_threshold, write_text};
use crate::error::{Error, Result};
use crate::evalsuite::{dice, one_sample_tmap, threshold_report};
use crate::funcconn::{fc_histograms, CubeGrid, FcConfig};
use crate::objective::{register, RegistrationProblem};
use crate::volume::ScalarVolume;
use crate::warp::{downsample_field, warp_labels, warp_scalar, warp_time_series};

#[derive(Parser, Debug)]
#[command(name = "fcreg", version, about = "Deformable T1w/fMRI registration with a local functional-connectivity term")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom pair with a known deformation.
    Synth(SynthArgs),
    /// Register a moving T1/fMRI pair onto a fixed pair.
    Register(RegisterArgs),
    /// Apply a displacement field to a volume.
    Warp(WarpArgs),
    /// Per-cube local FC histograms (hard bins) of a time series.
    Fcmap(FcmapArgs),
    /// Dice overlap of two label volumes.
    Dice(DiceArgs),
    /// Voxel-wise one-sample t-map across subject maps.
    Tmap(TmapArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// Grid extent as NX,NY,NZ.
    #[arg(long, value_delimiter = ',', default_values_t = [24, 24, 24])]
    size: Vec<usize>,
    #[arg(long, default_value_t = 30)]
    timepoints: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2.0)]
    max_displacement: f64,
    #[arg(long, default_value_t = 8)]
    n_regions: usize,
    #[arg(long, default_value_t = 0.3)]
    noise_std: f64,
    /// Constant structural intensity inside the brain.
    #[arg(long)]
    flat_structure: bool,
}

#[derive(Args, Debug)]
struct RegisterArgs {
    #[arg(long)]
    fixed_t1: PathBuf,
    #[arg(long)]
    moving_t1: PathBuf,
    #[arg(long)]
    fixed_fmri: PathBuf,
    #[arg(long)]
    moving_fmri: PathBuf,
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_field: PathBuf,
    #[arg(long)]
    out_warped_t1: Option<PathBuf>,
    #[arg(long)]
    out_warped_fmri: Option<PathBuf>,
    #[arg(long)]
    loss_log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct WarpArgs {
    #[arg(long)]
    field: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Block-average the field by this factor before warping.
    #[arg(long)]
    downsample: Option<usize>,
}

#[derive(Args, Debug)]
struct FcmapArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 21)]
    w: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DiceArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Labels to score; defaults to every non-zero label in either volume.
    #[arg(long, value_delimiter = ',')]
    labels: Option<Vec<u32>>,
}

#[derive(Args, Debug)]
struct TmapArgs {
    #[arg(long, num_args = 2.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
    /// Report file; printed to stdout when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let outcome = configured_threads().and_then(|threads| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.unwrap_or(0))
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
        pool.install(|| dispatch(cli.command))
    });
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("fcreg: {e}");
            match e {
                Error::Nifti(n) => n.code(),
                _ => 1,
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Register(a) => run_register(a),
        Command::Warp(a) => warp(a),
        Command::Fcmap(a) => fcmap(a),
        Command::Dice(a) => run_dice(a),
        Command::Tmap(a) => tmap(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    if a.size.len() != 3 {
        return Err(Error::InvalidConfig(format!("--size takes NX,NY,NZ, got {} values", a.size.len())));
    }
    let spec = PhantomSpec {
        size: [a.size[0], a.size[1], a.size[2]],
        timepoints: a.timepoints,
        seed: a.seed,
        max_displacement: a.max_displacement,
        n_regions: a.n_regions,
        noise_std: a.noise_std,
        flat_structure: a.flat_structure,
    };
    let p = make_phantom(&spec)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let mask_data = p.mask.inside().iter().map(|&b| b as u8 as f64).collect();
    let mask = ScalarVolume::new(p.mask.shape(), mask_data)?;
    let outputs = [
        ("fixed_t1.nii", NiftiVolume::Scalar(p.fixed_t1)),
        ("moving_t1.nii", NiftiVolume::Scalar(p.moving_t1)),
        ("fixed_fmri.nii", NiftiVolume::TimeSeries(p.fixed_fmri)),
        ("moving_fmri.nii", NiftiVolume::TimeSeries(p.moving_fmri)),
        ("labels_fixed.nii", NiftiVolume::Labels(p.labels_fixed)),
        ("labels_moving.nii", NiftiVolume::Labels(p.labels_moving)),
        ("truth_field.nii", NiftiVolume::Field(p.truth)),
        ("mask.nii", NiftiVolume::Scalar(mask)),
    ];
    for (name, v) in &outputs {
        write_nifti(v, a.out_dir.join(name))?;
    }
    Ok(())
}

fn run_register(a: RegisterArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    let problem = RegistrationProblem::new(
        read_scalar(&a.fixed_t1)?,
        read_scalar(&a.moving_t1)?,
        read_time_series(&a.fixed_fmri)?,
        read_time_series(&a.moving_fmri)?,
        cfg.downsample_factor,
    )?;
    let result = register(&problem, &cfg.weights(), &cfg.fc(), &cfg.optimizer())?;
    write_nifti(&NiftiVolume::Field(result.field.clone()), &a.out_field)?;
    if let Some(p) = &a.out_warped_t1 {
        let warped = warp_scalar(&problem.moving_t1, &result.field)?;
        write_nifti(&NiftiVolume::Scalar(warped), p)?;
    }
    if let Some(p) = &a.out_warped_fmri {
        let coarse = downsample_field(&result.field, cfg.downsample_factor)?;
        let warped = warp_time_series(&problem.moving_fmri, &coarse)?;
        write_nifti(&NiftiVolume::TimeSeries(warped), p)?;
    }
    if let Some(p) = &a.loss_log {
        write_text(p, &format_loss_log(&result.history))?;
    }
    Ok(())
}

fn warp(a: WarpArgs) -> Result<()> {
    let mut field = read_field(&a.field)?;
    if let Some(f) = a.downsample {
        field = downsample_field(&field, f)?;
    }
    let out = match read_nifti(&a.input)? {
        NiftiVolume::Scalar(v) => NiftiVolume::Scalar(warp_scalar(&v, &field)?),
        NiftiVolume::TimeSeries(v) => NiftiVolume::TimeSeries(warp_time_series(&v, &field)?),
        NiftiVolume::Labels(l) => NiftiVolume::Labels(warp_labels(&l, &field)?),
        NiftiVolume::Field(_) => {
            return Err(Error::InvalidConfig("warping a displacement field is not supported".into()))
        }
    };
    write_nifti(&out, &a.out)
}

fn fcmap(a: FcmapArgs) -> Result<()> {
    let v = read_time_series(&a.input)?;
    let cfg = FcConfig::with_w(a.w).hard();
    let hists = fc_histograms(&v, &cfg)?;
    let grid = CubeGrid::tile(&v.shape(), cfg.w);
    write_text(&a.out, &format_fc_histograms(&hists, &grid.cubes))
}

fn run_dice(a: DiceArgs) -> Result<()> {
    let la = read_labels(&a.a)?;
    let lb = read_labels(&a.b)?;
    let labels = match a.labels {
        Some(l) => l,
        None => {
            let mut all = la.distinct();
            all.extend(lb.distinct());
            all.sort_unstable();
            all.dedup();
            all.retain(|&k| k != 0);
            all
        }
    };
    print!("{}", format_dice(&dice(&la, &lb, &labels)?));
    Ok(())
}

fn tmap(a: TmapArgs) -> Result<()> {
    let maps = a.inputs.iter().map(read_scalar).collect::<Result<Vec<_>>>()?;
    let tm = one_sample_tmap(&maps, None)?;
    let spacing = maps[0].spacing();
    let out = ScalarVolume::new(tm.shape, tm.t.clone())?.with_spacing(spacing);
    write_nifti(&NiftiVolume::Scalar(out), &a.out)?;
    let text = format_threshold(&threshold_report(&tm, a.threshold), tm.n);
    match &a.report {
        Some(p) => write_text(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
