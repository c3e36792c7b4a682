//! Files, configuration, phantoms and the command-line driver.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::evalsuite::{DiceReport, ThresholdReport};
use crate::funcconn::FcHistogram;
use crate::objective::LossBreakdown;

pub mod cli;
pub mod config;
pub mod nifti;
pub mod phantom;

/// Worker-count override; unset or 0 means hardware parallelism.
pub const THREADS_ENV: &str = "FCREG_THREADS";

/// Writes to a sibling temporary file and renames it over `path`, so readers
/// never observe a partially written output.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path.file_name().ok_or_else(|| {
        Error::io(path, std::io::Error::new(std::io::ErrorKind::InvalidInput, "not a file path"))
    })?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = std::fs::File::create(&tmp)
        .and_then(|mut f| {
            f.write_all(bytes)?;
            f.sync_all()
        })
        .and_then(|_| std::fs::rename(&tmp, path));
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

/// Worker count from [`THREADS_ENV`], if set to a positive integer.
pub fn configured_threads() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(0) => Ok(None),
            Ok(n) => Ok(Some(n)),
            Err(_) => Err(Error::InvalidConfig(format!("{THREADS_ENV} must be a non-negative integer, got {s:?}"))),
        },
    }
}

/// One `key=value` line per iteration.
pub fn format_loss_log(history: &[LossBreakdown]) -> String {
    let mut out = String::new();
    for (i, l) in history.iter().enumerate() {
        out.push_str(&format!(
            "iter={i} t1_sim={:e} f_sim={:e} smooth={:e} total={:e}\n",
            l.t1_sim, l.f_sim, l.smooth, l.total
        ));
    }
    out
}

pub fn format_dice(report: &DiceReport) -> String {
    let mut out = String::new();
    for (label, score) in &report.per_label {
        match score {
            Some(d) => out.push_str(&format!("label={label} dice={d}\n")),
            None => out.push_str(&format!("label={label} dice=skipped\n")),
        }
    }
    out.push_str(&format!("mean={}\n", report.mean));
    out
}

pub fn format_threshold(report: &ThresholdReport, subjects: usize) -> String {
    format!(
        "threshold={} count={} peak={} subjects={subjects}\n",
        report.threshold, report.count, report.peak
    )
}

/// One line per cube: centre, bounds, voxel count and bin heights.
pub fn format_fc_histograms(hists: &[FcHistogram], cubes: &[crate::funcconn::Cube]) -> String {
    let mut out = String::new();
    for (i, (h, c)) in hists.iter().zip(cubes).enumerate() {
        let counts: Vec<String> = h.counts.iter().map(|v| v.to_string()).collect();
        out.push_str(&format!(
            "cube={i} center={},{},{} lo={},{},{} hi={},{},{} voxels={} counts={}\n",
            c.center.x,
            c.center.y,
            c.center.z,
            c.lo[0],
            c.lo[1],
            c.lo[2],
            c.hi[0],
            c.hi[1],
            c.hi[2],
            c.voxel_count(),
            counts.join(",")
        ));
    }
    out
}
