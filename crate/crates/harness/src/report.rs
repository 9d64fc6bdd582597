//! CSV schemas for campaign output.
//!
//! `results.csv` holds one [`ResultRow`] per (run, iteration) and is
//! append-only within a campaign; `summary.csv` holds one [`SummaryRow`]
//! per (service, noise level) cell group, with the noise statistics
//! recomputed from the result rows rather than echoed from the
//! calibration targets.

use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

/// One identification iteration of one run.
#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
pub struct ResultRow {
    pub service: String,
    pub noise_level: f64,
    /// Run index within the cell, starting at 0.
    pub run: usize,
    /// 1-based iteration number within the run.
    pub iteration: usize,
    /// Pages in this iteration's target sample.
    pub target_sample_pages: usize,
    /// Pages in this iteration's control sample.
    pub control_sample_pages: usize,
    /// Running-intersection size after this iteration.
    pub refined_pages: usize,
    /// Accumulated candidate multiset size (sum of multiplicities).
    pub candidate_multiplicity: u64,
    /// Pages ranked at least as likely as the known target page.
    pub top_set_pages: usize,
    /// Did concurrent traffic hit the target during the control window?
    pub x_noise: bool,
    /// First iteration at which this run's top set fit the convergence
    /// threshold; empty for runs that never converged. Identical on
    /// every row of a run.
    pub converged_at: Option<usize>,
    /// Attacker requests issued so far in this run (two per iteration).
    pub requests_issued: u64,
}

/// Per-cell aggregate, one row per (service, noise level).
#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
pub struct SummaryRow {
    pub service: String,
    pub noise_level: f64,
    pub runs: usize,
    pub converged_runs: usize,
    /// Mean of `converged_at` over the runs that converged.
    pub mean_iterations_to_convergence: Option<f64>,
    /// Wall-clock figures depend on real service latency, which the
    /// simulator deliberately does not model.
    pub time_to_convergence: String,
    /// Fraction of iterations whose control window was contaminated,
    /// measured from the result rows.
    pub x_noise_rate: f64,
    /// Mean target-sample size in pages, measured from the result rows.
    pub mean_recording_pages: f64,
    /// Mean extracted-frame fraction over the cell's extraction runs;
    /// empty in identification-only campaigns.
    pub extraction_coverage: Option<f64>,
}

/// The fixed text used wherever a hardware-bound seconds figure would
/// appear.
pub const TIME_NOT_MODELED: &str = "n/a (hardware-dependent)";

/// Column order of `results.csv`. Headers are written explicitly so an
/// empty table still carries its schema; the tests pin these names to
/// the struct fields.
pub const RESULT_COLUMNS: [&str; 12] = [
    "service",
    "noise_level",
    "run",
    "iteration",
    "target_sample_pages",
    "control_sample_pages",
    "refined_pages",
    "candidate_multiplicity",
    "top_set_pages",
    "x_noise",
    "converged_at",
    "requests_issued",
];

pub const SUMMARY_COLUMNS: [&str; 9] = [
    "service",
    "noise_level",
    "runs",
    "converged_runs",
    "mean_iterations_to_convergence",
    "time_to_convergence",
    "x_noise_rate",
    "mean_recording_pages",
    "extraction_coverage",
];

pub const EXTRACTION_COLUMNS: [&str; 4] = ["frame", "state", "confidence", "bytes_recovered"];

/// Rounds to four decimals so aggregate columns stay readable without
/// losing determinism.
pub fn round4(x: f64) -> f64 {
    (x * 10_000.0).round() / 10_000.0
}

fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let file = File::create(path)
        .with_context(|| format!("creating {}", path.display()))?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(BufWriter::new(file));
    w.write_record(header)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    write_csv(path, &RESULT_COLUMNS, rows)
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    write_csv(path, &SUMMARY_COLUMNS, rows)
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for row in r.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}

/// Per-frame extraction record for `extraction.csv`.
#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
pub struct ExtractionRow {
    pub frame: usize,
    /// `extracted`, `pending`, or `unreadable`.
    pub state: String,
    /// `full` or `head-only` for extracted frames, empty otherwise.
    pub confidence: Option<String>,
    pub bytes_recovered: usize,
}

pub fn write_extraction(path: &Path, rows: &[ExtractionRow]) -> Result<()> {
    write_csv(path, &EXTRACTION_COLUMNS, rows)
}

/// Writes the recovered plaintext as one flat image, frames ascending,
/// with holes left zero-filled so offsets stay frame-aligned.
pub fn write_memory_image(
    path: &Path,
    frames: impl Iterator<Item = (usize, Vec<u8>)>,
    frame_count: usize,
    page_size: usize,
) -> Result<()> {
    let mut image = vec![0u8; frame_count * page_size];
    for (frame, bytes) in frames {
        let start = frame * page_size;
        image[start..start + bytes.len()].copy_from_slice(&bytes);
    }
    let file = File::create(path)
        .with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    w.write_all(&image)?;
    w.flush()?;
    Ok(())
}
