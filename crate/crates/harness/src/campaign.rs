//! Seeded identification/extraction campaigns over a noise-level grid.
//!
//! A campaign executes `runs` independent attack runs per noise level.
//! Each run drives its own simulator instance to `max_iterations`
//! identification iterations (running past convergence keeps the
//! convergence curves full-length), then optionally extracts a sample
//! of guest frames. Cells execute in parallel; their seeds derive from
//! (base seed, noise level, run index), so the result table is
//! identical no matter how the cells are scheduled.

use std::fmt;
use std::str::FromStr;

use anyhow::{anyhow, Result};
use rayon::prelude::*;

use slatsim_core::calibrate::{calibrate_to_table, CalibrateOptions};
use slatsim_core::extract::{self, ExtractOptions, ExtractionOutcome};
use slatsim_core::guest::SimInstance;
use slatsim_core::identify::{
    ConvergenceRule, ConvergenceTracker, IdentifySession, SessionConfig,
};
use slatsim_core::scenario::ScenarioSpec;
use slatsim_core::seed;

use crate::report::{round4, ResultRow, SummaryRow, TIME_NOT_MODELED};

/// Ranking entries kept on a [`CellOutcome`] for display.
pub const RANKING_HEAD: usize = 16;

/// What each run does after identification.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Identification only.
    Identify,
    /// Identification, then extraction of a frame sample.
    Extract,
    /// Alias of `Extract`: the complete attack path.
    Full,
    /// As `Full`, with the integrity countermeasure forced on.
    Countermeasure,
}

impl Mode {
    pub fn extracts(self) -> bool {
        !matches!(self, Mode::Identify)
    }

    fn integrity_override(self) -> Option<bool> {
        match self {
            Mode::Countermeasure => Some(true),
            _ => None,
        }
    }
}

impl FromStr for Mode {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identify" => Ok(Mode::Identify),
            "extract" => Ok(Mode::Extract),
            "full" => Ok(Mode::Full),
            "countermeasure" => Ok(Mode::Countermeasure),
            other => Err(anyhow!(
                "unknown mode {other:?}; expected identify, extract, full or countermeasure"
            )),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Identify => "identify",
            Mode::Extract => "extract",
            Mode::Full => "full",
            Mode::Countermeasure => "countermeasure",
        })
    }
}

#[derive(Clone, Debug)]
pub struct CampaignConfig {
    /// Noise levels to sweep; empty means "every level in the
    /// scenario's calibration table".
    pub noise_levels: Vec<f64>,
    pub runs: usize,
    pub max_iterations: usize,
    /// Top-set size at or below which a run counts as converged.
    pub convergence_threshold: usize,
    pub base_seed: u64,
    pub mode: Mode,
    /// Frames extracted per run in extraction modes; 0 extracts the
    /// whole guest.
    pub extract_frames: usize,
    /// When false, noise levels are applied directly without fitting
    /// the scenario to its calibration table first.
    pub calibrate: bool,
    /// Enable the integrity countermeasure even outside
    /// [`Mode::Countermeasure`] (identification under a defended
    /// hypervisor still works; it never tampers with mappings).
    pub force_integrity: bool,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            noise_levels: Vec::new(),
            runs: 8,
            max_iterations: 100,
            convergence_threshold: 5,
            base_seed: 0,
            mode: Mode::Identify,
            extract_frames: 64,
            calibrate: true,
            force_integrity: false,
        }
    }
}

/// How one noise level's scenario parameters were arrived at.
#[derive(Clone, Debug)]
pub enum CalibrationNote {
    /// Fitted to the scenario's calibration table; the stats are the
    /// fit-time verification measurement.
    Fitted {
        noise_level: f64,
        x_noise_rate: f64,
        mean_recording_pages: f64,
        rounds: usize,
    },
    /// Level applied directly (no table entry, or calibration off).
    Direct { noise_level: f64, reason: String },
    /// Calibration failed; the level was applied directly instead.
    Failed { noise_level: f64, error: String },
}

/// One entry of a run's final candidate ranking, in display form.
#[derive(Clone, Debug)]
pub struct RankedPage {
    pub gpa: usize,
    /// Exact rational, e.g. `2/3`.
    pub probability: String,
    pub last_touch_rank: usize,
}

/// Everything produced by one (noise level, run) cell.
#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub service: String,
    pub noise_level: f64,
    pub run: usize,
    pub rows: Vec<ResultRow>,
    pub converged_at: Option<usize>,
    /// The run's final ranking puts the true target page first. Checked
    /// at the end of the run, not at the convergence instant: reaching a
    /// small top set and pulling decisively ahead of the survivors in it
    /// take a few more accumulation rounds each.
    pub ranked_target_first: bool,
    /// Head of the run's final ranking (at most [`RANKING_HEAD`]
    /// entries), for display.
    pub final_ranking: Vec<RankedPage>,
    pub extraction_coverage: Option<f64>,
    /// `complete`, `stopped: …` or `impossible: …` for extraction runs.
    pub extraction_outcome: Option<String>,
    /// A run-aborting failure; the campaign records it and continues.
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct CampaignOutput {
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
    pub cells: Vec<CellOutcome>,
    pub calibration: Vec<CalibrationNote>,
    /// Human-readable descriptions of every failed cell.
    pub failures: Vec<String>,
}

/// Runs the full grid. Only scenario-level problems (an invalid spec,
/// an empty level list) abort the campaign; per-cell failures land in
/// [`CampaignOutput::failures`].
pub fn run_campaign(spec: &ScenarioSpec, config: &CampaignConfig) -> Result<CampaignOutput> {
    let levels: Vec<f64> = if config.noise_levels.is_empty() {
        spec.calibration.targets.iter().map(|t| t.noise_level).collect()
    } else {
        config.noise_levels.clone()
    };
    if levels.is_empty() {
        return Err(anyhow!(
            "no noise levels: pass some explicitly or add a [calibration] table to the scenario"
        ));
    }
    if config.runs == 0 || config.max_iterations == 0 {
        return Err(anyhow!("runs and max iterations must both be at least 1"));
    }

    let mut calibration = Vec::new();
    let mut setups = Vec::new();
    for &level in &levels {
        let (fitted, note) = prepare_level(spec, level, config.base_seed, config.calibrate);
        calibration.push(note);
        setups.push((level, fitted));
    }

    let cell_indexes: Vec<(usize, usize)> = (0..setups.len())
        .flat_map(|li| (0..config.runs).map(move |run| (li, run)))
        .collect();
    let cells: Vec<CellOutcome> = cell_indexes
        .par_iter()
        .map(|&(li, run)| run_cell(&setups[li].1, setups[li].0, run, config))
        .collect();

    let mut rows = Vec::new();
    for cell in &cells {
        rows.extend(cell.rows.iter().cloned());
    }
    let summary = summarize(&levels, &cells, config);
    let failures = cells
        .iter()
        .filter_map(|c| {
            c.error.as_ref().map(|e| {
                format!(
                    "{} noise={} run={}: {e}",
                    c.service, c.noise_level, c.run
                )
            })
        })
        .collect();

    Ok(CampaignOutput {
        rows,
        summary,
        cells,
        calibration,
        failures,
    })
}

/// Produces the scenario actually run at `level`: fitted to the
/// scenario's calibration table when an entry exists (and fitting is
/// on), the level applied directly otherwise. Calibration failure falls
/// back to the direct spec so the campaign can still run and record it.
pub fn prepare_level(
    spec: &ScenarioSpec,
    level: f64,
    base_seed: u64,
    calibrate: bool,
) -> (ScenarioSpec, CalibrationNote) {
    let mut direct = spec.clone();
    direct.noise.level = level;

    if !calibrate {
        return (
            direct,
            CalibrationNote::Direct {
                noise_level: level,
                reason: "calibration disabled".into(),
            },
        );
    }
    if spec.calibration_target(level).is_none() {
        return (
            direct,
            CalibrationNote::Direct {
                noise_level: level,
                reason: "no calibration target for this level".into(),
            },
        );
    }

    let opts = CalibrateOptions {
        seed: seed::derive(base_seed, &[0xCA1B, level.to_bits()]),
        ..CalibrateOptions::default()
    };
    match calibrate_to_table(spec, level, &opts) {
        Ok(outcome) => {
            let note = CalibrationNote::Fitted {
                noise_level: level,
                x_noise_rate: outcome.achieved.x_noise_rate,
                mean_recording_pages: outcome.achieved.mean_recording_pages,
                rounds: outcome.rounds,
            };
            (outcome.spec, note)
        }
        Err(e) => (
            direct,
            CalibrationNote::Failed {
                noise_level: level,
                error: e.to_string(),
            },
        ),
    }
}

fn run_cell(
    fitted: &ScenarioSpec,
    level: f64,
    run: usize,
    config: &CampaignConfig,
) -> CellOutcome {
    let service = fitted.target.service.clone();
    let mut cell = CellOutcome {
        service: service.clone(),
        noise_level: level,
        run,
        rows: Vec::new(),
        converged_at: None,
        ranked_target_first: false,
        final_ranking: Vec::new(),
        extraction_coverage: None,
        extraction_outcome: None,
        error: None,
    };

    let run_seed = seed::derive(config.base_seed, &[0x5EED, level.to_bits(), run as u64]);
    let integrity = config
        .mode
        .integrity_override()
        .or(config.force_integrity.then_some(true));
    let mut sim = match fitted.build_seeded(run_seed, integrity) {
        Ok(sim) => sim,
        Err(e) => {
            cell.error = Some(e.to_string());
            return cell;
        }
    };
    let eval_target = match sim.ground_truth_resource_pages(&fitted.target.resource) {
        Ok(pages) => pages[0],
        Err(e) => {
            cell.error = Some(e.to_string());
            return cell;
        }
    };

    let mut session = IdentifySession::new(SessionConfig {
        service: service.clone(),
        target_resource: fitted.target.resource.clone(),
        control_resource: fitted.target.control.clone(),
        eval_target: Some(eval_target),
    });
    let mut tracker = ConvergenceTracker::new(ConvergenceRule::TopSetWithin {
        threshold: config.convergence_threshold,
    });

    for _ in 0..config.max_iterations {
        let record = match session.step(&mut sim) {
            Ok(record) => record,
            Err(e) => {
                cell.error = Some(e.to_string());
                break;
            }
        };
        tracker.observe(record.iteration, record.top_size, &session.ranking());
        cell.rows.push(ResultRow {
            service: service.clone(),
            noise_level: level,
            run,
            iteration: record.iteration,
            target_sample_pages: record.target_sample_pages,
            control_sample_pages: record.control_sample_pages,
            refined_pages: record.refined_pages,
            candidate_multiplicity: record.candidate_total,
            top_set_pages: record.top_size.unwrap_or(record.refined_pages),
            x_noise: record.x_noise,
            converged_at: None,
            requests_issued: session.requests_issued(),
        });
    }
    cell.converged_at = tracker.converged_at();
    for row in &mut cell.rows {
        row.converged_at = cell.converged_at;
    }
    let ranking = session.ranking();
    cell.ranked_target_first = ranking.entries().first().map(|e| e.gpa) == Some(eval_target);
    cell.final_ranking = ranking
        .entries()
        .iter()
        .take(RANKING_HEAD)
        .map(|e| RankedPage {
            gpa: e.gpa.0,
            probability: e.probability.to_string(),
            last_touch_rank: e.last_touch,
        })
        .collect();

    if config.mode.extracts() && cell.error.is_none() {
        extract_sample(&mut sim, &session, fitted, config, &mut cell);
    }
    cell
}

/// Extraction step of one cell: plan from the run's final ranking, then
/// pull the first `extract_frames` guest frames.
fn extract_sample(
    sim: &mut SimInstance,
    session: &IdentifySession,
    fitted: &ScenarioSpec,
    config: &CampaignConfig,
    cell: &mut CellOutcome,
) {
    let page_size = sim.machine().page_size();
    let resource_bytes = match sim.resource_size(&fitted.target.resource) {
        Ok(size) => size,
        Err(e) => {
            cell.error = Some(e.to_string());
            return;
        }
    };
    let plan = match extract::plan(&session.ranking(), resource_bytes, page_size) {
        Ok(plan) => plan,
        Err(e) => {
            cell.error = Some(e.to_string());
            return;
        }
    };
    let mut frames = sim.machine().original_frames();
    if config.extract_frames > 0 {
        frames.truncate(config.extract_frames);
    }
    match extract::extract_all(sim, plan, session.config(), &frames, &ExtractOptions::default()) {
        Ok(report) => {
            cell.extraction_coverage = Some(report.coverage);
            cell.extraction_outcome = Some(match &report.outcome {
                ExtractionOutcome::Complete => "complete".into(),
                ExtractionOutcome::Stopped { reason } => format!("stopped: {reason}"),
                ExtractionOutcome::Impossible { reason } => format!("impossible: {reason}"),
            });
        }
        Err(e) => cell.error = Some(e.to_string()),
    }
}

/// Aggregates one summary row per noise level. The noise statistics are
/// recomputed from the result rows so the summary reports what the
/// campaign actually experienced, not what calibration aimed for.
fn summarize(levels: &[f64], cells: &[CellOutcome], config: &CampaignConfig) -> Vec<SummaryRow> {
    levels
        .iter()
        .map(|&level| {
            let level_cells: Vec<&CellOutcome> =
                cells.iter().filter(|c| c.noise_level == level).collect();
            let service = level_cells
                .first()
                .map(|c| c.service.clone())
                .unwrap_or_default();
            let rows: Vec<&ResultRow> =
                level_cells.iter().flat_map(|c| c.rows.iter()).collect();

            let converged: Vec<usize> =
                level_cells.iter().filter_map(|c| c.converged_at).collect();
            let mean_convergence = (!converged.is_empty()).then(|| {
                round4(converged.iter().sum::<usize>() as f64 / converged.len() as f64)
            });
            let x_noise_rate = if rows.is_empty() {
                0.0
            } else {
                rows.iter().filter(|r| r.x_noise).count() as f64 / rows.len() as f64
            };
            let mean_recording = if rows.is_empty() {
                0.0
            } else {
                rows.iter().map(|r| r.target_sample_pages as f64).sum::<f64>()
                    / rows.len() as f64
            };
            let coverages: Vec<f64> = level_cells
                .iter()
                .filter_map(|c| c.extraction_coverage)
                .collect();
            let coverage = (!coverages.is_empty())
                .then(|| round4(coverages.iter().sum::<f64>() / coverages.len() as f64));

            SummaryRow {
                service,
                noise_level: level,
                runs: config.runs,
                converged_runs: converged.len(),
                mean_iterations_to_convergence: mean_convergence,
                time_to_convergence: TIME_NOT_MODELED.into(),
                x_noise_rate: round4(x_noise_rate),
                mean_recording_pages: round4(mean_recording),
                extraction_coverage: coverage,
            }
        })
        .collect()
}
