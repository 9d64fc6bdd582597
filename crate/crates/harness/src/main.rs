//! `slatsim` — command-line front end for the attack model.
//!
//! Subcommands: `calibrate` fits a scenario to its noise targets,
//! `identify` runs one identification session, `extract` runs the full
//! attack against one guest, `campaign` sweeps a noise-level grid,
//! `plot` re-renders convergence curves from a result table, and
//! `demo` walks the two-iteration textbook vector.
//!
//! Every failure path prints a single `error: …` line on stderr and
//! exits nonzero; argument mistakes additionally get clap's usage text.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use slatsim_core::calibrate::{calibrate_to_table, CalibrateOptions};
use slatsim_core::extract::{self, Confidence, ExtractOptions, ExtractionOutcome, FrameState};
use slatsim_core::identify::{
    ConvergenceRule, ConvergenceTracker, IdentificationState, IdentifySession, PageSet,
    SessionConfig,
};
use slatsim_core::mem::{AccessRecording, Gpa};
use slatsim_core::scenario::ScenarioSpec;
use slatsim_core::seed;

use slatsim_harness::campaign::{
    prepare_level, run_campaign, CalibrationNote, CampaignConfig, Mode,
};
use slatsim_harness::plot::{convergence_points, write_convergence_csv, write_convergence_svg};
use slatsim_harness::report::{
    write_extraction, write_memory_image, write_results, write_summary, ExtractionRow,
    TIME_NOT_MODELED,
};

#[derive(Parser)]
#[command(
    name = "slatsim",
    version,
    about = "Deterministic page-remapping attack simulator: noise calibration, \
             identification/extraction campaigns, CSV reports and convergence plots."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit a scenario's free noise parameters to its calibration table.
    Calibrate(CalibrateArgs),
    /// Run one identification session and report the candidate ranking.
    Identify(IdentifyArgs),
    /// Run identification, then extract guest memory through the
    /// identified pages.
    Extract(ExtractArgs),
    /// Sweep noise levels with several runs each; write results.csv,
    /// summary.csv and convergence curves.
    Campaign(CampaignArgs),
    /// Re-render convergence curves from an existing results.csv.
    Plot(PlotArgs),
    /// Walk the two-iteration worked example and print its ranking.
    Demo,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Scenario description file (TOML).
    #[arg(long)]
    scenario: PathBuf,
    /// Noise level whose calibration-table entry to fit against.
    #[arg(long)]
    noise_level: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for the fitted scenario (written as calibrated.toml).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct IdentifyArgs {
    /// Scenario description file (TOML).
    #[arg(long)]
    scenario: PathBuf,
    /// Noise level to run at; defaults to the scenario's own level.
    #[arg(long)]
    noise_level: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Identification iterations to run.
    #[arg(long, default_value_t = 100)]
    iterations: usize,
    /// Top-set size at or below which the run counts as converged.
    #[arg(long, default_value_t = 5)]
    threshold: usize,
    /// Enable the hypervisor's integrity countermeasure.
    #[arg(long)]
    countermeasure: bool,
    /// Apply the noise level directly instead of fitting the scenario's
    /// calibration table first.
    #[arg(long)]
    no_calibrate: bool,
    /// Directory for results.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExtractArgs {
    /// Scenario description file (TOML).
    #[arg(long)]
    scenario: PathBuf,
    /// Noise level to run at; defaults to the scenario's own level.
    #[arg(long)]
    noise_level: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Identification budget before extraction starts.
    #[arg(long, default_value_t = 100)]
    iterations: usize,
    /// Iterations the ranking head must stay unchanged before it is
    /// trusted (the attacker has no ground truth to converge against).
    #[arg(long, default_value_t = 5)]
    patience: usize,
    /// Number of guest frames to extract; 0 means the whole guest.
    #[arg(long, default_value_t = 0)]
    frames: usize,
    /// Enable the hypervisor's integrity countermeasure.
    #[arg(long)]
    countermeasure: bool,
    /// Apply the noise level directly instead of fitting the scenario's
    /// calibration table first.
    #[arg(long)]
    no_calibrate: bool,
    /// Directory for memory.img and extraction.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CampaignArgs {
    /// Scenario description file (TOML).
    #[arg(long)]
    scenario: PathBuf,
    /// Comma-separated noise levels; defaults to every level in the
    /// scenario's calibration table.
    #[arg(long, value_delimiter = ',')]
    noise_levels: Vec<f64>,
    #[arg(long, default_value_t = 8)]
    runs: usize,
    /// Identification iterations per run (runs always go the full
    /// distance so the convergence curves stay complete).
    #[arg(long, default_value_t = 100)]
    iterations: usize,
    /// Top-set size at or below which a run counts as converged.
    #[arg(long, default_value_t = 5)]
    threshold: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// identify, extract, full, or countermeasure.
    #[arg(long, default_value = "identify", value_parser = parse_mode)]
    mode: Mode,
    /// Frames extracted per run in extraction modes; 0 extracts the
    /// whole guest every run.
    #[arg(long, default_value_t = 64)]
    extract_frames: usize,
    /// Apply noise levels directly instead of fitting the scenario's
    /// calibration table first.
    #[arg(long)]
    no_calibrate: bool,
    /// Output directory for results.csv, summary.csv and the
    /// convergence curve files.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    /// A results.csv produced by `campaign` or `identify`.
    #[arg(long)]
    results: PathBuf,
    /// Directory for convergence.csv and convergence.svg.
    #[arg(long)]
    out: PathBuf,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    Mode::from_str(s).map_err(|e| e.to_string())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Calibrate(args) => cmd_calibrate(args),
        Cmd::Identify(args) => cmd_identify(args),
        Cmd::Extract(args) => cmd_extract(args),
        Cmd::Campaign(args) => cmd_campaign(args),
        Cmd::Plot(args) => cmd_plot(args),
        Cmd::Demo => cmd_demo(),
    }
}

fn load_scenario(path: &Path) -> Result<ScenarioSpec> {
    ScenarioSpec::from_path(path).map_err(|e| anyhow!("{e}"))
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)
        .with_context(|| format!("creating output directory {}", path.display()))
}

fn print_calibration_note(note: &CalibrationNote) {
    match note {
        CalibrationNote::Fitted {
            noise_level,
            x_noise_rate,
            mean_recording_pages,
            rounds,
        } => println!(
            "noise {noise_level}: calibrated in {rounds} round(s); measured x-noise \
             {x_noise_rate:.3}, mean recording {mean_recording_pages:.1} pages"
        ),
        CalibrationNote::Direct { noise_level, reason } => {
            println!("noise {noise_level}: applied directly ({reason})");
        }
        CalibrationNote::Failed { noise_level, error } => {
            println!("noise {noise_level}: calibration failed ({error}); applied directly");
        }
    }
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<()> {
    let spec = load_scenario(&args.scenario)?;
    let opts = CalibrateOptions {
        seed: args.seed,
        ..CalibrateOptions::default()
    };
    let outcome = calibrate_to_table(&spec, args.noise_level, &opts)?;
    println!(
        "calibrated {} for noise level {} in {} round(s) over {} recordings",
        args.scenario.display(),
        args.noise_level,
        outcome.rounds,
        outcome.recordings_used
    );
    println!(
        "measured: x-noise rate {:.3}, mean recording {:.1} pages",
        outcome.achieved.x_noise_rate, outcome.achieved.mean_recording_pages
    );
    println!(
        "fitted: window {:.4} s, volatile draw {}..={} for service {:?}",
        outcome.spec.noise.window_seconds,
        fitted_draw(&outcome.spec).0,
        fitted_draw(&outcome.spec).1,
        outcome.spec.target.service
    );
    if let Some(out) = args.out {
        ensure_dir(&out)?;
        let path = out.join("calibrated.toml");
        std::fs::write(&path, outcome.spec.to_string())
            .with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn fitted_draw(spec: &ScenarioSpec) -> (u64, u64) {
    spec.services
        .iter()
        .find(|s| s.name == spec.target.service)
        .map(|s| (s.volatile_draw.min, s.volatile_draw.max))
        .unwrap_or((0, 0))
}

fn cmd_identify(args: IdentifyArgs) -> Result<()> {
    let spec = load_scenario(&args.scenario)?;
    let level = args.noise_level.unwrap_or(spec.noise.level);
    let config = CampaignConfig {
        noise_levels: vec![level],
        runs: 1,
        max_iterations: args.iterations,
        convergence_threshold: args.threshold,
        base_seed: args.seed,
        mode: Mode::Identify,
        force_integrity: args.countermeasure,
        calibrate: !args.no_calibrate,
        ..CampaignConfig::default()
    };
    let out = run_campaign(&spec, &config)?;
    print_calibration_note(&out.calibration[0]);

    let cell = &out.cells[0];
    if let Some(err) = &cell.error {
        return Err(anyhow!("identification run failed: {err}"));
    }
    match cell.converged_at {
        Some(i) => println!(
            "converged at iteration {i} (top set within {} pages); time {}",
            args.threshold, TIME_NOT_MODELED
        ),
        None => println!(
            "no convergence within {} iterations (top set still {} pages)",
            args.iterations,
            cell.rows.last().map(|r| r.top_set_pages).unwrap_or(0)
        ),
    }
    let x_rate = if cell.rows.is_empty() {
        0.0
    } else {
        cell.rows.iter().filter(|r| r.x_noise).count() as f64 / cell.rows.len() as f64
    };
    println!(
        "iterations {}, x-noise rate {:.3}, final refined set {} pages",
        cell.rows.len(),
        x_rate,
        cell.rows.last().map(|r| r.refined_pages).unwrap_or(0)
    );
    println!("ranking (best first):");
    println!("  page  probability  last-touch");
    for entry in &cell.final_ranking {
        println!(
            "  {:<5} {:<12} {}",
            entry.gpa, entry.probability, entry.last_touch_rank
        );
    }

    if let Some(dir) = args.out {
        ensure_dir(&dir)?;
        let path = dir.join("results.csv");
        write_results(&path, &out.rows)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_extract(args: ExtractArgs) -> Result<()> {
    let spec = load_scenario(&args.scenario)?;
    let level = args.noise_level.unwrap_or(spec.noise.level);
    let (fitted, note) = prepare_level(&spec, level, args.seed, !args.no_calibrate);
    print_calibration_note(&note);

    let run_seed = seed::derive(args.seed, &[0x5EED, level.to_bits(), 0]);
    let integrity = args.countermeasure.then_some(true);
    let mut sim = fitted
        .build_seeded(run_seed, integrity)
        .map_err(|e| anyhow!("{e}"))?;

    let page_size = sim.machine().page_size();
    let resource_bytes = sim
        .resource_size(&fitted.target.resource)
        .map_err(|e| anyhow!("{e}"))?;
    let slots_needed = resource_bytes / page_size;

    // The attacker has no ground truth, so the stopping rule is a
    // stable ranking head rather than a top-set size.
    let mut session = IdentifySession::new(SessionConfig {
        service: fitted.target.service.clone(),
        target_resource: fitted.target.resource.clone(),
        control_resource: fitted.target.control.clone(),
        eval_target: None,
    });
    let mut tracker = ConvergenceTracker::new(ConvergenceRule::StableRanking {
        prefix: slots_needed.max(1),
        patience: args.patience,
    });
    let mut stable_at = None;
    for _ in 0..args.iterations {
        let record = session.step(&mut sim).map_err(|e| anyhow!("{e}"))?;
        if tracker.observe(record.iteration, record.top_size, &session.ranking()) {
            stable_at = Some(record.iteration);
            break;
        }
    }
    match stable_at {
        Some(i) => println!(
            "identification: ranking head stable at iteration {i} \
             ({} requests)",
            session.requests_issued()
        ),
        None => println!(
            "identification: budget of {} iterations exhausted; proceeding \
             with the current ranking",
            args.iterations
        ),
    }

    let plan = extract::plan(&session.ranking(), resource_bytes, page_size)
        .map_err(|e| anyhow!("{e}"))?;
    println!(
        "plan: {} extraction slot(s) from {} ranked candidate(s)",
        plan.r(),
        session.ranking().len()
    );

    let mut frames = sim.machine().original_frames();
    let guest_frames = frames.len();
    if args.frames > 0 {
        frames.truncate(args.frames);
    }
    let report = extract::extract_all(
        &mut sim,
        plan,
        session.config(),
        &frames,
        &ExtractOptions::default(),
    )
    .map_err(|e| anyhow!("{e}"))?;

    let outcome = match &report.outcome {
        ExtractionOutcome::Complete => "complete".to_string(),
        ExtractionOutcome::Stopped { reason } => format!("stopped: {reason}"),
        ExtractionOutcome::Impossible { reason } => format!("impossible: {reason}"),
    };
    println!(
        "extraction: {outcome}; coverage {:.4} ({} of {} frame(s))",
        report.coverage,
        report.extracted_count(),
        frames.len()
    );
    println!(
        "requests: {} tampered, {} probe, {} recheck, {} re-identify",
        report.requests_issued,
        report.probe_requests,
        report.recheck_requests,
        report.reidentify_requests
    );
    println!(
        "slots replaced after probing: {}; re-identifications: {}; frames rolled back: {}",
        report.misidentified_slots, report.reidentifications, report.rolled_back_frames
    );

    ensure_dir(&args.out)?;
    let image_path = args.out.join("memory.img");
    write_memory_image(
        &image_path,
        report
            .frames
            .iter()
            .filter_map(|(frame, state)| match state {
                FrameState::Extracted { bytes, .. } => Some((frame.0, bytes.clone())),
                _ => None,
            }),
        guest_frames,
        page_size,
    )?;
    let csv_path = args.out.join("extraction.csv");
    let rows: Vec<ExtractionRow> = report
        .frames
        .iter()
        .map(|(frame, state)| match state {
            FrameState::Extracted { bytes, confidence } => ExtractionRow {
                frame: frame.0,
                state: "extracted".into(),
                confidence: Some(match confidence {
                    Confidence::Full => "full".into(),
                    Confidence::HeadOnly => "head-only".into(),
                }),
                bytes_recovered: bytes.len(),
            },
            FrameState::Pending => ExtractionRow {
                frame: frame.0,
                state: "pending".into(),
                confidence: None,
                bytes_recovered: 0,
            },
            FrameState::Unreadable => ExtractionRow {
                frame: frame.0,
                state: "unreadable".into(),
                confidence: None,
                bytes_recovered: 0,
            },
        })
        .collect();
    write_extraction(&csv_path, &rows)?;
    println!(
        "wrote {} ({} bytes) and {}",
        image_path.display(),
        guest_frames * page_size,
        csv_path.display()
    );
    Ok(())
}

fn cmd_campaign(args: CampaignArgs) -> Result<()> {
    let spec = load_scenario(&args.scenario)?;
    let config = CampaignConfig {
        noise_levels: args.noise_levels.clone(),
        runs: args.runs,
        max_iterations: args.iterations,
        convergence_threshold: args.threshold,
        base_seed: args.seed,
        mode: args.mode,
        extract_frames: args.extract_frames,
        calibrate: !args.no_calibrate,
        force_integrity: false,
    };
    let out = run_campaign(&spec, &config)?;

    for note in &out.calibration {
        print_calibration_note(note);
    }
    println!();
    println!(
        "{:<14} {:>6} {:>5} {:>10} {:>11} {:>9} {:>11} {:>9}",
        "service", "noise", "runs", "converged", "mean-iters", "x-noise", "mean-pages", "coverage"
    );
    for row in &out.summary {
        println!(
            "{:<14} {:>6} {:>5} {:>10} {:>11} {:>9.3} {:>11.1} {:>9}",
            row.service,
            row.noise_level,
            row.runs,
            row.converged_runs,
            row.mean_iterations_to_convergence
                .map(|m| format!("{m:.1}"))
                .unwrap_or_else(|| "-".into()),
            row.x_noise_rate,
            row.mean_recording_pages,
            row.extraction_coverage
                .map(|c| format!("{c:.3}"))
                .unwrap_or_else(|| "-".into()),
        );
    }
    println!("(time-to-convergence: {TIME_NOT_MODELED})");
    if out.failures.is_empty() {
        println!("failures: none");
    } else {
        println!("failures ({}):", out.failures.len());
        for failure in &out.failures {
            println!("  {failure}");
        }
    }

    ensure_dir(&args.out)?;
    let results_path = args.out.join("results.csv");
    write_results(&results_path, &out.rows)?;
    let summary_path = args.out.join("summary.csv");
    write_summary(&summary_path, &out.summary)?;
    let points = convergence_points(&out.rows);
    let curve_csv = args.out.join("convergence.csv");
    write_convergence_csv(&curve_csv, &points)?;
    let curve_svg = args.out.join("convergence.svg");
    write_convergence_svg(&curve_svg, &points)?;
    println!(
        "wrote {}, {}, {}, {}",
        results_path.display(),
        summary_path.display(),
        curve_csv.display(),
        curve_svg.display()
    );
    Ok(())
}

fn cmd_plot(args: PlotArgs) -> Result<()> {
    let rows = slatsim_harness::report::read_results(&args.results)?;
    if rows.is_empty() {
        return Err(anyhow!("{} contains no result rows", args.results.display()));
    }
    ensure_dir(&args.out)?;
    let points = convergence_points(&rows);
    let curve_csv = args.out.join("convergence.csv");
    write_convergence_csv(&curve_csv, &points)?;
    let curve_svg = args.out.join("convergence.svg");
    write_convergence_svg(&curve_svg, &points)?;
    println!("wrote {} and {}", curve_csv.display(), curve_svg.display());
    Ok(())
}

/// The textbook two-iteration vector, recomputed live.
fn cmd_demo() -> Result<()> {
    let samples: [(&[usize], &[usize]); 2] = [
        (&[4, 8, 15, 16, 23, 42], &[3, 8, 12, 15, 16, 23, 27]),
        (&[6, 8, 15, 16, 23, 42], &[2, 8, 12, 13, 15, 23]),
    ];

    let mut state = IdentificationState::new();
    for (i, (target, control)) in samples.iter().enumerate() {
        let recording =
            AccessRecording::from_pages(target.iter().map(|&p| Gpa(p)).collect());
        let control_set: PageSet = control.iter().map(|&p| Gpa(p)).collect();
        println!("target sample {}: {}", i + 1, page_list(target));
        println!("control sample {}: {}", i + 1, page_list(control));
        state.apply_iteration(&recording, &control_set);
    }

    let refined: Vec<usize> = state.refined().iter().map(|g| g.0).collect();
    println!("refined intersection: {}", page_list(&refined));
    let counts: Vec<String> = state
        .candidates()
        .iter()
        .map(|(gpa, count)| format!("{}: {count}", gpa.0))
        .collect();
    println!("candidate counts: {{{}}}", counts.join(", "));

    let ranking = state.ranking();
    for entry in ranking.entries() {
        println!("P[{}] = {}", entry.gpa.0, entry.probability);
    }
    let order: Vec<String> = ranking.entries().iter().map(|e| e.gpa.0.to_string()).collect();
    println!("ranking = [{}]", order.join(", "));
    Ok(())
}

fn page_list(pages: &[usize]) -> String {
    let body: Vec<String> = pages.iter().map(|p| p.to_string()).collect();
    format!("{{{}}}", body.join(", "))
}
