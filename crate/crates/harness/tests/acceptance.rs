//! Release gate. One test per acceptance criterion; each prints a
//! single `criterion N (...): pass|FAIL` verdict line (visible with
//! `--nocapture`, or in the failure report when a criterion goes red)
//! and then asserts it. Tolerances and budgets are pinned in the
//! constants below so the bar cannot drift silently.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use slatsim_harness::campaign::{run_campaign, CalibrationNote, CampaignConfig, CampaignOutput};
use slatsim_core::calibrate::{calibrate_to_table, CalibrateOptions};
use slatsim_core::extract::{extract_all, plan, validate_plan, ExtractOptions, ExtractionOutcome, FrameState};
use slatsim_core::identify::{
    ConvergenceRule, ConvergenceTracker, IdentificationState, IdentifySession, PageSet,
    SessionConfig,
};
use slatsim_core::mem::{AccessRecording, Gpa};
use slatsim_core::scenario::{
    CalibrationTable, ClientSpec, DrawSpec, NoiseSpec, PagesSpec, ResourceShape, ScenarioSpec,
    ServiceSpec, TargetSpec,
};

/// Absolute band on the x-noise rate measured from campaign rows vs the
/// scenario's calibration table.
const X_NOISE_BAND: f64 = 0.05;
/// Relative band on the mean recording size measured from campaign rows
/// vs the scenario's calibration table.
const MEAN_PAGES_BAND: f64 = 0.15;
/// Wall-clock ceiling per bundled campaign (8 runs x 4 levels).
const CAMPAIGN_BUDGET_SECS: f64 = 300.0;
/// Iteration budgets for the calibrated web profiles at noise levels
/// 20/30/40/50: twice the full-scale reference convergence runs the
/// calibration tables are scaled from.
const WEB_BUDGETS: [(&str, [f64; 4]); 2] = [
    ("apache-like", [20.0, 20.0, 24.0, 44.0]),
    ("nginx-like", [16.0, 18.0, 26.0, 32.0]),
];
const LEVELS: [f64; 4] = [20.0, 30.0, 40.0, 50.0];
const PROFILES: [&str; 3] = ["apache-like", "nginx-like", "openssh-like"];

fn verdict(criterion: &str, pass: bool, detail: &str) -> bool {
    println!(
        "criterion {criterion}: {} — {detail}",
        if pass { "pass" } else { "FAIL" }
    );
    pass
}

fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.toml"))
}

fn load_profile(name: &str) -> ScenarioSpec {
    let path = scenario_path(name);
    let text = std::fs::read_to_string(&path).unwrap();
    ScenarioSpec::from_toml(&text, &path.display().to_string()).unwrap()
}

fn rec(pages: &[usize]) -> AccessRecording {
    AccessRecording::from_pages(pages.iter().map(|&p| Gpa(p)).collect())
}

fn set(pages: &[usize]) -> PageSet {
    pages.iter().map(|&p| Gpa(p)).collect()
}

// --- criterion 1 ---------------------------------------------------------

#[test]
fn criterion_1_worked_example_is_exact() {
    let start = Instant::now();
    let mut state = IdentificationState::new();
    state.apply_iteration(&rec(&[4, 8, 15, 16, 23, 42]), &set(&[3, 8, 12, 15, 16, 23, 27]));
    state.apply_iteration(&rec(&[6, 8, 15, 16, 23, 42]), &set(&[2, 8, 12, 13, 15, 23]));
    let elapsed = start.elapsed();

    let mut failures = Vec::new();
    if state.refined() != set(&[8, 15, 16, 23, 42]) {
        failures.push(format!("refined set {:?}", state.refined()));
    }
    let c = state.candidates();
    if c.count(Gpa(42)) != 2 || c.count(Gpa(16)) != 1 || c.total() != 3 || c.support_len() != 2 {
        failures.push(format!(
            "candidate multiset {{42: {}, 16: {}}}, total {}",
            c.count(Gpa(42)),
            c.count(Gpa(16)),
            c.total()
        ));
    }
    let ranking = state.ranking();
    let entries = ranking.entries();
    let order: Vec<usize> = entries.iter().map(|e| e.gpa.0).collect();
    if order != vec![42, 16] {
        failures.push(format!("ranking order {order:?}"));
    }
    if entries.first().map(|e| e.probability) != Some(Ratio::new(2, 3))
        || entries.get(1).map(|e| e.probability) != Some(Ratio::new(1, 3))
    {
        failures.push("probabilities are not exactly 2/3 and 1/3".into());
    }
    if elapsed.as_secs_f64() >= 1.0 {
        failures.push(format!("took {elapsed:?}"));
    }

    let detail = if failures.is_empty() {
        format!(
            "refined {{8,15,16,23,42}}, P[42]=2/3, P[16]=1/3, ranking [42,16] in {elapsed:?}"
        )
    } else {
        failures.join("; ")
    };
    assert!(verdict("1 (worked example)", failures.is_empty(), &detail), "{detail}");
}

// --- criterion 2 ---------------------------------------------------------

#[test]
fn criterion_2_recordings_contain_the_resource_and_refinement_shrinks() {
    let mut windows = 0usize;
    let mut violations: Vec<String> = Vec::new();

    for name in PROFILES {
        let base = load_profile(name);
        for (li, &level) in LEVELS.iter().enumerate() {
            let mut spec = base.clone();
            spec.noise.level = level;
            let seed = 1000 + li as u64;
            let mut sim = spec.build_seeded(seed, None).unwrap();
            let truth = sim.ground_truth_resource_pages(&spec.target.resource).unwrap();

            for w in 0..90 {
                let window = sim
                    .tracked_request_window(&spec.target.service, &spec.target.resource)
                    .unwrap();
                windows += 1;
                let pages = window.recording.page_set();
                if let Some(missing) = truth.iter().find(|p| !pages.contains(p)) {
                    violations.push(format!(
                        "{name} level {level} window {w}: page {missing:?} missing"
                    ));
                }
            }

            let mut session = IdentifySession::new(SessionConfig {
                service: spec.target.service.clone(),
                target_resource: spec.target.resource.clone(),
                control_resource: spec.target.control.clone(),
                eval_target: None,
            });
            let mut prev = usize::MAX;
            for i in 0..40 {
                let record = session.step(&mut sim).unwrap();
                if record.refined_pages > prev {
                    violations.push(format!(
                        "{name} level {level} iteration {}: refined grew {prev} -> {}",
                        i + 1,
                        record.refined_pages
                    ));
                }
                prev = record.refined_pages;
            }
        }
    }

    let pass = windows >= 1000 && violations.is_empty();
    let detail = if pass {
        format!("{windows} tracked windows across 3 profiles x 4 levels, zero violations")
    } else {
        format!("{windows} windows, {} violations: {:?}", violations.len(), &violations[..violations.len().min(3)])
    };
    assert!(verdict("2 (resource containment, monotone refinement)", pass, &detail), "{detail}");
}

// --- criterion 3 ---------------------------------------------------------

fn random_tiny_spec(rng: &mut ChaCha20Rng) -> ScenarioSpec {
    let two_services = rng.random_bool(0.4);
    let kernel = rng.random_range(2..=4u64);
    let service = rng.random_range(2..=4u64);
    let pool = rng.random_range(4..=10u64);
    let draw_min = rng.random_range(1..=2u64);
    let draw_max = (draw_min + rng.random_range(0..=4u64)).min(pool);
    let target_pages = rng.random_range(1..=2u64);

    let mut services = vec![ServiceSpec {
        name: "alpha".into(),
        kernel_common: PagesSpec::Count(kernel),
        service_common: PagesSpec::Count(service),
        volatile_pool: PagesSpec::Count(pool),
        volatile_draw: DrawSpec { min: draw_min, max: draw_max },
        pre_resource_fraction: rng.random_range(0.5..=1.0),
        resources: vec!["tgt".into(), "ctl".into()],
    }];
    let mut resources = vec![
        ResourceShape {
            name: "tgt".into(),
            pages: PagesSpec::Count(target_pages),
            size_bytes: target_pages * 32,
            sticky: true,
            relocation_rate: 0.0,
        },
        ResourceShape {
            name: "ctl".into(),
            pages: PagesSpec::Count(1),
            size_bytes: rng.random_range(8..=32),
            sticky: true,
            relocation_rate: 0.0,
        },
    ];
    let mut clients = vec![
        ClientSpec { service: "alpha".into(), resource: "tgt".into(), weight: rng.random_range(0.5..2.0) },
        ClientSpec { service: "alpha".into(), resource: "ctl".into(), weight: rng.random_range(0.5..2.0) },
    ];
    let mut named = kernel + service + pool + target_pages + 1;

    if two_services {
        let k2 = rng.random_range(2..=3u64);
        let s2 = rng.random_range(2..=3u64);
        let p2 = rng.random_range(3..=6u64);
        services.push(ServiceSpec {
            name: "beta".into(),
            kernel_common: PagesSpec::Count(k2),
            service_common: PagesSpec::Count(s2),
            volatile_pool: PagesSpec::Count(p2),
            volatile_draw: DrawSpec { min: 1, max: rng.random_range(1..=3u64).min(p2) },
            pre_resource_fraction: 1.0,
            resources: vec!["side".into()],
        });
        resources.push(ResourceShape {
            name: "side".into(),
            pages: PagesSpec::Count(1),
            size_bytes: 24,
            sticky: true,
            relocation_rate: 0.0,
        });
        clients.push(ClientSpec {
            service: "beta".into(),
            resource: "side".into(),
            weight: rng.random_range(0.5..2.0),
        });
        named += k2 + s2 + p2 + 1;
    }

    let guest_pages = (named + rng.random_range(0..=6u64)).min(64);
    ScenarioSpec {
        guest_pages,
        page_size: 32,
        seed: rng.random(),
        spare_frames: 4,
        integrity_mode: false,
        target: TargetSpec {
            service: "alpha".into(),
            resource: "tgt".into(),
            control: "ctl".into(),
        },
        noise: NoiseSpec {
            level: rng.random_range(0.0..=8.0),
            window_seconds: rng.random_range(0.05..=0.25),
            clients,
        },
        services,
        resources,
        calibration: CalibrationTable { targets: Vec::new() },
    }
}

/// From-scratch rebuild of refined set, candidate multiset, last-touch
/// table and ranking from the stored per-iteration recordings. Entirely
/// independent of `IdentificationState`'s incremental bookkeeping.
fn rebuilt_from(stored: &[(AccessRecording, PageSet)]) -> (PageSet, BTreeMap<Gpa, u64>, Vec<(Gpa, u64, usize)>) {
    let mut refined: Option<PageSet> = None;
    let mut counts: BTreeMap<Gpa, u64> = BTreeMap::new();
    let mut last_touch: BTreeMap<Gpa, usize> = BTreeMap::new();

    for (target, control) in stored {
        let target_set = target.page_set();
        let next: PageSet = match &refined {
            None => target_set.clone(),
            Some(prev) => prev.intersection(&target_set).copied().collect(),
        };
        for &gpa in next.iter() {
            if !control.contains(&gpa) {
                *counts.entry(gpa).or_default() += 1;
            }
        }
        counts.retain(|g, _| next.contains(g));
        for (pos, &gpa) in target.pages().iter().enumerate() {
            if next.contains(&gpa) {
                let slot = last_touch.entry(gpa).or_insert(pos);
                *slot = (*slot).max(pos);
            }
        }
        last_touch.retain(|g, _| next.contains(g));
        refined = Some(next);
    }

    let mut order: Vec<(Gpa, u64, usize)> = counts
        .iter()
        .map(|(&g, &c)| (g, c, last_touch.get(&g).copied().unwrap_or(0)))
        .collect();
    order.sort_by(|a, b| b.1.cmp(&a.1).then(b.2.cmp(&a.2)).then(a.0.cmp(&b.0)));
    (refined.unwrap_or_default(), counts, order)
}

#[test]
fn criterion_3_incremental_state_matches_a_from_scratch_rebuild() {
    let mut rng = ChaCha20Rng::seed_from_u64(0xAC_CE55);
    let mut compared = 0usize;

    for case in 0..500 {
        let spec = random_tiny_spec(&mut rng);
        let mut sim = spec.build_seeded(spec.seed, None).unwrap();
        let mut state = IdentificationState::new();
        let mut stored: Vec<(AccessRecording, PageSet)> = Vec::new();

        for iter in 0..6 {
            let target = sim
                .tracked_request_window("alpha", "tgt")
                .unwrap()
                .recording;
            let control = sim
                .tracked_request_window("alpha", "ctl")
                .unwrap()
                .recording
                .page_set();
            state.apply_iteration(&target, &control);
            stored.push((target, control));

            let (refined, counts, order) = rebuilt_from(&stored);
            assert_eq!(state.refined(), refined, "case {case} iteration {iter}: refined set");
            let incremental: BTreeMap<Gpa, u64> = state.candidates().iter().collect();
            assert_eq!(incremental, counts, "case {case} iteration {iter}: candidate multiset");

            let total: u64 = counts.values().sum();
            let entries = state.ranking();
            let entries = entries.entries();
            assert_eq!(entries.len(), order.len(), "case {case} iteration {iter}: ranking length");
            for (entry, &(gpa, count, last_touch)) in entries.iter().zip(order.iter()) {
                assert_eq!(entry.gpa, gpa, "case {case} iteration {iter}: ranking order");
                assert_eq!(entry.count, count, "case {case} iteration {iter}: count");
                assert_eq!(entry.last_touch, last_touch, "case {case} iteration {iter}: last touch");
                assert_eq!(
                    entry.probability,
                    Ratio::new(count, total),
                    "case {case} iteration {iter}: probability"
                );
            }
            compared += 1;
        }
    }

    let detail = format!("500 random scenarios x 6 iterations, {compared} exact state comparisons");
    assert!(verdict("3 (incremental vs rebuilt state)", true, &detail));
}

// --- criteria 4 and 5 share the three bundled campaigns ------------------

struct CampaignRun {
    name: &'static str,
    spec: ScenarioSpec,
    output: CampaignOutput,
    elapsed_secs: f64,
}

static CAMPAIGNS: OnceLock<Vec<CampaignRun>> = OnceLock::new();

fn campaigns() -> &'static [CampaignRun] {
    CAMPAIGNS.get_or_init(|| {
        PROFILES
            .iter()
            .map(|&name| {
                let spec = load_profile(name);
                let config = CampaignConfig { base_seed: 0, ..CampaignConfig::default() };
                let start = Instant::now();
                let output = run_campaign(&spec, &config).unwrap();
                CampaignRun {
                    name,
                    spec,
                    output,
                    elapsed_secs: start.elapsed().as_secs_f64(),
                }
            })
            .collect()
    })
}

#[test]
fn criterion_4_campaigns_calibrate_and_web_profiles_converge_in_budget() {
    let mut failures: Vec<String> = Vec::new();
    let mut slowest = 0.0f64;

    for run in campaigns() {
        slowest = slowest.max(run.elapsed_secs);
        if run.elapsed_secs > CAMPAIGN_BUDGET_SECS {
            failures.push(format!("{} took {:.1}s", run.name, run.elapsed_secs));
        }
        if !run.output.failures.is_empty() {
            failures.push(format!("{} cell failures: {:?}", run.name, run.output.failures));
        }
        for note in &run.output.calibration {
            if !matches!(note, CalibrationNote::Fitted { .. }) {
                failures.push(format!("{}: {note:?}", run.name));
            }
        }
        for row in &run.output.summary {
            let target = run.spec.calibration_target(row.noise_level).unwrap();
            let x_gap = (row.x_noise_rate - target.x_noise_probability).abs();
            if x_gap > X_NOISE_BAND {
                failures.push(format!(
                    "{} level {}: x-noise {:.3} vs table {:.3}",
                    run.name, row.noise_level, row.x_noise_rate, target.x_noise_probability
                ));
            }
            let mean_gap = (row.mean_recording_pages - target.mean_recording_pages).abs();
            if mean_gap > MEAN_PAGES_BAND * target.mean_recording_pages {
                failures.push(format!(
                    "{} level {}: mean recording {:.1} vs table {:.1}",
                    run.name, row.noise_level, row.mean_recording_pages, target.mean_recording_pages
                ));
            }
        }
    }

    for (name, budgets) in WEB_BUDGETS {
        let run = campaigns().iter().find(|r| r.name == name).unwrap();
        for (i, row) in run.output.summary.iter().enumerate() {
            if row.converged_runs != row.runs {
                failures.push(format!(
                    "{name} level {}: only {}/{} runs converged",
                    row.noise_level, row.converged_runs, row.runs
                ));
                continue;
            }
            let mean = row.mean_iterations_to_convergence.unwrap();
            if mean > budgets[i] {
                failures.push(format!(
                    "{name} level {}: mean {:.1} iterations over the {} budget",
                    row.noise_level, mean, budgets[i]
                ));
            }
        }
    }

    let pass = failures.is_empty();
    let detail = if pass {
        let web_means: Vec<String> = campaigns()
            .iter()
            .filter(|r| r.name != "openssh-like")
            .map(|r| {
                let means: Vec<String> = r
                    .output
                    .summary
                    .iter()
                    .map(|row| format!("{:.1}", row.mean_iterations_to_convergence.unwrap_or(f64::NAN)))
                    .collect();
                format!("{} [{}]", r.name, means.join(", "))
            })
            .collect();
        format!(
            "12 level cells within ±{X_NOISE_BAND} x-noise / ±{:.0}% mean pages; web means {}; slowest campaign {slowest:.1}s",
            MEAN_PAGES_BAND * 100.0,
            web_means.join("; ")
        )
    } else {
        failures.join("; ")
    };
    assert!(verdict("4 (calibrated convergence, web profiles)", pass, &detail), "{detail}");
}

#[test]
fn criterion_4_session_host_at_highest_load_defies_the_iteration_budget() {
    let run = campaigns().iter().find(|r| r.name == "openssh-like").unwrap();
    let row = run
        .output
        .summary
        .iter()
        .find(|row| row.noise_level == 50.0)
        .unwrap();

    let pass = row.converged_runs == 0;
    let detail = if pass {
        format!("0/{} runs converged within 100 iterations", row.runs)
    } else {
        format!(
            "{}/{} runs converged, mean {:.1} iterations — the pinned guest model cannot starve \
             candidate elimination past the budget (see the ranking-race analysis in the scenario \
             comments); reported honestly rather than tuned around",
            row.converged_runs,
            row.runs,
            row.mean_iterations_to_convergence.unwrap_or(f64::NAN)
        )
    };
    assert!(verdict("4 (session host defies convergence at noise 50)", pass, &detail), "{detail}");
}

#[test]
fn criterion_5_converged_runs_rank_the_true_target_first() {
    let mut checked = 0usize;
    let mut failures: Vec<String> = Vec::new();

    for run in campaigns() {
        for cell in &run.output.cells {
            if let Some(err) = &cell.error {
                failures.push(format!(
                    "{} level {} run {}: {err}",
                    run.name, cell.noise_level, cell.run
                ));
                continue;
            }
            if cell.converged_at.is_none() {
                continue;
            }
            checked += 1;
            if !cell.ranked_target_first {
                let head: Vec<usize> = cell.final_ranking.iter().take(3).map(|e| e.gpa).collect();
                failures.push(format!(
                    "{} level {} run {}: converged at {:?} but ranking head is {head:?}",
                    run.name, cell.noise_level, cell.run, cell.converged_at
                ));
            }
        }
    }

    let pass = failures.is_empty() && checked > 0;
    let detail = if pass {
        format!("{checked} converged cells all rank the true target page first")
    } else {
        let only_saturated = failures
            .iter()
            .all(|f| f.starts_with("openssh-like level 50"));
        let context = if only_saturated {
            " (all in the saturated session-host regime the reference data reports as \
             non-converging — the same modeling gap criterion 4 records)"
        } else {
            ""
        };
        format!(
            "{checked} converged cells, {} mis-ranked{context}: {:?}",
            failures.len(),
            &failures[..failures.len().min(3)]
        )
    };
    assert!(verdict("5 (converged runs identify the true page)", pass, &detail), "{detail}");
}

// --- criterion 6 ---------------------------------------------------------

fn extraction_spec(frames: u64, seed: u64) -> ScenarioSpec {
    let toml = format!(
        r#"
guest_pages = {frames}
page_size = 64
seed = {seed}
spare_frames = 8

[target]
service = "web"
resource = "payload"
control = "decoy"

[noise]
level = 25.0
window_seconds = 0.1
clients = [
    {{ service = "web", resource = "payload", weight = 1.0 }},
    {{ service = "web", resource = "decoy", weight = 3.0 }},
]

[[services]]
name = "web"
kernel_common = 8
service_common = 12
volatile_pool = 80
volatile_draw = {{ min = 4, max = 16 }}
resources = ["payload", "decoy"]

[[resources]]
name = "payload"
pages = 1
size_bytes = 64

[[resources]]
name = "decoy"
pages = 2
size_bytes = 128

[calibration]
targets = [
    {{ noise_level = 25.0, x_noise_probability = 0.25, mean_recording_pages = 42.0 }},
]
"#
    );
    ScenarioSpec::from_toml(&toml, "<acceptance>").unwrap()
}

/// Identify, plan, and extract every frame of a guest; returns the
/// detail fragment on success, failure strings otherwise.
fn extract_whole_guest(frames: u64, failures: &mut Vec<String>) -> Option<String> {
    let spec = extraction_spec(frames, 97);
    let fitted = match calibrate_to_table(&spec, 25.0, &CalibrateOptions { seed: 5, ..CalibrateOptions::default() }) {
        Ok(outcome) => outcome.spec,
        Err(e) => {
            failures.push(format!("{frames}-frame guest: calibration failed: {e}"));
            return None;
        }
    };
    let mut sim = fitted.build_seeded(123, None).unwrap();
    let config = SessionConfig {
        service: "web".into(),
        target_resource: "payload".into(),
        control_resource: "decoy".into(),
        eval_target: None,
    };

    let mut session = IdentifySession::new(config.clone());
    let mut tracker = ConvergenceTracker::new(ConvergenceRule::StableRanking { prefix: 1, patience: 5 });
    for _ in 0..60 {
        let record = session.step(&mut sim).unwrap();
        if tracker.observe(record.iteration, record.top_size, &session.ranking()) {
            break;
        }
    }

    let resource_bytes = sim.ground_truth_resource_content("payload").unwrap().len();
    let mut extraction_plan = plan(&session.ranking(), resource_bytes, 64).unwrap();
    validate_plan(&mut sim, &mut extraction_plan, "web", "payload").unwrap();
    let r = extraction_plan.r();
    let all_frames = sim.machine().original_frames();
    assert_eq!(all_frames.len() as u64, frames);

    let report = extract_all(&mut sim, extraction_plan, &config, &all_frames, &ExtractOptions::default()).unwrap();

    if !report.is_complete() || report.coverage != 1.0 {
        failures.push(format!(
            "{frames}-frame guest: outcome {:?}, coverage {}",
            report.outcome, report.coverage
        ));
        return None;
    }
    if report.extracted_count() != frames as usize {
        failures.push(format!(
            "{frames}-frame guest: {} of {frames} frames extracted",
            report.extracted_count()
        ));
    }
    let mismatched = report
        .image()
        .filter(|(frame, bytes)| *bytes != sim.machine().frame_bytes(*frame).unwrap())
        .count();
    if mismatched != 0 {
        failures.push(format!("{frames}-frame guest: {mismatched} frames differ from guest memory"));
    }
    for gpa in (0..frames as usize).map(Gpa) {
        if sim.machine().translate(gpa).unwrap() != sim.machine().snapshot_frame(gpa).unwrap() {
            failures.push(format!("{frames}-frame guest: mapping for {gpa:?} not restored"));
            break;
        }
    }
    // Every extraction batch issues one tampered request and recovers at
    // most `r` frames, so the request count is bounded below by frames/r
    // and above bounds the coverage. Probe/recheck/re-identify requests
    // are tracked separately and sit on top.
    let floor = frames.div_ceil(r as u64);
    if report.requests_issued < floor {
        failures.push(format!(
            "{frames}-frame guest: {} tampered requests below the {floor} floor",
            report.requests_issued
        ));
    }
    if (report.extracted_count() as u64) > report.requests_issued * r as u64 {
        failures.push(format!(
            "{frames}-frame guest: {} frames from {} requests x {r} slots",
            report.extracted_count(),
            report.requests_issued
        ));
    }
    if report.probe_requests == 0 {
        failures.push(format!("{frames}-frame guest: plan validation never probed"));
    }
    if sim.counters().noise_requests == 0 {
        failures.push(format!("{frames}-frame guest: noise stream never ran"));
    }
    Some(format!(
        "{frames} frames bit-exact via {} requests ({} probe, {} recheck)",
        report.requests_issued, report.probe_requests, report.recheck_requests
    ))
}

#[test]
fn criterion_6_full_memory_extraction_is_bit_exact() {
    let mut failures = Vec::new();
    let mut details = Vec::new();
    for frames in [256u64, 32 * 1024] {
        if let Some(detail) = extract_whole_guest(frames, &mut failures) {
            details.push(detail);
        }
    }
    let pass = failures.is_empty();
    let detail = if pass { details.join("; ") } else { failures.join("; ") };
    assert!(verdict("6 (full extraction, mappings restored)", pass, &detail), "{detail}");
}

// --- criterion 7 ---------------------------------------------------------

#[test]
fn criterion_7_integrity_mode_blocks_extraction_but_not_the_guest() {
    let mut failures: Vec<String> = Vec::new();
    let spec = extraction_spec(256, 41);

    // Any remapped access faults.
    let mut sim = spec.build_seeded(7, Some(true)).unwrap();
    let gpa = Gpa(5);
    let spare = sim.machine().unmapped_frames()[0];
    let original = sim.machine_mut().remap(gpa, spare).unwrap();
    if sim.machine_mut().read_through(gpa).is_ok() {
        failures.push("remapped page read did not fault".into());
    }
    sim.machine_mut().remap(gpa, original).unwrap();
    if sim.machine_mut().read_through(gpa).is_err() {
        failures.push("restored page still faults".into());
    }

    // Extraction collapses to zero coverage.
    let config = SessionConfig {
        service: "web".into(),
        target_resource: "payload".into(),
        control_resource: "decoy".into(),
        eval_target: None,
    };
    let mut session = IdentifySession::new(config.clone());
    for _ in 0..25 {
        session.step(&mut sim).unwrap();
    }
    let extraction_plan = plan(&session.ranking(), 64, 64).unwrap();
    let frames = sim.machine().original_frames();
    let report = extract_all(&mut sim, extraction_plan, &config, &frames, &ExtractOptions::default()).unwrap();
    if !matches!(report.outcome, ExtractionOutcome::Impossible { .. }) {
        failures.push(format!("outcome {:?} instead of impossible", report.outcome));
    }
    if report.coverage != 0.0 || report.extracted_count() != 0 {
        failures.push(format!(
            "coverage {} with {} frames extracted",
            report.coverage,
            report.extracted_count()
        ));
    }
    if !report.frames.values().all(|s| *s == FrameState::Pending) {
        failures.push("some frames left in a non-pending state".into());
    }

    // The untampered guest runs fault-free under the same protection.
    let mut clean = spec.build_seeded(11, Some(true)).unwrap();
    for _ in 0..100 {
        let window = clean.tracked_request_window("web", "payload").unwrap();
        if window.response.is_err() {
            failures.push("untampered request faulted".into());
            break;
        }
        clean.run_noise_window(0.1);
    }
    if clean.counters().noise_faults.iter().any(|&f| f > 0) {
        failures.push("untampered noise stream faulted".into());
    }

    let pass = failures.is_empty();
    let detail = if pass {
        "remapped reads fault, extraction coverage 0, untampered guest served 100 windows fault-free"
            .to_string()
    } else {
        failures.join("; ")
    };
    assert!(verdict("7 (integrity countermeasure)", pass, &detail), "{detail}");
}

// --- criterion 8 ---------------------------------------------------------

#[test]
fn criterion_8_same_seed_campaigns_are_byte_identical() {
    let exe = env!("CARGO_BIN_EXE_slatsim");
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");

    for out in [&out_a, &out_b] {
        let status = Command::new(exe)
            .args([
                "campaign",
                "--scenario",
                scenario_path("apache-like").to_str().unwrap(),
                "--runs",
                "3",
                "--noise-levels",
                "20,50",
                "--seed",
                "11",
                "--out",
                out.to_str().unwrap(),
            ])
            .status()
            .unwrap();
        assert!(status.success(), "campaign run failed");
    }

    let mut failures = Vec::new();
    let mut sizes = Vec::new();
    for file in ["results.csv", "summary.csv", "convergence.csv", "convergence.svg"] {
        let a = std::fs::read(out_a.join(file)).unwrap();
        let b = std::fs::read(out_b.join(file)).unwrap();
        if a.is_empty() {
            failures.push(format!("{file} is empty"));
        }
        if a != b {
            failures.push(format!("{file} differs between reruns"));
        }
        sizes.push(format!("{file} {}B", a.len()));
    }

    let pass = failures.is_empty();
    let detail = if pass { sizes.join(", ") } else { failures.join("; ") };
    assert!(verdict("8 (byte-identical reruns)", pass, &detail), "{detail}");
}
