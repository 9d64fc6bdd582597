//! End-to-end extraction runs against live scenarios: under calibrated
//! noise, under relocation pressure, and against the integrity
//! countermeasure.

use slatsim_core::extract::{
    extract_all, plan, validate_plan, ExtractOptions, ExtractionOutcome, FrameState,
};
use slatsim_core::guest::SimInstance;
use slatsim_core::identify::{CandidateRanking, IdentifySession, SessionConfig};
use slatsim_core::mem::Gpa;
use slatsim_core::scenario::ScenarioSpec;

const BUSY_GUEST: &str = r#"
guest_pages = 256
page_size = 64
seed = 73
spare_frames = 8

[target]
service = "web"
resource = "page"
control = "decoy"

[noise]
level = 25.0
window_seconds = 0.1

[[services]]
name = "web"
kernel_common = 8
service_common = 12
volatile_pool = 80
volatile_draw = { min = 4, max = 16 }
pre_resource_fraction = 0.8
resources = ["page", "decoy"]

[[services]]
name = "shell"
kernel_common = 8
service_common = 6
volatile_pool = 40
volatile_draw = { min = 2, max = 8 }
resources = ["motd"]

[[resources]]
name = "page"
pages = 1
size_bytes = 64

[[resources]]
name = "decoy"
pages = 2
size_bytes = 128

[[resources]]
name = "motd"
pages = 1
size_bytes = 40
"#;

const RELOCATING_GUEST: &str = r#"
guest_pages = 192
page_size = 64
seed = 29
spare_frames = 8

[target]
service = "web"
resource = "page"
control = "decoy"

[noise]
level = 10.0
window_seconds = 0.1

[[services]]
name = "web"
kernel_common = 8
service_common = 8
volatile_pool = 48
volatile_draw = { min = 4, max = 10 }
resources = ["page", "decoy"]

[[resources]]
name = "page"
pages = 1
size_bytes = 64
sticky = false
relocation_rate = 0.9

[[resources]]
name = "decoy"
pages = 2
size_bytes = 128
"#;

fn config() -> SessionConfig {
    SessionConfig {
        service: "web".into(),
        target_resource: "page".into(),
        control_resource: "decoy".into(),
        eval_target: None,
    }
}

fn build(toml: &str, integrity: bool) -> SimInstance {
    let spec = ScenarioSpec::from_toml(toml, "<test>").unwrap();
    spec.build_seeded(spec.seed, Some(integrity)).unwrap()
}

fn attacker_ranking(sim: &mut SimInstance, iterations: usize) -> CandidateRanking {
    let mut session = IdentifySession::new(config());
    for _ in 0..iterations {
        session.step(sim).unwrap();
    }
    session.ranking()
}

#[test]
fn full_extraction_under_noise_is_bit_exact() {
    let mut sim = build(BUSY_GUEST, false);
    let ranking = attacker_ranking(&mut sim, 25);
    let resource_bytes = sim.handle_request("web", "page").unwrap().len();
    let mut plan = plan(&ranking, resource_bytes, 64).unwrap();
    validate_plan(&mut sim, &mut plan, "web", "page").unwrap();

    let frames = sim.machine().original_frames();
    assert_eq!(frames.len(), 256);
    let report = extract_all(
        &mut sim,
        plan,
        &config(),
        &frames,
        &ExtractOptions::default(),
    )
    .unwrap();

    assert!(report.is_complete(), "outcome: {:?}", report.outcome);
    assert_eq!(report.coverage, 1.0);
    assert_eq!(report.extracted_count(), 256);
    for (frame, bytes) in report.image() {
        assert_eq!(bytes, sim.machine().frame_bytes(frame).unwrap(), "{frame}");
    }
    assert!(report.requests_issued >= 256);

    // The victim stays stable: requests to resources the attacker never
    // tampered with were answered correctly throughout, and nothing
    // faulted.
    let counters = sim.counters();
    let page_idx = sim.resource_index("page").unwrap();
    for (idx, mismatches) in counters.noise_mismatches.iter().enumerate() {
        if idx != page_idx {
            assert_eq!(*mismatches, 0, "resource {idx} served corrupted data");
        }
    }
    assert!(counters.noise_faults.iter().all(|&f| f == 0));

    // Mappings are back; the guest serves originals.
    for gpa in (0..256).map(Gpa) {
        assert_eq!(
            sim.machine().translate(gpa).unwrap(),
            sim.machine().snapshot_frame(gpa).unwrap()
        );
    }
    let served = sim.handle_request("web", "page").unwrap();
    assert_eq!(served, sim.ground_truth_resource_content("page").unwrap());
}

#[test]
fn relocation_is_detected_and_recovered() {
    let mut sim = build(RELOCATING_GUEST, false);
    let ranking = attacker_ranking(&mut sim, 20);
    let resource_bytes = sim.handle_request("web", "page").unwrap().len();
    let mut plan = plan(&ranking, resource_bytes, 64).unwrap();
    validate_plan(&mut sim, &mut plan, "web", "page").unwrap();

    let frames = sim.machine().original_frames();
    let opts = ExtractOptions {
        recheck_every: 8,
        max_reidentifications: 64,
        ..ExtractOptions::default()
    };
    let report = extract_all(&mut sim, plan, &config(), &frames, &opts).unwrap();

    assert!(report.is_complete(), "outcome: {:?}", report.outcome);
    assert_eq!(report.coverage, 1.0);

    let counters = sim.counters();
    let events = counters.relocations + counters.evictions;
    assert!(
        events >= 1,
        "scenario must actually relocate to exercise recovery"
    );
    assert!(
        report.reidentifications >= 1,
        "a relocation happened but extraction never re-identified"
    );

    // Every extracted frame matched ground truth at extraction time.
    // The guest's own relocation writes may have changed a frame since
    // its extraction, so at most (moves + reloads) * resource pages may
    // differ now; everything else must still be bit-exact.
    let rewrite_bound = (counters.relocations + counters.reloads) as usize;
    let mismatched = report
        .image()
        .filter(|(frame, bytes)| *bytes != sim.machine().frame_bytes(*frame).unwrap())
        .count();
    assert!(
        mismatched <= rewrite_bound,
        "{mismatched} stale frames exceeds the {rewrite_bound} the guest rewrote"
    );

    for gpa in (0..192).map(Gpa) {
        assert_eq!(
            sim.machine().translate(gpa).unwrap(),
            sim.machine().snapshot_frame(gpa).unwrap()
        );
    }
    let served = sim.handle_request("web", "page").unwrap();
    assert_eq!(served, sim.ground_truth_resource_content("page").unwrap());
}

#[test]
fn countermeasure_blocks_extraction_of_a_noisy_guest() {
    let mut sim = build(BUSY_GUEST, true);
    // Identification is observation-only and still converges on the
    // right page with integrity checks active.
    let ranking = attacker_ranking(&mut sim, 25);
    let truth = sim.ground_truth_resource_pages("page").unwrap()[0];
    assert_eq!(ranking.top(1).next(), Some(truth));

    let plan = plan(&ranking, 64, 64).unwrap();
    let frames = sim.machine().original_frames();
    let report = extract_all(
        &mut sim,
        plan,
        &config(),
        &frames,
        &ExtractOptions::default(),
    )
    .unwrap();
    assert!(matches!(
        report.outcome,
        ExtractionOutcome::Impossible { .. }
    ));
    assert_eq!(report.coverage, 0.0);
    assert!(report
        .frames
        .values()
        .all(|state| *state == FrameState::Pending));

    // The untampered guest never faulted: its own requests, including
    // the whole noise stream, all executed.
    assert!(sim.counters().noise_faults.iter().all(|&f| f == 0));
    let served = sim.handle_request("web", "page").unwrap();
    assert_eq!(served, sim.ground_truth_resource_content("page").unwrap());
}
