//! Remap-and-request extraction of guest frame contents.
//!
//! Once identification has ranked the pages backing a served resource,
//! each of those pages becomes an extraction slot: point its
//! translation at a victim frame, request the resource, and the
//! response carries the victim frame's plaintext in that slot's chunk.
//! Iterating over every frame of interest dumps memory the host could
//! otherwise never read.
//!
//! The flow is: [`plan`] picks the slots from the ranking,
//! [`validate_plan`] confirms each slot really feeds a response chunk
//! (replacing misidentified pages from deeper in the ranking), and
//! [`extract_all`] / [`partial_extract`] run the batch loop — with
//! periodic rechecks that detect the resource moving out from under
//! the slots, rolling back anything extracted since the last good
//! check and re-running identification inline.
//!
//! Everything here observes the guest only through service responses;
//! the one host-side write is sentinel content staged in a spare frame
//! that no guest mapping uses. Mappings are restored on every exit
//! path, so an aborted run leaves the guest serving original content.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use crate::guest::{GuestError, SimInstance};
use crate::identify::{
    CandidateRanking, ConvergenceRule, ConvergenceTracker, IdentifyError, IdentifySession,
    SessionConfig,
};
use crate::mem::{FrameId, Gpa, MemError};
use crate::seed;

/// Fill tags for the two probe sentinels. Distinct tags give distinct
/// page contents, so a slot only passes a probe when both patterns
/// surface at the same chunk — a frame coincidentally equal to one
/// pattern cannot equal both.
const SENTINEL_TAG_A: u64 = 0xA55E_D001;
const SENTINEL_TAG_B: u64 = 0xA55E_D002;

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("ranking offers {have} candidates but the plan needs {need}")]
    InsufficientCandidates { have: usize, need: usize },
    #[error(
        "resource covers only {size_bytes} bytes of a {page_size}-byte page; \
         it can never carve a full frame"
    )]
    ResourceTooSmall { size_bytes: usize, page_size: usize },
    #[error("no spare frame available to stage probe content")]
    NoSpareFrame,
    #[error("extraction impossible: {reason}")]
    Impossible { reason: String },
    #[error(transparent)]
    Guest(#[from] GuestError),
    #[error(transparent)]
    Identify(#[from] IdentifyError),
    #[error(transparent)]
    Mem(#[from] MemError),
}

/// The chosen remap slots plus the fallback position in the ranking.
#[derive(Clone, Debug)]
pub struct ExtractionPlan {
    slots: Vec<Gpa>,
    /// Response chunk index served by each slot; filled by validation.
    chunks: Option<Vec<usize>>,
    r: usize,
    candidate_cursor: usize,
    ranking: CandidateRanking,
    resource_bytes: usize,
    page_size: usize,
}

impl ExtractionPlan {
    pub fn slots(&self) -> &[Gpa] {
        &self.slots
    }

    pub fn r(&self) -> usize {
        self.r
    }

    /// Next untried position in the ranking, for slot replacement.
    pub fn candidate_cursor(&self) -> usize {
        self.candidate_cursor
    }

    pub fn validated(&self) -> bool {
        self.chunks.is_some()
    }
}

/// Chooses the `r = ceil(resource_bytes / page_size)` best-ranked pages
/// as extraction slots.
///
/// A resource smaller than one page can only ever reveal its own length
/// in bytes per victim, so such plans are rejected outright; resources
/// with a partial tail page are accepted, and the tail slot's victims
/// are finished through a full slot in a second pass.
pub fn plan(
    ranking: &CandidateRanking,
    resource_bytes: usize,
    page_size: usize,
) -> Result<ExtractionPlan, ExtractError> {
    if resource_bytes < page_size {
        return Err(ExtractError::ResourceTooSmall {
            size_bytes: resource_bytes,
            page_size,
        });
    }
    let r = resource_bytes.div_ceil(page_size);
    if ranking.len() < r {
        return Err(ExtractError::InsufficientCandidates {
            have: ranking.len(),
            need: r,
        });
    }
    Ok(ExtractionPlan {
        slots: ranking.top(r).collect(),
        chunks: None,
        r,
        candidate_cursor: r,
        ranking: ranking.clone(),
        resource_bytes,
        page_size,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeVerdict {
    /// The slot feeds this response chunk.
    Belongs { chunk: usize },
    /// Remapping the slot left the response untouched.
    NotResource,
}

#[derive(Clone, Copy, Debug)]
pub struct ProbeOutcome {
    pub verdict: ProbeVerdict,
    /// Requests spent on this probe (1 when the first sentinel already
    /// fails to surface, 2 when both ran).
    pub requests: u64,
}

/// Locates `pattern` among the page-sized chunks of `response`. The
/// trailing chunk is compared as a prefix. Two matches mean the search
/// is ambiguous and count as no match.
fn find_sentinel(response: &[u8], pattern: &[u8], page_size: usize) -> Option<usize> {
    let mut found = None;
    for chunk in 0.. {
        let start = chunk * page_size;
        if start >= response.len() {
            break;
        }
        let end = (start + page_size).min(response.len());
        if response[start..end] == pattern[..end - start] {
            if found.is_some() {
                return None;
            }
            found = Some(chunk);
        }
    }
    found
}

/// Tests whether `slot` actually backs part of the target resource by
/// staging two sentinel patterns in a spare frame, remapping the slot
/// onto it, and looking for each pattern in the response. Both probes
/// must surface at the same chunk. The slot's mapping is restored
/// before returning, on every path.
pub fn probe_slot(
    sim: &mut SimInstance,
    slot: Gpa,
    service: &str,
    resource: &str,
) -> Result<ProbeOutcome, ExtractError> {
    let page_size = sim.machine().page_size();
    let spare = *sim
        .machine()
        .unmapped_frames()
        .first()
        .ok_or(ExtractError::NoSpareFrame)?;
    let mut pattern = vec![0u8; page_size];
    let mut requests = 0;
    let mut first_hit = None;
    for (round, tag) in [SENTINEL_TAG_A, SENTINEL_TAG_B].into_iter().enumerate() {
        seed::fill_pattern(tag ^ slot.0 as u64, &mut pattern);
        sim.machine_mut().host_write_frame(spare, &pattern)?;
        let previous = sim.machine_mut().remap(slot, spare)?;
        let outcome = sim.request_with_noise(service, resource);
        sim.machine_mut().remap(slot, previous)?;
        let (response, _) = outcome?;
        requests += 1;
        let response = match response {
            Ok(bytes) => bytes,
            Err(GuestError::RequestFaulted { .. }) => {
                return Err(ExtractError::Impossible {
                    reason: format!("tampered access through {slot} faulted on a probe"),
                });
            }
            Err(other) => return Err(other.into()),
        };
        match find_sentinel(&response, &pattern, page_size) {
            None => {
                return Ok(ProbeOutcome {
                    verdict: ProbeVerdict::NotResource,
                    requests,
                });
            }
            Some(chunk) if round == 0 => first_hit = Some(chunk),
            Some(chunk) => {
                let verdict = if first_hit == Some(chunk) {
                    ProbeVerdict::Belongs { chunk }
                } else {
                    ProbeVerdict::NotResource
                };
                return Ok(ProbeOutcome { verdict, requests });
            }
        }
    }
    unreachable!("the second probe round always returns")
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ValidationStats {
    pub probe_requests: u64,
    pub misidentified_slots: u64,
}

/// Probes every slot, replacing rejected ones from deeper in the
/// ranking until each slot is confirmed against a distinct response
/// chunk. Fails with [`ExtractError::InsufficientCandidates`] when the
/// ranking runs dry — the signal to re-run identification.
pub fn validate_plan(
    sim: &mut SimInstance,
    plan: &mut ExtractionPlan,
    service: &str,
    resource: &str,
) -> Result<ValidationStats, ExtractError> {
    let mut stats = ValidationStats::default();
    let mut chunks = Vec::with_capacity(plan.r);
    let mut taken = BTreeSet::new();
    for i in 0..plan.r {
        loop {
            let outcome = probe_slot(sim, plan.slots[i], service, resource)?;
            stats.probe_requests += outcome.requests;
            if let ProbeVerdict::Belongs { chunk } = outcome.verdict {
                if taken.insert(chunk) {
                    chunks.push(chunk);
                    break;
                }
            }
            stats.misidentified_slots += 1;
            let replacement = loop {
                let idx = plan.candidate_cursor;
                plan.candidate_cursor += 1;
                match plan.ranking.entries().get(idx) {
                    Some(entry) if plan.slots.contains(&entry.gpa) => continue,
                    Some(entry) => break Some(entry.gpa),
                    None => break None,
                }
            };
            match replacement {
                Some(gpa) => plan.slots[i] = gpa,
                None => {
                    return Err(ExtractError::InsufficientCandidates {
                        have: plan.ranking.len(),
                        need: plan.r,
                    });
                }
            }
        }
    }
    plan.chunks = Some(chunks);
    Ok(stats)
}

#[derive(Clone, Copy, Debug)]
pub struct ExtractOptions {
    /// Batches between slot-staleness rechecks; 0 disables them (and
    /// with them, relocation recovery).
    pub recheck_every: usize,
    /// Ceiling on inline re-identification rounds before giving up.
    pub max_reidentifications: usize,
    /// Iteration cap for one inline re-identification.
    pub reidentify_iterations: usize,
    /// Consecutive stable-iteration requirement for its convergence.
    pub reidentify_patience: usize,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        ExtractOptions {
            recheck_every: 64,
            max_reidentifications: 8,
            reidentify_iterations: 60,
            reidentify_patience: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Confidence {
    /// The full page was recovered.
    Full,
    /// Only the head was recovered, through the partial tail slot of an
    /// unaligned resource; a finished run upgrades these to `Full`.
    HeadOnly,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FrameState {
    Pending,
    Extracted {
        bytes: Vec<u8>,
        confidence: Confidence,
    },
    /// Reserved for hosts whose frames can fail individually; the
    /// simulator's only fault mode (the integrity countermeasure)
    /// terminates the whole run instead.
    Unreadable,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ExtractionOutcome {
    Complete,
    /// Ended early: a stop predicate matched, or relocation outpaced
    /// re-identification.
    Stopped { reason: String },
    /// The countermeasure faulted a tampered access; nothing can be
    /// carved.
    Impossible { reason: String },
}

#[derive(Clone, Debug)]
pub struct ExtractionReport {
    pub frames: BTreeMap<FrameId, FrameState>,
    pub outcome: ExtractionOutcome,
    /// Tampered data requests (one per batch).
    pub requests_issued: u64,
    pub probe_requests: u64,
    pub recheck_requests: u64,
    pub reidentify_requests: u64,
    pub misidentified_slots: u64,
    pub reidentifications: u64,
    /// Frames whose extraction was discarded after a stale-slot
    /// detection and done over.
    pub rolled_back_frames: u64,
    /// Extracted fraction of the requested frames.
    pub coverage: f64,
}

impl ExtractionReport {
    pub fn extracted_count(&self) -> usize {
        self.frames
            .values()
            .filter(|s| matches!(s, FrameState::Extracted { .. }))
            .count()
    }

    /// Recovered plaintext, frame order ascending.
    pub fn image(&self) -> impl Iterator<Item = (FrameId, &[u8])> {
        self.frames.iter().filter_map(|(frame, state)| match state {
            FrameState::Extracted { bytes, .. } => Some((*frame, bytes.as_slice())),
            _ => None,
        })
    }

    pub fn is_complete(&self) -> bool {
        self.outcome == ExtractionOutcome::Complete
    }
}

/// Extracts every listed frame. See [`Runner`]'s batch loop for the
/// exact order of operations; the summary: validate slots if the caller
/// has not, batch-remap and request, carve response chunks, apply
/// relocation pressure from elapsed guest time, recheck on the
/// configured cadence, and extract the frames backing the slots
/// themselves last, through a spare-frame rotation.
pub fn extract_all(
    sim: &mut SimInstance,
    plan: ExtractionPlan,
    config: &SessionConfig,
    frames: &[FrameId],
    opts: &ExtractOptions,
) -> Result<ExtractionReport, ExtractError> {
    run(sim, plan, config, frames, opts, None)
}

/// As [`extract_all`], but halts as soon as `stop` returns true for a
/// freshly carved frame. Useful when hunting a known marker instead of
/// dumping everything.
pub fn partial_extract(
    sim: &mut SimInstance,
    plan: ExtractionPlan,
    config: &SessionConfig,
    frames: &[FrameId],
    opts: &ExtractOptions,
    mut stop: impl FnMut(FrameId, &[u8]) -> bool,
) -> Result<ExtractionReport, ExtractError> {
    run(sim, plan, config, frames, opts, Some(&mut stop))
}

fn run(
    sim: &mut SimInstance,
    plan: ExtractionPlan,
    config: &SessionConfig,
    frames: &[FrameId],
    opts: &ExtractOptions,
    stop: Option<&mut dyn FnMut(FrameId, &[u8]) -> bool>,
) -> Result<ExtractionReport, ExtractError> {
    let targets: BTreeSet<FrameId> = frames.iter().copied().collect();
    if targets.is_empty() {
        return Ok(ExtractionReport {
            frames: BTreeMap::new(),
            outcome: ExtractionOutcome::Complete,
            requests_issued: 0,
            probe_requests: 0,
            recheck_requests: 0,
            reidentify_requests: 0,
            misidentified_slots: 0,
            reidentifications: 0,
            rolled_back_frames: 0,
            coverage: 1.0,
        });
    }
    let spare = *sim
        .machine()
        .unmapped_frames()
        .first()
        .ok_or(ExtractError::NoSpareFrame)?;
    let mut runner = Runner {
        sim,
        plan,
        config,
        opts,
        spare,
        frames: targets.iter().map(|&f| (f, FrameState::Pending)).collect(),
        pending: targets.into_iter().collect(),
        redo: VecDeque::new(),
        deferred: Vec::new(),
        since_recheck: Vec::new(),
        reference: None,
        batches: 0,
        last_clock: 0.0,
        requests_issued: 0,
        probe_requests: 0,
        recheck_requests: 0,
        reidentify_requests: 0,
        misidentified_slots: 0,
        reidentifications: 0,
        rolled_back_frames: 0,
    };
    runner.last_clock = runner.sim.clock_seconds();
    let outcome = runner.drive(stop);
    // Restoration holds on every path, including errors.
    runner.sim.machine_mut().restore_mappings();
    let outcome = outcome?;
    Ok(runner.into_report(outcome))
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Phase {
    /// Ordinary frames; slot mappings are restored after every batch.
    Main,
    /// Frames that back the slots themselves: the slots are first
    /// rotated onto the spare frame so those frames stop backing
    /// anything, then extracted like any other victim.
    Final,
}

struct Runner<'a> {
    sim: &'a mut SimInstance,
    plan: ExtractionPlan,
    config: &'a SessionConfig,
    opts: &'a ExtractOptions,
    spare: FrameId,
    frames: BTreeMap<FrameId, FrameState>,
    pending: VecDeque<FrameId>,
    /// Head-extracted through the partial tail slot; needs a full slot.
    redo: VecDeque<FrameId>,
    /// Currently backing a slot; extracted in the final phase.
    deferred: Vec<FrameId>,
    since_recheck: Vec<FrameId>,
    reference: Option<Vec<u8>>,
    batches: u64,
    last_clock: f64,
    requests_issued: u64,
    probe_requests: u64,
    recheck_requests: u64,
    reidentify_requests: u64,
    misidentified_slots: u64,
    reidentifications: u64,
    rolled_back_frames: u64,
}

impl Runner<'_> {
    fn chunk_of(&self, slot_idx: usize) -> usize {
        self.plan.chunks.as_ref().expect("plan is validated")[slot_idx]
    }

    fn chunk_len(&self, chunk: usize) -> usize {
        let start = chunk * self.plan.page_size;
        (start + self.plan.page_size).min(self.plan.resource_bytes) - start
    }

    fn drive(
        &mut self,
        mut stop: Option<&mut dyn FnMut(FrameId, &[u8]) -> bool>,
    ) -> Result<ExtractionOutcome, ExtractError> {
        if !self.plan.validated() {
            match validate_plan(
                self.sim,
                &mut self.plan,
                &self.config.service,
                &self.config.target_resource,
            ) {
                Ok(stats) => {
                    self.probe_requests += stats.probe_requests;
                    self.misidentified_slots += stats.misidentified_slots;
                }
                Err(ExtractError::Impossible { reason }) => {
                    return Ok(ExtractionOutcome::Impossible { reason });
                }
                Err(other) => return Err(other),
            }
        }

        let mut phase = Phase::Main;
        loop {
            if self.pending.is_empty() && self.redo.is_empty() {
                match phase {
                    Phase::Main => {
                        // Verify the last stretch before trusting it.
                        if self.opts.recheck_every > 0 && !self.since_recheck.is_empty() {
                            if let Some(terminal) = self.recheck()? {
                                return Ok(terminal);
                            }
                            if !self.pending.is_empty() {
                                continue; // rolled back; keep extracting
                            }
                        }
                        if self.deferred.is_empty() {
                            return Ok(ExtractionOutcome::Complete);
                        }
                        phase = Phase::Final;
                        self.pending.extend(self.deferred.drain(..));
                        self.rotate_slots()?;
                    }
                    Phase::Final => return Ok(ExtractionOutcome::Complete),
                }
            }

            let backing: BTreeSet<FrameId> = match phase {
                Phase::Main => self
                    .plan
                    .slots
                    .iter()
                    .map(|&g| self.sim.machine().translate(g))
                    .collect::<Result<_, _>>()?,
                Phase::Final => BTreeSet::new(),
            };
            let mut assignment: Vec<(usize, FrameId)> = Vec::new();
            for slot_idx in 0..self.plan.r {
                let full_slot = self.chunk_len(self.chunk_of(slot_idx)) == self.plan.page_size;
                let mut victim = None;
                if full_slot {
                    victim = Self::next_victim(&mut self.redo, &backing, &mut self.deferred);
                }
                if victim.is_none() {
                    victim = Self::next_victim(&mut self.pending, &backing, &mut self.deferred);
                }
                if let Some(v) = victim {
                    assignment.push((slot_idx, v));
                }
            }
            if assignment.is_empty() {
                continue; // everything left was deferred
            }

            for &(slot_idx, victim) in &assignment {
                self.sim.machine_mut().remap(self.plan.slots[slot_idx], victim)?;
            }
            let outcome = self
                .sim
                .request_with_noise(&self.config.service, &self.config.target_resource);
            match phase {
                Phase::Main => {
                    self.sim.machine_mut().restore_mappings();
                }
                Phase::Final => self.rotate_slots()?,
            }
            let (response, _) = outcome?;
            self.requests_issued += 1;
            self.batches += 1;

            let mut force_recheck = false;
            match response {
                Err(GuestError::RequestFaulted { .. }) => {
                    for &(_, victim) in &assignment {
                        self.pending.push_front(victim);
                    }
                    return Ok(ExtractionOutcome::Impossible {
                        reason: "tampered access faulted mid-extraction".into(),
                    });
                }
                Err(other) => return Err(other.into()),
                Ok(response) if response.len() != self.plan.resource_bytes => {
                    // The serve changed shape under us; retry the batch
                    // after a staleness check.
                    for &(_, victim) in &assignment {
                        self.pending.push_front(victim);
                    }
                    force_recheck = true;
                }
                Ok(response) => {
                    for &(slot_idx, victim) in &assignment {
                        let chunk = self.chunk_of(slot_idx);
                        let start = chunk * self.plan.page_size;
                        let bytes =
                            response[start..start + self.chunk_len(chunk)].to_vec();
                        let confidence = if bytes.len() == self.plan.page_size {
                            Confidence::Full
                        } else {
                            self.redo.push_back(victim);
                            Confidence::HeadOnly
                        };
                        let matched = stop
                            .as_deref_mut()
                            .is_some_and(|pred| pred(victim, &bytes));
                        self.frames
                            .insert(victim, FrameState::Extracted { bytes, confidence });
                        self.since_recheck.push(victim);
                        if matched {
                            return Ok(ExtractionOutcome::Stopped {
                                reason: "stop predicate matched".into(),
                            });
                        }
                    }
                }
            }

            // Guest time advanced by one request window; let the guest
            // relocate on its own schedule.
            let now = self.sim.clock_seconds();
            let elapsed = now - self.last_clock;
            self.last_clock = now;
            self.sim
                .maybe_relocate(&self.config.target_resource, elapsed)?;

            let due = self.opts.recheck_every > 0
                && self.batches % self.opts.recheck_every as u64 == 0;
            if phase == Phase::Main && (due || force_recheck) {
                if let Some(terminal) = self.recheck()? {
                    return Ok(terminal);
                }
            }
        }
    }

    /// Pops the next frame from `queue` that is not currently backing a
    /// slot, deferring any that are.
    fn next_victim(
        queue: &mut VecDeque<FrameId>,
        backing: &BTreeSet<FrameId>,
        deferred: &mut Vec<FrameId>,
    ) -> Option<FrameId> {
        while let Some(frame) = queue.pop_front() {
            if backing.contains(&frame) {
                deferred.push(frame);
            } else {
                return Some(frame);
            }
        }
        None
    }

    /// Points every slot at the spare frame, freeing the frames that
    /// originally backed them for extraction.
    fn rotate_slots(&mut self) -> Result<(), ExtractError> {
        for &slot in &self.plan.slots {
            self.sim.machine_mut().remap(slot, self.spare)?;
        }
        Ok(())
    }

    /// Untampered refetch plus a sentinel probe of slot 0. A moved or
    /// evicted-and-reloaded resource leaves the refetch content intact,
    /// so the probe is the authoritative staleness signal; on staleness
    /// everything since the last good check is rolled back and
    /// identification reruns inline.
    fn recheck(&mut self) -> Result<Option<ExtractionOutcome>, ExtractError> {
        let (response, _) = self
            .sim
            .request_with_noise(&self.config.service, &self.config.target_resource)?;
        self.recheck_requests += 1;
        let response = match response {
            Ok(bytes) => bytes,
            Err(GuestError::RequestFaulted { .. }) => {
                return Ok(Some(ExtractionOutcome::Impossible {
                    reason: "untampered recheck faulted".into(),
                }));
            }
            Err(other) => return Err(other.into()),
        };
        let content_moved = self
            .reference
            .as_ref()
            .is_some_and(|reference| *reference != response);
        self.reference = Some(response);

        let probe = probe_slot(
            self.sim,
            self.plan.slots[0],
            &self.config.service,
            &self.config.target_resource,
        );
        let slot_ok = match probe {
            Ok(outcome) => {
                self.probe_requests += outcome.requests;
                outcome.verdict == ProbeVerdict::Belongs { chunk: self.chunk_of(0) }
            }
            Err(ExtractError::Impossible { reason }) => {
                return Ok(Some(ExtractionOutcome::Impossible { reason }));
            }
            Err(other) => return Err(other),
        };
        if slot_ok && !content_moved {
            self.since_recheck.clear();
            return Ok(None);
        }

        self.rolled_back_frames += self.since_recheck.len() as u64;
        let rolled: BTreeSet<FrameId> = self.since_recheck.drain(..).collect();
        for &frame in &rolled {
            self.frames.insert(frame, FrameState::Pending);
            self.pending.push_back(frame);
        }
        self.redo.retain(|f| !rolled.contains(f));
        self.replan()
    }

    /// Re-runs identification and replaces the plan. Bounded by
    /// `max_reidentifications` across the whole run.
    fn replan(&mut self) -> Result<Option<ExtractionOutcome>, ExtractError> {
        loop {
            if self.reidentifications >= self.opts.max_reidentifications as u64 {
                return Ok(Some(ExtractionOutcome::Stopped {
                    reason: "relocation outpaced re-identification".into(),
                }));
            }
            self.reidentifications += 1;
            let ranking = self.reidentify()?;
            let mut fresh = match plan(&ranking, self.plan.resource_bytes, self.plan.page_size) {
                Ok(p) => p,
                Err(ExtractError::InsufficientCandidates { .. }) => continue,
                Err(other) => return Err(other),
            };
            match validate_plan(
                self.sim,
                &mut fresh,
                &self.config.service,
                &self.config.target_resource,
            ) {
                Ok(stats) => {
                    self.probe_requests += stats.probe_requests;
                    self.misidentified_slots += stats.misidentified_slots;
                    self.plan = fresh;
                    self.reference = None;
                    return Ok(None);
                }
                Err(ExtractError::Impossible { reason }) => {
                    return Ok(Some(ExtractionOutcome::Impossible { reason }));
                }
                Err(ExtractError::InsufficientCandidates { .. }) => continue,
                Err(other) => return Err(other),
            }
        }
    }

    fn reidentify(&mut self) -> Result<CandidateRanking, ExtractError> {
        let mut session = IdentifySession::new(SessionConfig {
            service: self.config.service.clone(),
            target_resource: self.config.target_resource.clone(),
            control_resource: self.config.control_resource.clone(),
            eval_target: None,
        });
        let mut tracker = ConvergenceTracker::new(ConvergenceRule::StableRanking {
            prefix: self.plan.r,
            patience: self.opts.reidentify_patience,
        });
        for _ in 0..self.opts.reidentify_iterations {
            let record = session.step(self.sim)?;
            if tracker.observe(record.iteration, record.top_size, &session.ranking()) {
                break;
            }
        }
        self.reidentify_requests += session.requests_issued();
        Ok(session.ranking())
    }

    fn into_report(self, outcome: ExtractionOutcome) -> ExtractionReport {
        let total = self.frames.len();
        let extracted = self
            .frames
            .values()
            .filter(|s| matches!(s, FrameState::Extracted { .. }))
            .count();
        ExtractionReport {
            coverage: if total == 0 {
                1.0
            } else {
                extracted as f64 / total as f64
            },
            frames: self.frames,
            outcome,
            requests_issued: self.requests_issued,
            probe_requests: self.probe_requests,
            recheck_requests: self.recheck_requests,
            reidentify_requests: self.reidentify_requests,
            misidentified_slots: self.misidentified_slots,
            reidentifications: self.reidentifications,
            rolled_back_frames: self.rolled_back_frames,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identify::{accumulate, probabilities, PageMultiset, PageSet};
    use crate::scenario::ScenarioSpec;

    fn sim_toml(payload_pages: usize, payload_bytes: usize) -> String {
        format!(
            r#"
guest_pages = 96
page_size = 64
seed = 11

[target]
service = "svc"
resource = "payload"
control = "decoy"

[noise]
level = 0.0
window_seconds = 0.05

[[services]]
name = "svc"
kernel_common = 4
service_common = 4
volatile_pool = 24
volatile_draw = {{ min = 2, max = 6 }}
resources = ["payload", "decoy"]

[[resources]]
name = "payload"
pages = {payload_pages}
size_bytes = {payload_bytes}

[[resources]]
name = "decoy"
pages = 2
size_bytes = 128
"#
        )
    }

    fn build_sim(payload_pages: usize, payload_bytes: usize, integrity: bool) -> SimInstance {
        let spec = ScenarioSpec::from_toml(&sim_toml(payload_pages, payload_bytes), "<test>")
            .unwrap();
        spec.build_seeded(spec.seed, Some(integrity)).unwrap()
    }

    fn session_config() -> SessionConfig {
        SessionConfig {
            service: "svc".into(),
            target_resource: "payload".into(),
            control_resource: "decoy".into(),
            eval_target: None,
        }
    }

    /// Runs the identification phase the way an attacker would and
    /// returns its ranking.
    fn identified_ranking(sim: &mut SimInstance, iterations: usize) -> CandidateRanking {
        let mut session = IdentifySession::new(session_config());
        for _ in 0..iterations {
            session.step(sim).unwrap();
        }
        session.ranking()
    }

    fn demo_ranking() -> CandidateRanking {
        let refined: PageSet = [Gpa(42), Gpa(16)].into_iter().collect();
        let first = accumulate(&PageMultiset::new(), &[Gpa(42)].into_iter().collect(), &refined);
        let second = accumulate(
            &first,
            &[Gpa(42), Gpa(16)].into_iter().collect(),
            &refined,
        );
        let touches = [(Gpa(42), 5), (Gpa(16), 3)].into_iter().collect();
        probabilities(&second, &touches)
    }

    #[test]
    fn plan_slot_arithmetic() {
        let ranking = demo_ranking();
        let one = plan(&ranking, 4096, 4096).unwrap();
        assert_eq!(one.r(), 1);
        assert_eq!(one.slots(), &[Gpa(42)]);
        assert_eq!(one.candidate_cursor(), 1);

        match plan(&ranking, 10000, 4096) {
            Err(ExtractError::InsufficientCandidates { have: 2, need: 3 }) => {}
            other => panic!("expected insufficient candidates, got {other:?}"),
        }
        match plan(&ranking, 2000, 4096) {
            Err(ExtractError::ResourceTooSmall { .. }) => {}
            other => panic!("expected rejection of sub-page resource, got {other:?}"),
        }
    }

    #[test]
    fn probe_distinguishes_resource_pages() {
        let mut sim = build_sim(1, 64, false);
        let payload = sim.ground_truth_resource_pages("payload").unwrap()[0];
        let outcome = probe_slot(&mut sim, payload, "svc", "payload").unwrap();
        assert_eq!(outcome.verdict, ProbeVerdict::Belongs { chunk: 0 });
        assert_eq!(outcome.requests, 2);

        // Any mapped page outside the resource must be rejected after a
        // single sentinel miss, decoy pages included.
        let decoy = sim.ground_truth_resource_pages("decoy").unwrap()[0];
        let outcome = probe_slot(&mut sim, decoy, "svc", "payload").unwrap();
        assert_eq!(outcome.verdict, ProbeVerdict::NotResource);
        assert_eq!(outcome.requests, 1);

        // Probing never leaves a tampered mapping behind.
        for gpa in (0..96).map(Gpa) {
            assert_eq!(
                sim.machine().translate(gpa).unwrap(),
                sim.machine().snapshot_frame(gpa).unwrap()
            );
        }
    }

    #[test]
    fn probe_faults_under_integrity_mode() {
        let mut sim = build_sim(1, 64, true);
        let payload = sim.ground_truth_resource_pages("payload").unwrap()[0];
        match probe_slot(&mut sim, payload, "svc", "payload") {
            Err(ExtractError::Impossible { .. }) => {}
            other => panic!("expected impossibility, got {other:?}"),
        }
        // The guest itself is unharmed.
        let served = sim.handle_request("svc", "payload").unwrap();
        assert_eq!(served, sim.ground_truth_resource_content("payload").unwrap());
    }

    #[test]
    fn extract_all_recovers_every_frame_bit_exact() {
        let mut sim = build_sim(1, 64, false);
        let ranking = identified_ranking(&mut sim, 12);
        let resource_bytes = sim.handle_request("svc", "payload").unwrap().len();
        let mut plan = plan(&ranking, resource_bytes, 64).unwrap();
        validate_plan(&mut sim, &mut plan, "svc", "payload").unwrap();

        let frames = sim.machine().original_frames();
        let opts = ExtractOptions {
            recheck_every: 0,
            ..ExtractOptions::default()
        };
        let report =
            extract_all(&mut sim, plan, &session_config(), &frames, &opts).unwrap();

        assert!(report.is_complete());
        assert_eq!(report.coverage, 1.0);
        assert_eq!(report.extracted_count(), frames.len());
        // One slot, prevalidated, no rechecks: the request count is the
        // exact floor, one per frame.
        assert_eq!(report.requests_issued, frames.len() as u64);
        for (frame, bytes) in report.image() {
            assert_eq!(bytes, sim.machine().frame_bytes(frame).unwrap(), "{frame}");
        }
        // Restoration: the guest serves originals again.
        for gpa in (0..96).map(Gpa) {
            assert_eq!(
                sim.machine().translate(gpa).unwrap(),
                sim.machine().snapshot_frame(gpa).unwrap()
            );
        }
        let served = sim.handle_request("svc", "payload").unwrap();
        assert_eq!(served, sim.ground_truth_resource_content("payload").unwrap());
    }

    #[test]
    fn misidentified_slot_is_replaced_from_the_ranking() {
        let mut sim = build_sim(1, 64, false);
        let payload = sim.ground_truth_resource_pages("payload").unwrap()[0];
        // A ranking that puts a bogus page above the real one.
        let bogus = (0..96)
            .map(Gpa)
            .find(|g| {
                *g != payload
                    && !sim
                        .ground_truth_resource_pages("decoy")
                        .unwrap()
                        .contains(g)
            })
            .unwrap();
        let refined: PageSet = [bogus, payload].into_iter().collect();
        let mut multiset = PageMultiset::new();
        for _ in 0..5 {
            multiset = accumulate(&multiset, &[bogus].into_iter().collect(), &refined);
        }
        for _ in 0..3 {
            multiset = accumulate(&multiset, &[payload].into_iter().collect(), &refined);
        }
        let touches = [(bogus, 9), (payload, 8)].into_iter().collect();
        let ranking = probabilities(&multiset, &touches);
        assert_eq!(ranking.top(1).next(), Some(bogus));

        let mut plan = plan(&ranking, 64, 64).unwrap();
        let stats = validate_plan(&mut sim, &mut plan, "svc", "payload").unwrap();
        assert_eq!(stats.misidentified_slots, 1);
        assert_eq!(plan.slots(), &[payload]);

        let frames: Vec<FrameId> = sim.machine().original_frames()[..16].to_vec();
        let report = extract_all(
            &mut sim,
            plan,
            &session_config(),
            &frames,
            &ExtractOptions::default(),
        )
        .unwrap();
        assert!(report.is_complete());
        for (frame, bytes) in report.image() {
            assert_eq!(bytes, sim.machine().frame_bytes(frame).unwrap());
        }
    }

    #[test]
    fn countermeasure_stops_extraction_cold() {
        let mut sim = build_sim(1, 64, true);
        // Identification is passive and still works; only remapping dies.
        let ranking = identified_ranking(&mut sim, 12);
        let plan = plan(&ranking, 64, 64).unwrap();
        let frames = sim.machine().original_frames();
        let report = extract_all(
            &mut sim,
            plan,
            &session_config(),
            &frames,
            &ExtractOptions::default(),
        )
        .unwrap();
        assert!(matches!(
            report.outcome,
            ExtractionOutcome::Impossible { .. }
        ));
        assert_eq!(report.coverage, 0.0);
        assert_eq!(report.extracted_count(), 0);
        // The untampered guest is untouched by the attempt.
        let served = sim.handle_request("svc", "payload").unwrap();
        assert_eq!(served, sim.ground_truth_resource_content("payload").unwrap());
    }

    #[test]
    fn unaligned_resource_finishes_through_full_slots() {
        // 160 bytes over 64-byte pages: two full slots and a 32-byte
        // tail slot whose victims need a second pass.
        let mut sim = build_sim(3, 160, false);
        let ranking = identified_ranking(&mut sim, 15);
        let resource_bytes = sim.handle_request("svc", "payload").unwrap().len();
        assert_eq!(resource_bytes, 160);
        let mut plan = plan(&ranking, resource_bytes, 64).unwrap();
        assert_eq!(plan.r(), 3);
        validate_plan(&mut sim, &mut plan, "svc", "payload").unwrap();

        let frames: Vec<FrameId> = sim.machine().original_frames()[..20].to_vec();
        let report = extract_all(
            &mut sim,
            plan,
            &session_config(),
            &frames,
            &ExtractOptions::default(),
        )
        .unwrap();
        assert!(report.is_complete());
        assert_eq!(report.extracted_count(), 20);
        for (frame, state) in &report.frames {
            match state {
                FrameState::Extracted { bytes, confidence } => {
                    assert_eq!(*confidence, Confidence::Full);
                    assert_eq!(
                        bytes.as_slice(),
                        sim.machine().frame_bytes(*frame).unwrap(),
                        "{frame}"
                    );
                }
                other => panic!("{frame} not extracted: {other:?}"),
            }
        }
        assert!(report.requests_issued >= (20f64 / 3.0).ceil() as u64);
    }

    #[test]
    fn partial_extract_stops_at_a_planted_marker() {
        let mut sim = build_sim(1, 64, false);
        let ranking = identified_ranking(&mut sim, 12);
        let frames = sim.machine().original_frames();
        let payload_frame = sim
            .machine()
            .translate(sim.ground_truth_resource_pages("payload").unwrap()[0])
            .unwrap();
        // A frame the attacker wants, identified by content: not the
        // slot's own backing (which is extracted last).
        let wanted = frames.iter().copied().find(|f| *f != payload_frame).unwrap();
        let marker = sim.machine().frame_bytes(wanted).unwrap().to_vec();

        let plan = plan(&ranking, 64, 64).unwrap();
        let report = partial_extract(
            &mut sim,
            plan,
            &session_config(),
            &frames,
            &ExtractOptions::default(),
            |_, bytes| bytes == marker,
        )
        .unwrap();
        assert!(matches!(report.outcome, ExtractionOutcome::Stopped { .. }));
        assert!(report.coverage < 1.0);
        assert!(matches!(
            report.frames.get(&wanted),
            Some(FrameState::Extracted { .. })
        ));
    }

    #[test]
    fn partial_extract_with_inert_predicate_matches_extract_all() {
        let frames: Vec<FrameId> = {
            let sim = build_sim(1, 64, false);
            sim.machine().original_frames()[..24].to_vec()
        };
        let run_full = |use_predicate: bool| {
            let mut sim = build_sim(1, 64, false);
            let ranking = identified_ranking(&mut sim, 12);
            let plan = plan(&ranking, 64, 64).unwrap();
            let opts = ExtractOptions::default();
            if use_predicate {
                partial_extract(
                    &mut sim,
                    plan,
                    &session_config(),
                    &frames,
                    &opts,
                    |_, _| false,
                )
                .unwrap()
            } else {
                extract_all(&mut sim, plan, &session_config(), &frames, &opts).unwrap()
            }
        };
        let a = run_full(true);
        let b = run_full(false);
        assert_eq!(a.outcome, b.outcome);
        assert_eq!(a.requests_issued, b.requests_issued);
        assert_eq!(a.frames, b.frames);
    }

    #[test]
    fn empty_frame_list_is_a_no_op() {
        let mut sim = build_sim(1, 64, false);
        let ranking = identified_ranking(&mut sim, 12);
        let plan = plan(&ranking, 64, 64).unwrap();
        let report = extract_all(
            &mut sim,
            plan,
            &session_config(),
            &[],
            &ExtractOptions::default(),
        )
        .unwrap();
        assert!(report.is_complete());
        assert_eq!(report.requests_issued, 0);
        assert_eq!(report.probe_requests, 0);
        assert!(report.frames.is_empty());
    }
}
