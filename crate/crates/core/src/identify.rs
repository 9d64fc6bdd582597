//! Narrowing down which guest pages back a chosen resource, using only
//! access recordings.
//!
//! One identification iteration takes two tracked windows:
//!
//! * a *target sample*: the pages touched while the attacker requests
//!   the target resource, and
//! * a *control sample*: the pages touched while the attacker requests
//!   some other resource of the same service.
//!
//! The running *refined set* is the intersection of all target samples
//! so far — pages that were present every single time the target was
//! served. Each iteration's *fresh candidates* are the refined pages
//! absent from that iteration's control sample: they were needed for
//! the target but not for the other resource. Fresh candidates
//! accumulate into a multiset; a page's multiplicity divided by the
//! total multiset size is its estimated probability of backing the
//! target. Concurrent clients can request the target during a control
//! window, which suppresses the target's own pages from that
//! iteration's fresh candidates — the attack's main noise term.
//!
//! Ties in probability are broken toward pages touched *later* in the
//! serving request, since a served payload is read at the end of
//! request handling.

use std::collections::{BTreeMap, BTreeSet};

use num_rational::Ratio;
use thiserror::Error;

use crate::guest::{GuestError, SimInstance};
use crate::mem::{AccessRecording, Gpa};

pub type PageSet = BTreeSet<Gpa>;

#[derive(Debug, Error)]
pub enum IdentifyError {
    #[error("true target page {target} fell out of the refined set at iteration {iteration}")]
    TargetLost { target: Gpa, iteration: usize },
    #[error(transparent)]
    Guest(#[from] GuestError),
}

/// Pages with positive multiplicities; zero counts are never stored.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PageMultiset {
    counts: BTreeMap<Gpa, u64>,
}

impl PageMultiset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self, gpa: Gpa) -> u64 {
        self.counts.get(&gpa).copied().unwrap_or(0)
    }

    /// Total multiplicity (the multiset's cardinality).
    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    /// Number of distinct pages.
    pub fn support_len(&self) -> usize {
        self.counts.len()
    }

    pub fn support(&self) -> impl Iterator<Item = Gpa> + '_ {
        self.counts.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Gpa, u64)> + '_ {
        self.counts.iter().map(|(&g, &c)| (g, c))
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    fn add(&mut self, gpa: Gpa) {
        *self.counts.entry(gpa).or_insert(0) += 1;
    }

    fn retain_pages(&mut self, keep: &PageSet) {
        self.counts.retain(|g, _| keep.contains(g));
    }
}

/// Intersection step: pages that survived every target sample.
pub fn refine(refined: &PageSet, target_sample: &PageSet) -> PageSet {
    refined.intersection(target_sample).copied().collect()
}

/// Fresh candidates of one iteration: refined pages the control sample
/// did not need.
pub fn likely_candidates(refined: &PageSet, control_sample: &PageSet) -> PageSet {
    refined.difference(control_sample).copied().collect()
}

/// Accumulation step: previous multiset plus this iteration's fresh
/// candidates, dropping anything that fell out of the refined set.
pub fn accumulate(
    previous: &PageMultiset,
    fresh: &PageSet,
    refined: &PageSet,
) -> PageMultiset {
    let mut next = previous.clone();
    for &gpa in fresh {
        next.add(gpa);
    }
    next.retain_pages(refined);
    next
}

/// One candidate with its estimated probability of backing the target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankedCandidate {
    pub gpa: Gpa,
    pub probability: Ratio<u64>,
    pub count: u64,
    /// Latest first-touch position observed across target samples.
    pub last_touch: usize,
}

/// Candidates sorted best-first: probability descending, later touch
/// positions first among ties, then page index for determinism.
#[derive(Clone, Debug, Default)]
pub struct CandidateRanking {
    entries: Vec<RankedCandidate>,
}

impl CandidateRanking {
    pub fn entries(&self) -> &[RankedCandidate] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn top(&self, n: usize) -> impl Iterator<Item = Gpa> + '_ {
        self.entries.iter().take(n).map(|e| e.gpa)
    }

    pub fn position(&self, gpa: Gpa) -> Option<usize> {
        self.entries.iter().position(|e| e.gpa == gpa)
    }
}

/// Builds the ranking from a multiset and touch positions.
pub fn probabilities(
    candidates: &PageMultiset,
    last_touch: &BTreeMap<Gpa, usize>,
) -> CandidateRanking {
    let total = candidates.total();
    if total == 0 {
        return CandidateRanking::default();
    }
    let mut entries: Vec<RankedCandidate> = candidates
        .iter()
        .map(|(gpa, count)| RankedCandidate {
            gpa,
            probability: Ratio::new(count, total),
            count,
            last_touch: last_touch.get(&gpa).copied().unwrap_or(0),
        })
        .collect();
    entries.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then(b.last_touch.cmp(&a.last_touch))
            .then(a.gpa.cmp(&b.gpa))
    });
    CandidateRanking { entries }
}

/// The evolving knowledge of one identification run.
#[derive(Clone, Debug, Default)]
pub struct IdentificationState {
    iterations: usize,
    refined: Option<PageSet>,
    candidates: PageMultiset,
    last_touch: BTreeMap<Gpa, usize>,
}

impl IdentificationState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Pages still compatible with every target sample. Empty before the
    /// first iteration.
    pub fn refined(&self) -> PageSet {
        self.refined.clone().unwrap_or_default()
    }

    pub fn refined_len(&self) -> usize {
        self.refined.as_ref().map_or(0, |r| r.len())
    }

    pub fn candidates(&self) -> &PageMultiset {
        &self.candidates
    }

    /// Folds one (target sample, control sample) pair into the state.
    pub fn apply_iteration(&mut self, target_sample: &AccessRecording, control_sample: &PageSet) {
        let target_set = target_sample.page_set();
        let refined = match self.refined.take() {
            None => target_set,
            Some(previous) => refine(&previous, &target_set),
        };
        let fresh = likely_candidates(&refined, control_sample);
        self.candidates = accumulate(&self.candidates, &fresh, &refined);

        for (pos, &gpa) in target_sample.pages().iter().enumerate() {
            if refined.contains(&gpa) {
                let slot = self.last_touch.entry(gpa).or_insert(pos);
                *slot = (*slot).max(pos);
            }
        }
        self.last_touch.retain(|g, _| refined.contains(g));

        self.refined = Some(refined);
        self.iterations += 1;
    }

    pub fn ranking(&self) -> CandidateRanking {
        probabilities(&self.candidates, &self.last_touch)
    }

    /// Evaluation helper: all refined pages at least as probable as the
    /// known true target page. Shrinks toward `{target}` as evidence
    /// accumulates; errors if the target was refined away (which means
    /// the resource moved mid-run).
    pub fn top_set(&self, target: Gpa) -> Result<PageSet, IdentifyError> {
        let refined = match &self.refined {
            Some(r) => r,
            None => {
                return Err(IdentifyError::TargetLost {
                    target,
                    iteration: 0,
                })
            }
        };
        if !refined.contains(&target) {
            return Err(IdentifyError::TargetLost {
                target,
                iteration: self.iterations,
            });
        }
        let target_count = self.candidates.count(target);
        Ok(refined
            .iter()
            .copied()
            .filter(|&p| self.candidates.count(p) >= target_count)
            .collect())
    }
}

/// When to declare the identification finished.
#[derive(Clone, Copy, Debug)]
pub enum ConvergenceRule {
    /// Evaluation mode: the top set around the known target page has at
    /// most `threshold` pages.
    TopSetWithin { threshold: usize },
    /// Attacker mode (no ground truth): the first `prefix` ranking
    /// entries are unchanged for `patience` consecutive iterations.
    StableRanking { prefix: usize, patience: usize },
}

/// Tracks a [`ConvergenceRule`] across iterations.
#[derive(Clone, Debug)]
pub struct ConvergenceTracker {
    rule: ConvergenceRule,
    last_prefix: Vec<Gpa>,
    stable_iterations: usize,
    converged_at: Option<usize>,
}

impl ConvergenceTracker {
    pub fn new(rule: ConvergenceRule) -> Self {
        ConvergenceTracker {
            rule,
            last_prefix: Vec::new(),
            stable_iterations: 0,
            converged_at: None,
        }
    }

    /// Feeds one iteration's outcome; returns whether the rule holds now.
    pub fn observe(
        &mut self,
        iteration: usize,
        top_size: Option<usize>,
        ranking: &CandidateRanking,
    ) -> bool {
        let converged = match self.rule {
            ConvergenceRule::TopSetWithin { threshold } => {
                matches!(top_size, Some(size) if size <= threshold)
            }
            ConvergenceRule::StableRanking { prefix, patience } => {
                let current: Vec<Gpa> = ranking.top(prefix).collect();
                if current.len() == prefix && current == self.last_prefix {
                    self.stable_iterations += 1;
                } else {
                    self.stable_iterations = 0;
                }
                self.last_prefix = current;
                self.stable_iterations >= patience
            }
        };
        if converged && self.converged_at.is_none() {
            self.converged_at = Some(iteration);
        }
        converged
    }

    /// First iteration at which the rule held, if any.
    pub fn converged_at(&self) -> Option<usize> {
        self.converged_at
    }
}

/// Everything measured in one identification iteration.
#[derive(Clone, Debug)]
pub struct IterationRecord {
    /// 1-based iteration number.
    pub iteration: usize,
    /// Pages in this iteration's target sample.
    pub target_sample_pages: usize,
    /// Pages in this iteration's control sample.
    pub control_sample_pages: usize,
    /// Refined-set size after folding this iteration in.
    pub refined_pages: usize,
    /// Total candidate multiplicity.
    pub candidate_total: u64,
    /// Distinct candidate pages.
    pub candidate_support: usize,
    /// Evaluation-mode top-set size, when ground truth is available.
    pub top_size: Option<usize>,
    /// Whether a concurrent client requested the target resource during
    /// the control window.
    pub x_noise: bool,
    /// Best-ranked page, if any candidate exists.
    pub top1: Option<Gpa>,
}

/// Configuration of one identification run against a live instance.
#[derive(Clone, Debug)]
pub struct SessionConfig {
    /// Service that serves both resources.
    pub service: String,
    /// Resource whose backing pages are sought.
    pub target_resource: String,
    /// The decoy requested for control samples.
    pub control_resource: String,
    /// Ground-truth target page; enables top-set evaluation.
    pub eval_target: Option<Gpa>,
}

/// Drives identification iterations against a [`SimInstance`].
pub struct IdentifySession {
    config: SessionConfig,
    state: IdentificationState,
    /// Requests issued so far (two per iteration).
    requests_issued: u64,
}

impl IdentifySession {
    pub fn new(config: SessionConfig) -> Self {
        IdentifySession {
            config,
            state: IdentificationState::new(),
            requests_issued: 0,
        }
    }

    pub fn state(&self) -> &IdentificationState {
        &self.state
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn requests_issued(&self) -> u64 {
        self.requests_issued
    }

    pub fn ranking(&self) -> CandidateRanking {
        self.state.ranking()
    }

    /// Records one target sample: a tracked window around a request for
    /// the target resource.
    pub fn record_target(
        &mut self,
        sim: &mut SimInstance,
    ) -> Result<(AccessRecording, bool), IdentifyError> {
        let target_idx = sim.resource_index(&self.config.target_resource)?;
        let window = sim.tracked_request_window(&self.config.service, &self.config.target_resource)?;
        self.requests_issued += 1;
        Ok((window.recording, window.noise.touched(target_idx)))
    }

    /// Records one control sample: a tracked window around a request for
    /// the control resource. The returned flag is the x-noise indicator:
    /// did concurrent traffic request the *target* during this window?
    pub fn record_control(
        &mut self,
        sim: &mut SimInstance,
    ) -> Result<(AccessRecording, bool), IdentifyError> {
        let target_idx = sim.resource_index(&self.config.target_resource)?;
        let window =
            sim.tracked_request_window(&self.config.service, &self.config.control_resource)?;
        self.requests_issued += 1;
        Ok((window.recording, window.noise.touched(target_idx)))
    }

    /// One full iteration: target sample, control sample, state update.
    pub fn step(&mut self, sim: &mut SimInstance) -> Result<IterationRecord, IdentifyError> {
        let (target_sample, _) = self.record_target(sim)?;
        let (control_sample, x_noise) = self.record_control(sim)?;
        let control_set = control_sample.page_set();

        self.state.apply_iteration(&target_sample, &control_set);

        let top_size = match self.config.eval_target {
            Some(tp) => Some(self.state.top_set(tp)?.len()),
            None => None,
        };
        let ranking = self.state.ranking();
        Ok(IterationRecord {
            iteration: self.state.iterations(),
            target_sample_pages: target_sample.len(),
            control_sample_pages: control_set.len(),
            refined_pages: self.state.refined_len(),
            candidate_total: self.state.candidates().total(),
            candidate_support: self.state.candidates().support_len(),
            top_size,
            x_noise,
            top1: ranking.entries().first().map(|e| e.gpa),
        })
    }
}
