//! A synthetic request-serving guest with reproducible page-access
//! behaviour.
//!
//! The guest hosts *services*; each service serves named *resources*
//! (think: files behind a web server or a login daemon). One request
//! touches, in order:
//!
//! 1. kernel-common pages and service-common pages (every request),
//! 2. a random subset of the service's volatile pool (per-request
//!    working set: buffers, heap, connection state),
//! 3. the resource's own pages, read back as the response payload,
//! 4. optionally a trailing re-touch of part of the earlier working set,
//!    controlled by `pre_resource_fraction`.
//!
//! Ordering matters: within a single request the resource pages are
//! always the *last pages touched for the first time*, which is the
//! signal the identification heuristics lean on.
//!
//! Concurrent client noise is modelled as a Poisson request stream whose
//! page accesses interleave uniformly at random with the request under
//! observation. Resources can also relocate or get evicted over time to
//! model guest-side memory management.

use std::collections::BTreeSet;

use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::Poisson;
use thiserror::Error;

use crate::mem::{AccessKind, AccessRecording, Gpa, Machine, MemError};

/// Ceiling on noise requests simulated in a single window, as a guard
/// against pathological level x window configurations.
pub const MAX_NOISE_PER_WINDOW: usize = 1 << 17;

#[derive(Debug, Error)]
pub enum GuestError {
    #[error("unknown service `{0}`")]
    UnknownService(String),
    #[error("unknown resource `{0}`")]
    UnknownResource(String),
    #[error("service `{service}` does not serve resource `{resource}`")]
    NotServed { service: String, resource: String },
    #[error("request for `{resource}` faulted on guest page {gpa}")]
    RequestFaulted { resource: String, gpa: Gpa },
    #[error("guest address space exhausted: needed {needed} free pages, have {available}")]
    AddressSpaceExhausted { needed: usize, available: usize },
    #[error("invalid guest assembly: {0}")]
    BadAssembly(String),
    #[error(transparent)]
    Mem(#[from] MemError),
}

/// Inclusive bounds for the per-request volatile working-set draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DrawRange {
    pub min: usize,
    pub max: usize,
}

impl DrawRange {
    pub fn fixed(n: usize) -> Self {
        DrawRange { min: n, max: n }
    }

    pub fn mean(&self) -> f64 {
        (self.min + self.max) as f64 / 2.0
    }
}

/// Static page-access profile of one service.
#[derive(Clone, Debug)]
pub struct ServiceProfile {
    pub name: String,
    /// Pages every request touches (shared OS paths).
    pub kernel_common: Vec<Gpa>,
    /// Pages every request of *this* service touches.
    pub service_common: Vec<Gpa>,
    /// Pool the per-request working set is drawn from.
    pub volatile_pool: Vec<Gpa>,
    /// How many pool pages one request touches.
    pub volatile_draw: DrawRange,
    /// Fraction of the non-resource working set whose touches complete
    /// before the resource is read; the remainder is re-touched after.
    /// First touches always precede the resource either way.
    pub pre_resource_fraction: f64,
    /// Names of resources this service serves.
    pub resources: Vec<String>,
}

/// One extractable resource: a contiguous byte payload backed by whole
/// guest pages (the last page may be partially used).
#[derive(Clone, Debug)]
pub struct ResourceSpec {
    pub name: String,
    pub gpas: Vec<Gpa>,
    pub size_bytes: usize,
    pub content: Vec<u8>,
    /// Sticky resources never relocate or get evicted.
    pub sticky: bool,
    /// Poisson rate (events per second of guest time) for relocation
    /// pressure on non-sticky resources.
    pub relocation_rate: f64,
}

/// Weighted entry of the client mix: which (service, resource) pair a
/// noise request asks for.
#[derive(Clone, Debug)]
pub struct ClientWeight {
    pub service: String,
    pub resource: String,
    pub weight: f64,
}

/// Poisson client-noise configuration.
#[derive(Clone, Debug)]
pub struct NoiseModel {
    /// Mean concurrent request rate, requests per second.
    pub level: f64,
    /// Duration of one observed request window, seconds.
    pub window_seconds: f64,
    /// Client mix; empty means uniform over all served pairs.
    pub clients: Vec<ClientWeight>,
}

/// What the concurrent clients did during one window.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NoiseSummary {
    /// Number of noise requests that ran in the window.
    pub requests: usize,
    /// Resource indices requested by at least one noise client.
    pub touched_resources: BTreeSet<usize>,
}

impl NoiseSummary {
    pub fn touched(&self, resource: usize) -> bool {
        self.touched_resources.contains(&resource)
    }
}

/// A tracked request window: the observed request's recording and
/// response plus what the noise did around it.
#[derive(Debug)]
pub struct TrackedWindow {
    pub recording: AccessRecording,
    pub response: Result<Vec<u8>, GuestError>,
    pub noise: NoiseSummary,
}

/// Outcome of one relocation check.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RelocationEvent {
    /// Nothing happened.
    None,
    /// The resource moved to fresh pages.
    Moved { from: Vec<Gpa>, to: Vec<Gpa> },
    /// The resource was dropped from memory; the next request reloads it.
    Evicted { from: Vec<Gpa> },
}

/// Running totals over guest activity, mostly for noise-health checks.
#[derive(Clone, Debug, Default)]
pub struct SimCounters {
    pub noise_requests: u64,
    /// Per-resource: noise responses that did not match the resource
    /// payload (expected only for resources under active tampering).
    pub noise_mismatches: Vec<u64>,
    /// Per-resource: noise requests aborted by an integrity fault.
    pub noise_faults: Vec<u64>,
    pub relocations: u64,
    pub evictions: u64,
    pub reloads: u64,
}

#[derive(Clone, Copy, Debug)]
enum PlanOp {
    Touch,
    ReadChunk { offset: usize, len: usize },
}

#[derive(Clone, Copy, Debug)]
struct PlannedAccess {
    gpa: Gpa,
    op: PlanOp,
}

struct RequestPlan {
    resource: usize,
    steps: Vec<PlannedAccess>,
    response_len: usize,
}

struct RequestResult {
    resource: usize,
    response: Result<Vec<u8>, Gpa>,
}

struct Resource {
    spec: ResourceSpec,
    present: bool,
}

/// A fully assembled guest instance bound to a [`Machine`].
pub struct SimInstance {
    machine: Machine,
    services: Vec<ServiceProfile>,
    resources: Vec<Resource>,
    noise: NoiseModel,
    /// Cumulative weights over `client_pairs`, parallel vectors.
    client_pairs: Vec<(usize, usize)>,
    client_cumweight: Vec<f64>,
    /// Unallocated guest pages available for relocation / reload.
    free_gpas: Vec<Gpa>,
    rng: ChaCha12Rng,
    clock_seconds: f64,
    counters: SimCounters,
}

impl SimInstance {
    /// Wires services, resources and noise onto `machine`.
    ///
    /// All named page sets must already be mapped, mutually disjoint and
    /// in range; resource payloads are written to their pages here so
    /// the in-memory ground truth matches `ResourceSpec::content`.
    pub fn assemble(
        mut machine: Machine,
        services: Vec<ServiceProfile>,
        resources: Vec<ResourceSpec>,
        noise: NoiseModel,
        runtime_seed: u64,
    ) -> Result<Self, GuestError> {
        let mut used = BTreeSet::new();
        let mut claim = |pages: &[Gpa], what: &str| -> Result<(), GuestError> {
            for &gpa in pages {
                if gpa.0 >= machine.guest_pages() {
                    return Err(GuestError::BadAssembly(format!(
                        "{what} references out-of-range page {gpa}"
                    )));
                }
                if !used.insert(gpa) {
                    return Err(GuestError::BadAssembly(format!(
                        "{what} overlaps another page set at page {gpa}"
                    )));
                }
            }
            Ok(())
        };

        for svc in &services {
            claim(&svc.kernel_common, &format!("service `{}` kernel_common", svc.name))?;
            claim(&svc.service_common, &format!("service `{}` service_common", svc.name))?;
            claim(&svc.volatile_pool, &format!("service `{}` volatile_pool", svc.name))?;
            if svc.volatile_draw.min > svc.volatile_draw.max
                || svc.volatile_draw.max > svc.volatile_pool.len()
            {
                return Err(GuestError::BadAssembly(format!(
                    "service `{}` volatile_draw {:?} incompatible with pool of {} pages",
                    svc.name,
                    svc.volatile_draw,
                    svc.volatile_pool.len()
                )));
            }
            if !(0.0..=1.0).contains(&svc.pre_resource_fraction) {
                return Err(GuestError::BadAssembly(format!(
                    "service `{}` pre_resource_fraction {} outside [0, 1]",
                    svc.name, svc.pre_resource_fraction
                )));
            }
        }
        for res in &resources {
            claim(&res.gpas, &format!("resource `{}` pages", res.name))?;
            let needed = res.size_bytes.div_ceil(machine.page_size());
            if res.size_bytes == 0 || res.gpas.len() != needed {
                return Err(GuestError::BadAssembly(format!(
                    "resource `{}` covers {} pages but its {} bytes need {}",
                    res.name,
                    res.gpas.len(),
                    res.size_bytes,
                    needed
                )));
            }
            if res.content.len() != res.size_bytes {
                return Err(GuestError::BadAssembly(format!(
                    "resource `{}` content length {} != size_bytes {}",
                    res.name,
                    res.content.len(),
                    res.size_bytes
                )));
            }
            if res.sticky && res.relocation_rate != 0.0 {
                return Err(GuestError::BadAssembly(format!(
                    "resource `{}` is sticky but has relocation_rate {}",
                    res.name, res.relocation_rate
                )));
            }
        }
        for svc in &services {
            for rname in &svc.resources {
                if !resources.iter().any(|r| r.name == *rname) {
                    return Err(GuestError::UnknownResource(rname.clone()));
                }
            }
        }

        let free_gpas: Vec<Gpa> = (0..machine.guest_pages())
            .map(Gpa)
            .filter(|g| !used.contains(g))
            .collect();

        // Materialize resource payloads in guest memory.
        let page_size = machine.page_size();
        for res in &resources {
            for (idx, &gpa) in res.gpas.iter().enumerate() {
                let start = idx * page_size;
                let end = (start + page_size).min(res.size_bytes);
                machine.guest_write(gpa, 0, &res.content[start..end])?;
            }
        }

        // Client mix: explicit weights, or uniform over served pairs.
        let mut client_pairs = Vec::new();
        let mut client_cumweight = Vec::new();
        let mut total = 0.0f64;
        let resolve = |sname: &str, rname: &str| -> Result<(usize, usize), GuestError> {
            let s = services
                .iter()
                .position(|s| s.name == sname)
                .ok_or_else(|| GuestError::UnknownService(sname.into()))?;
            if !services[s].resources.iter().any(|r| r == rname) {
                return Err(GuestError::NotServed {
                    service: sname.into(),
                    resource: rname.into(),
                });
            }
            let r = resources
                .iter()
                .position(|r| r.name == rname)
                .ok_or_else(|| GuestError::UnknownResource(rname.into()))?;
            Ok((s, r))
        };
        if noise.clients.is_empty() {
            for (s, svc) in services.iter().enumerate() {
                for rname in &svc.resources {
                    let r = resources.iter().position(|r| r.name == *rname).unwrap();
                    client_pairs.push((s, r));
                    total += 1.0;
                    client_cumweight.push(total);
                }
            }
        } else {
            for client in &noise.clients {
                if !(client.weight > 0.0 && client.weight.is_finite()) {
                    return Err(GuestError::BadAssembly(format!(
                        "client weight {} for `{}`/`{}` must be positive and finite",
                        client.weight, client.service, client.resource
                    )));
                }
                client_pairs.push(resolve(&client.service, &client.resource)?);
                total += client.weight;
                client_cumweight.push(total);
            }
        }

        let resource_count = resources.len();
        Ok(SimInstance {
            machine,
            services,
            resources: resources
                .into_iter()
                .map(|spec| Resource { spec, present: true })
                .collect(),
            noise,
            client_pairs,
            client_cumweight,
            free_gpas,
            rng: ChaCha12Rng::seed_from_u64(runtime_seed),
            clock_seconds: 0.0,
            counters: SimCounters {
                noise_mismatches: vec![0; resource_count],
                noise_faults: vec![0; resource_count],
                ..SimCounters::default()
            },
        })
    }

    pub fn machine(&self) -> &Machine {
        &self.machine
    }

    pub fn machine_mut(&mut self) -> &mut Machine {
        &mut self.machine
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn counters(&self) -> &SimCounters {
        &self.counters
    }

    pub fn clock_seconds(&self) -> f64 {
        self.clock_seconds
    }

    pub fn service_index(&self, name: &str) -> Result<usize, GuestError> {
        self.services
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| GuestError::UnknownService(name.into()))
    }

    pub fn resource_index(&self, name: &str) -> Result<usize, GuestError> {
        self.resources
            .iter()
            .position(|r| r.spec.name == name)
            .ok_or_else(|| GuestError::UnknownResource(name.into()))
    }

    pub fn resource_size(&self, name: &str) -> Result<usize, GuestError> {
        Ok(self.resources[self.resource_index(name)?].spec.size_bytes)
    }

    /// Ground truth: where the resource currently lives. Evaluation and
    /// test use only; the attack layers never see this.
    pub fn ground_truth_resource_pages(&self, name: &str) -> Result<Vec<Gpa>, GuestError> {
        let idx = self.resource_index(name)?;
        Ok(self.resources[idx].spec.gpas.clone())
    }

    /// Ground truth: the resource payload bytes. Evaluation/test only.
    pub fn ground_truth_resource_content(&self, name: &str) -> Result<&[u8], GuestError> {
        let idx = self.resource_index(name)?;
        Ok(&self.resources[idx].spec.content)
    }

    fn served_by(&self, service: usize, resource: usize) -> bool {
        self.services[service]
            .resources
            .iter()
            .any(|r| *r == self.resources[resource].spec.name)
    }

    /// Builds the access plan for one request, reloading the resource
    /// first if it was evicted. Reload writes execute immediately (the
    /// faulting requester blocks until the payload is back in memory),
    /// so they land inside any active tracking session.
    fn build_plan(&mut self, service: usize, resource: usize) -> Result<RequestPlan, GuestError> {
        if !self.served_by(service, resource) {
            return Err(GuestError::NotServed {
                service: self.services[service].name.clone(),
                resource: self.resources[resource].spec.name.clone(),
            });
        }

        if !self.resources[resource].present {
            self.reload_resource(resource)?;
        }

        let page_size = self.machine.page_size();
        let svc = &self.services[service];
        let res = &self.resources[resource].spec;

        let mut working: Vec<PlannedAccess> = Vec::new();
        for &gpa in svc.kernel_common.iter().chain(&svc.service_common) {
            working.push(PlannedAccess {
                gpa,
                op: PlanOp::Touch,
            });
        }
        let draw = self
            .rng
            .random_range(svc.volatile_draw.min..=svc.volatile_draw.max);
        let pool = &svc.volatile_pool;
        for idx in rand::seq::index::sample(&mut self.rng, pool.len(), draw) {
            working.push(PlannedAccess {
                gpa: pool[idx],
                op: PlanOp::Touch,
            });
        }

        // All first touches of the working set go ahead of the resource;
        // the trailing (1 - pre_resource_fraction) share is re-touched
        // after it, modelling post-response bookkeeping.
        let retouch = ((1.0 - svc.pre_resource_fraction) * working.len() as f64).round() as usize;
        let retouch = retouch.min(working.len());
        let mut steps = working.clone();
        for (idx, &gpa) in res.gpas.iter().enumerate() {
            let offset = idx * page_size;
            let len = (res.size_bytes - offset).min(page_size);
            steps.push(PlannedAccess {
                gpa,
                op: PlanOp::ReadChunk { offset, len },
            });
        }
        steps.extend_from_slice(&working[working.len() - retouch..]);

        Ok(RequestPlan {
            resource,
            steps,
            response_len: res.size_bytes,
        })
    }

    fn reload_resource(&mut self, resource: usize) -> Result<(), GuestError> {
        let page_size = self.machine.page_size();
        let pages = self.resources[resource].spec.size_bytes.div_ceil(page_size);
        if self.free_gpas.len() < pages {
            return Err(GuestError::AddressSpaceExhausted {
                needed: pages,
                available: self.free_gpas.len(),
            });
        }
        let at = self.free_gpas.len() - pages;
        let new_gpas: Vec<Gpa> = self.free_gpas.split_off(at);
        {
            let res = &mut self.resources[resource];
            res.spec.gpas = new_gpas;
            res.present = true;
        }
        let (gpas, size) = {
            let res = &self.resources[resource].spec;
            (res.gpas.clone(), res.size_bytes)
        };
        for (idx, &gpa) in gpas.iter().enumerate() {
            let start = idx * page_size;
            let end = (start + page_size).min(size);
            let chunk = self.resources[resource].spec.content[start..end].to_vec();
            self.machine.guest_write(gpa, 0, &chunk)?;
        }
        self.counters.reloads += 1;
        Ok(())
    }

    /// Runs a batch of plans with their access streams interleaved
    /// uniformly at random. `noise_from` marks where noise plans start
    /// for counter accounting.
    fn execute_merged(&mut self, plans: Vec<RequestPlan>, noise_from: usize) -> Vec<RequestResult> {
        struct Live {
            plan: RequestPlan,
            cursor: usize,
            response: Vec<u8>,
            fault: Option<Gpa>,
        }
        let mut live: Vec<Live> = plans
            .into_iter()
            .map(|plan| {
                let response = vec![0u8; plan.response_len];
                Live {
                    plan,
                    cursor: 0,
                    response,
                    fault: None,
                }
            })
            .collect();

        let mut remaining: usize = live.iter().map(|l| l.plan.steps.len()).sum();
        while remaining > 0 {
            let mut pick = self.rng.random_range(0..remaining);
            let idx = live
                .iter()
                .position(|l| {
                    let left = l.plan.steps.len() - l.cursor;
                    if pick < left {
                        true
                    } else {
                        pick -= left;
                        false
                    }
                })
                .expect("remaining is the sum of per-plan leftovers");

            let l = &mut live[idx];
            let step = l.plan.steps[l.cursor];
            l.cursor += 1;
            remaining -= 1;

            if l.fault.is_some() {
                // The request already aborted; drain without touching.
                continue;
            }
            let fault = match step.op {
                PlanOp::Touch => match self.machine.on_access(step.gpa, AccessKind::Read) {
                    Ok(outcome) => outcome.is_fault(),
                    Err(_) => true,
                },
                PlanOp::ReadChunk { offset, len } => match self.machine.read_through(step.gpa) {
                    Ok(bytes) => {
                        l.response[offset..offset + len].copy_from_slice(&bytes[..len]);
                        false
                    }
                    Err(_) => true,
                },
            };
            if fault {
                l.fault = Some(step.gpa);
                // Abort the rest of this request.
                remaining -= l.plan.steps.len() - l.cursor;
                l.cursor = l.plan.steps.len();
            }
        }

        let results: Vec<RequestResult> = live
            .into_iter()
            .map(|l| RequestResult {
                resource: l.plan.resource,
                response: match l.fault {
                    Some(gpa) => Err(gpa),
                    None => Ok(l.response),
                },
            })
            .collect();

        for result in &results[noise_from.min(results.len())..] {
            self.counters.noise_requests += 1;
            match &result.response {
                Ok(bytes) => {
                    if bytes[..] != self.resources[result.resource].spec.content[..] {
                        self.counters.noise_mismatches[result.resource] += 1;
                    }
                }
                Err(_) => self.counters.noise_faults[result.resource] += 1,
            }
        }
        results
    }

    fn draw_noise_count(&mut self, window_seconds: f64) -> usize {
        let mean = self.noise.level * window_seconds;
        if mean <= 0.0 {
            return 0;
        }
        let poisson = Poisson::new(mean).expect("positive finite mean");
        let n = poisson.sample(&mut self.rng);
        (n as usize).min(MAX_NOISE_PER_WINDOW)
    }

    fn sample_client(&mut self) -> Option<(usize, usize)> {
        let total = *self.client_cumweight.last()?;
        let x = self.rng.random_range(0.0..total);
        let idx = self
            .client_cumweight
            .partition_point(|&cum| cum <= x)
            .min(self.client_pairs.len() - 1);
        Some(self.client_pairs[idx])
    }

    fn build_noise_plans(&mut self, count: usize) -> Vec<RequestPlan> {
        let mut plans = Vec::with_capacity(count);
        for _ in 0..count {
            let Some((service, resource)) = self.sample_client() else {
                break;
            };
            match self.build_plan(service, resource) {
                Ok(plan) => plans.push(plan),
                // Noise against an exhausted/broken pair is dropped
                // rather than failing the observed request.
                Err(_) => continue,
            }
        }
        plans
    }

    fn summarize_noise(results: &[RequestResult], noise_from: usize) -> NoiseSummary {
        let mut touched = BTreeSet::new();
        for r in &results[noise_from.min(results.len())..] {
            touched.insert(r.resource);
        }
        NoiseSummary {
            requests: results.len().saturating_sub(noise_from),
            touched_resources: touched,
        }
    }

    fn response_to_result(&self, resource: usize, response: Result<Vec<u8>, Gpa>) -> Result<Vec<u8>, GuestError> {
        response.map_err(|gpa| GuestError::RequestFaulted {
            resource: self.resources[resource].spec.name.clone(),
            gpa,
        })
    }

    /// One isolated request, no noise, no clock advance. The returned
    /// bytes are exactly the resource payload as served through current
    /// translations.
    pub fn handle_request(&mut self, service: &str, resource: &str) -> Result<Vec<u8>, GuestError> {
        let s = self.service_index(service)?;
        let r = self.resource_index(resource)?;
        let plan = self.build_plan(s, r)?;
        let mut results = self.execute_merged(vec![plan], 1);
        let result = results.pop().expect("one plan in, one result out");
        self.response_to_result(r, result.response)
    }

    /// One request with tracking active for the whole window and the
    /// configured noise stream interleaved around it.
    pub fn tracked_request_window(
        &mut self,
        service: &str,
        resource: &str,
    ) -> Result<TrackedWindow, GuestError> {
        let s = self.service_index(service)?;
        let r = self.resource_index(resource)?;
        self.machine.begin_tracking()?;
        let window = self.noise.window_seconds;
        let outcome = (|| {
            let mut plans = vec![self.build_plan(s, r)?];
            let noise_count = self.draw_noise_count(window);
            plans.extend(self.build_noise_plans(noise_count));
            Ok::<_, GuestError>(self.execute_merged(plans, 1))
        })();
        let recording = self.machine.end_tracking()?;
        let results = outcome?;
        self.clock_seconds += window;
        let noise = Self::summarize_noise(&results, 1);
        let response = self.response_to_result(r, results.into_iter().next().unwrap().response);
        Ok(TrackedWindow {
            recording,
            response,
            noise,
        })
    }

    /// One untracked request with noise interleaved; what an attacker
    /// issuing extraction requests against a busy guest sees.
    pub fn request_with_noise(
        &mut self,
        service: &str,
        resource: &str,
    ) -> Result<(Result<Vec<u8>, GuestError>, NoiseSummary), GuestError> {
        let s = self.service_index(service)?;
        let r = self.resource_index(resource)?;
        let window = self.noise.window_seconds;
        let mut plans = vec![self.build_plan(s, r)?];
        let noise_count = self.draw_noise_count(window);
        plans.extend(self.build_noise_plans(noise_count));
        let results = self.execute_merged(plans, 1);
        self.clock_seconds += window;
        let noise = Self::summarize_noise(&results, 1);
        let response = self.response_to_result(r, results.into_iter().next().unwrap().response);
        Ok((response, noise))
    }

    /// Runs only the noise stream for `window_seconds`. Touches land in
    /// any active tracking session, which is the point: this is the
    /// background an observed request has to stand out against.
    pub fn run_noise_window(&mut self, window_seconds: f64) -> NoiseSummary {
        let count = self.draw_noise_count(window_seconds);
        let plans = self.build_noise_plans(count);
        let results = self.execute_merged(plans, 0);
        self.clock_seconds += window_seconds;
        Self::summarize_noise(&results, 0)
    }

    /// Applies relocation pressure for `elapsed` seconds of guest time:
    /// with probability `1 - exp(-rate * elapsed)` the resource either
    /// moves to fresh pages or is evicted (equal odds).
    pub fn maybe_relocate(
        &mut self,
        resource: &str,
        elapsed: f64,
    ) -> Result<RelocationEvent, GuestError> {
        let idx = self.resource_index(resource)?;
        let rate = self.resources[idx].spec.relocation_rate;
        if self.resources[idx].spec.sticky || rate <= 0.0 || !self.resources[idx].present {
            return Ok(RelocationEvent::None);
        }
        let p = 1.0 - (-rate * elapsed.max(0.0)).exp();
        if !self.rng.random_bool(p.clamp(0.0, 1.0)) {
            return Ok(RelocationEvent::None);
        }
        let from = self.resources[idx].spec.gpas.clone();
        if self.rng.random_bool(0.5) {
            // Eviction: pages return to the free pool; content reloads on
            // next demand. Stale frame bytes linger, as they would.
            self.resources[idx].present = false;
            self.free_gpas.extend(from.iter().copied());
            self.resources[idx].spec.gpas.clear();
            self.counters.evictions += 1;
            Ok(RelocationEvent::Evicted { from })
        } else {
            let pages = from.len();
            if self.free_gpas.len() < pages {
                return Err(GuestError::AddressSpaceExhausted {
                    needed: pages,
                    available: self.free_gpas.len(),
                });
            }
            let at = self.free_gpas.len() - pages;
            let to: Vec<Gpa> = self.free_gpas.split_off(at);
            let page_size = self.machine.page_size();
            let size = self.resources[idx].spec.size_bytes;
            for (i, &gpa) in to.iter().enumerate() {
                let start = i * page_size;
                let end = (start + page_size).min(size);
                let chunk = self.resources[idx].spec.content[start..end].to_vec();
                self.machine.guest_write(gpa, 0, &chunk)?;
            }
            self.resources[idx].spec.gpas = to.clone();
            self.free_gpas.extend(from.iter().copied());
            self.counters.relocations += 1;
            Ok(RelocationEvent::Moved { from, to })
        }
    }
}
