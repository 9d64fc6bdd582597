//! The on-disk scenario description format.
//!
//! A scenario file is TOML describing one guest: geometry, services
//! with their page sets (given either as explicit page lists or as
//! counts to be auto-allocated), resources, the noise model, and
//! optional calibration targets. Scenario files are untrusted input:
//! everything is validated with hard caps before any memory is
//! allocated, and all failures are errors — never panics.
//!
//! Building a validated scenario is deterministic in `seed`: page-set
//! allocation, the guest-to-frame permutation, resource payloads and
//! runtime traffic all derive from it through independent streams.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::guest::{
    ClientWeight, DrawRange, GuestError, NoiseModel, ResourceSpec, ServiceProfile, SimInstance,
    MAX_NOISE_PER_WINDOW,
};
use crate::mem::{
    Gpa, Machine, MachineConfig, MemError, MAX_GUEST_PAGES, MAX_PAGE_SIZE, MAX_TOTAL_BYTES,
    MIN_PAGE_SIZE,
};
use crate::seed;

/// Caps for untrusted input, additional to the machine geometry caps.
pub const MAX_SERVICES: usize = 64;
pub const MAX_RESOURCES: usize = 256;
pub const MAX_CLIENTS: usize = 1024;
pub const MAX_NOISE_LEVEL: f64 = 10_000.0;
pub const MAX_WINDOW_SECONDS: f64 = 60.0;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario file `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    /// The TOML error's display already carries line/column context;
    /// the path is prepended for multi-file workflows.
    #[error("invalid scenario syntax in `{path}`: {source}")]
    Parse {
        path: String,
        #[source]
        source: Box<toml::de::Error>,
    },
    #[error("invalid scenario in `{path}`: {message}")]
    Invalid { path: String, message: String },
    #[error("scenario `{path}` failed to assemble: {source}")]
    Assemble {
        path: String,
        #[source]
        source: GuestError,
    },
    #[error(transparent)]
    Mem(#[from] MemError),
}

/// A page set given either as a count (auto-allocated at build time)
/// or as an explicit list of guest page indices.
#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(untagged)]
pub enum PagesSpec {
    Count(u64),
    List(Vec<u64>),
}

impl PagesSpec {
    pub fn count(&self) -> usize {
        match self {
            PagesSpec::Count(n) => *n as usize,
            PagesSpec::List(v) => v.len(),
        }
    }
}

impl Default for PagesSpec {
    fn default() -> Self {
        PagesSpec::Count(0)
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DrawSpec {
    pub min: u64,
    pub max: u64,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSpec {
    pub name: String,
    #[serde(default)]
    pub kernel_common: PagesSpec,
    #[serde(default)]
    pub service_common: PagesSpec,
    #[serde(default)]
    pub volatile_pool: PagesSpec,
    pub volatile_draw: DrawSpec,
    #[serde(default = "default_pre_resource_fraction")]
    pub pre_resource_fraction: f64,
    pub resources: Vec<String>,
}

fn default_pre_resource_fraction() -> f64 {
    1.0
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceShape {
    pub name: String,
    pub pages: PagesSpec,
    pub size_bytes: u64,
    #[serde(default = "default_true")]
    pub sticky: bool,
    #[serde(default)]
    pub relocation_rate: f64,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSpec {
    pub service: String,
    pub resource: String,
    pub weight: f64,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub level: f64,
    pub window_seconds: f64,
    #[serde(default)]
    pub clients: Vec<ClientSpec>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    /// Service the attack goes through.
    pub service: String,
    /// Resource whose pages are to be identified/extracted.
    pub resource: String,
    /// Decoy resource for control samples; same service, different
    /// resource.
    pub control: String,
}

/// Calibration goal for one noise level.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationTarget {
    pub noise_level: f64,
    /// Desired probability that a control window overlaps a concurrent
    /// request for the target resource.
    pub x_noise_probability: f64,
    /// Desired mean target-sample size, in pages.
    pub mean_recording_pages: f64,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationTable {
    #[serde(default)]
    pub targets: Vec<CalibrationTarget>,
}

/// A parsed scenario description. See the `scenarios/` directory for
/// complete annotated examples.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub guest_pages: u64,
    pub page_size: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_spare_frames")]
    pub spare_frames: u64,
    #[serde(default)]
    pub integrity_mode: bool,
    pub target: TargetSpec,
    pub noise: NoiseSpec,
    pub services: Vec<ServiceSpec>,
    pub resources: Vec<ResourceShape>,
    #[serde(default)]
    pub calibration: CalibrationTable,
}

fn default_spare_frames() -> u64 {
    8
}

impl fmt::Display for ScenarioSpec {
    /// Serializes back to scenario TOML.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let text = toml::to_string_pretty(self).map_err(|_| fmt::Error)?;
        f.write_str(&text)
    }
}

impl ScenarioSpec {
    /// Parses and validates a scenario from TOML text. `origin` labels
    /// error messages (a path, or something like `<inline>`).
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ScenarioError> {
        let spec: ScenarioSpec = toml::from_str(text).map_err(|e| ScenarioError::Parse {
            path: origin.into(),
            source: Box::new(e),
        })?;
        spec.validate(origin)?;
        Ok(spec)
    }

    /// Reads, parses and validates a scenario file.
    pub fn from_path(path: &Path) -> Result<Self, ScenarioError> {
        let origin = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io {
            path: origin.clone(),
            source: e,
        })?;
        Self::from_toml(&text, &origin)
    }

    fn invalid(origin: &str, message: impl Into<String>) -> ScenarioError {
        ScenarioError::Invalid {
            path: origin.into(),
            message: message.into(),
        }
    }

    /// Full structural validation. Called by the parsing constructors;
    /// public so programmatically assembled specs can be checked too.
    pub fn validate(&self, origin: &str) -> Result<(), ScenarioError> {
        let fail = |msg: String| Err(Self::invalid(origin, msg));

        // --- geometry ---
        if self.guest_pages == 0 || self.guest_pages > MAX_GUEST_PAGES as u64 {
            return fail(format!(
                "guest_pages {} outside 1..={MAX_GUEST_PAGES}",
                self.guest_pages
            ));
        }
        if !(self.page_size as usize).is_power_of_two()
            || (self.page_size as usize) < MIN_PAGE_SIZE
            || (self.page_size as usize) > MAX_PAGE_SIZE
        {
            return fail(format!(
                "page_size {} must be a power of two in {MIN_PAGE_SIZE}..={MAX_PAGE_SIZE}",
                self.page_size
            ));
        }
        if self.spare_frames > 1024 {
            return fail(format!("spare_frames {} exceeds 1024", self.spare_frames));
        }
        let total_bytes = (self.guest_pages + self.spare_frames) as u128 * self.page_size as u128;
        if total_bytes > MAX_TOTAL_BYTES as u128 {
            return fail(format!(
                "guest of {} bytes exceeds the {MAX_TOTAL_BYTES} byte ceiling",
                total_bytes
            ));
        }

        // --- cardinalities ---
        if self.services.is_empty() || self.services.len() > MAX_SERVICES {
            return fail(format!(
                "need 1..={MAX_SERVICES} services, have {}",
                self.services.len()
            ));
        }
        if self.resources.is_empty() || self.resources.len() > MAX_RESOURCES {
            return fail(format!(
                "need 1..={MAX_RESOURCES} resources, have {}",
                self.resources.len()
            ));
        }
        if self.noise.clients.len() > MAX_CLIENTS {
            return fail(format!(
                "noise.clients has {} entries, cap is {MAX_CLIENTS}",
                self.noise.clients.len()
            ));
        }

        // --- names ---
        let mut names = BTreeSet::new();
        for svc in &self.services {
            if svc.name.is_empty() {
                return fail("service with empty name".into());
            }
            if !names.insert(&svc.name) {
                return fail(format!("duplicate service name `{}`", svc.name));
            }
        }
        let mut names = BTreeSet::new();
        for res in &self.resources {
            if res.name.is_empty() {
                return fail("resource with empty name".into());
            }
            if !names.insert(&res.name) {
                return fail(format!("duplicate resource name `{}`", res.name));
            }
        }

        let find_service = |name: &str| self.services.iter().find(|s| s.name == name);
        let find_resource = |name: &str| self.resources.iter().find(|r| r.name == name);
        let serves = |svc: &ServiceSpec, rname: &str| svc.resources.iter().any(|r| r == rname);

        // --- services ---
        for svc in &self.services {
            let label = format!("service `{}`", svc.name);
            if svc.resources.is_empty() {
                return fail(format!("{label} serves no resources"));
            }
            for rname in &svc.resources {
                if find_resource(rname).is_none() {
                    return fail(format!("{label} serves unknown resource `{rname}`"));
                }
            }
            if svc.volatile_draw.min > svc.volatile_draw.max {
                return fail(format!(
                    "{label} volatile_draw min {} > max {}",
                    svc.volatile_draw.min, svc.volatile_draw.max
                ));
            }
            if svc.volatile_draw.max > svc.volatile_pool.count() as u64 {
                return fail(format!(
                    "{label} volatile_draw max {} exceeds pool of {} pages",
                    svc.volatile_draw.max,
                    svc.volatile_pool.count()
                ));
            }
            if !svc.pre_resource_fraction.is_finite()
                || !(0.0..=1.0).contains(&svc.pre_resource_fraction)
            {
                return fail(format!(
                    "{label} pre_resource_fraction {} outside [0, 1]",
                    svc.pre_resource_fraction
                ));
            }
        }

        // --- resources ---
        for res in &self.resources {
            let label = format!("resource `{}`", res.name);
            if res.size_bytes == 0 {
                return fail(format!("{label} has size_bytes 0"));
            }
            let needed = res.size_bytes.div_ceil(self.page_size);
            if res.pages.count() as u64 != needed {
                return fail(format!(
                    "{label}: {} bytes need {} pages of {}, but {} given",
                    res.size_bytes,
                    needed,
                    self.page_size,
                    res.pages.count()
                ));
            }
            if !res.relocation_rate.is_finite() || res.relocation_rate < 0.0 {
                return fail(format!(
                    "{label} relocation_rate {} must be finite and >= 0",
                    res.relocation_rate
                ));
            }
            if res.sticky && res.relocation_rate != 0.0 {
                return fail(format!(
                    "{label} is sticky but has relocation_rate {}",
                    res.relocation_rate
                ));
            }
        }

        // --- page budget and explicit lists ---
        let mut explicit: BTreeSet<u64> = BTreeSet::new();
        let mut total_pages: u64 = 0;
        let mut check_pages = |spec: &PagesSpec, label: &str| -> Result<(), ScenarioError> {
            let count = spec.count() as u64;
            if count > self.guest_pages {
                return Err(Self::invalid(
                    origin,
                    format!("{label} wants {count} pages, guest has {}", self.guest_pages),
                ));
            }
            total_pages += count;
            if let PagesSpec::List(pages) = spec {
                for &p in pages {
                    if p >= self.guest_pages {
                        return Err(Self::invalid(
                            origin,
                            format!("{label} references out-of-range page {p}"),
                        ));
                    }
                    if !explicit.insert(p) {
                        return Err(Self::invalid(
                            origin,
                            format!("{label} overlaps another page set at page {p}"),
                        ));
                    }
                }
            }
            Ok(())
        };
        for svc in &self.services {
            check_pages(&svc.kernel_common, &format!("service `{}` kernel_common", svc.name))?;
            check_pages(&svc.service_common, &format!("service `{}` service_common", svc.name))?;
            check_pages(&svc.volatile_pool, &format!("service `{}` volatile_pool", svc.name))?;
        }
        for res in &self.resources {
            check_pages(&res.pages, &format!("resource `{}` pages", res.name))?;
        }
        if total_pages > self.guest_pages {
            return fail(format!(
                "page sets need {total_pages} pages, guest has only {}",
                self.guest_pages
            ));
        }
        // Non-sticky resources need enough slack to land on fresh pages.
        let slack = self.guest_pages - total_pages;
        for res in &self.resources {
            if !res.sticky && res.pages.count() as u64 > slack {
                return fail(format!(
                    "resource `{}` can relocate but only {slack} free pages exist for {} needed",
                    res.name,
                    res.pages.count()
                ));
            }
        }

        // --- target ---
        let Some(tsvc) = find_service(&self.target.service) else {
            return fail(format!("target.service `{}` unknown", self.target.service));
        };
        if find_resource(&self.target.resource).is_none() {
            return fail(format!("target.resource `{}` unknown", self.target.resource));
        }
        if find_resource(&self.target.control).is_none() {
            return fail(format!("target.control `{}` unknown", self.target.control));
        }
        if self.target.resource == self.target.control {
            return fail("target.control must differ from target.resource".into());
        }
        if !serves(tsvc, &self.target.resource) || !serves(tsvc, &self.target.control) {
            return fail(format!(
                "target.service `{}` must serve both `{}` and `{}`",
                self.target.service, self.target.resource, self.target.control
            ));
        }

        // --- noise ---
        if !self.noise.level.is_finite() || self.noise.level < 0.0 || self.noise.level > MAX_NOISE_LEVEL
        {
            return fail(format!(
                "noise.level {} outside 0..={MAX_NOISE_LEVEL}",
                self.noise.level
            ));
        }
        if !self.noise.window_seconds.is_finite()
            || self.noise.window_seconds <= 0.0
            || self.noise.window_seconds > MAX_WINDOW_SECONDS
        {
            return fail(format!(
                "noise.window_seconds {} outside (0, {MAX_WINDOW_SECONDS}]",
                self.noise.window_seconds
            ));
        }
        if self.noise.level * self.noise.window_seconds > MAX_NOISE_PER_WINDOW as f64 / 2.0 {
            return fail(format!(
                "noise.level x window_seconds = {} requests per window exceeds the cap",
                self.noise.level * self.noise.window_seconds
            ));
        }
        for client in &self.noise.clients {
            let label = format!("noise client `{}`/`{}`", client.service, client.resource);
            let Some(svc) = find_service(&client.service) else {
                return fail(format!("{label}: unknown service"));
            };
            if find_resource(&client.resource).is_none() {
                return fail(format!("{label}: unknown resource"));
            }
            if !serves(svc, &client.resource) {
                return fail(format!("{label}: pair not served"));
            }
            if !client.weight.is_finite() || client.weight <= 0.0 {
                return fail(format!("{label}: weight {} must be positive", client.weight));
            }
        }

        // --- calibration table ---
        let mut levels = Vec::new();
        for target in &self.calibration.targets {
            if !target.noise_level.is_finite()
                || target.noise_level < 0.0
                || target.noise_level > MAX_NOISE_LEVEL
            {
                return fail(format!(
                    "calibration target noise_level {} out of range",
                    target.noise_level
                ));
            }
            if levels.iter().any(|&l: &f64| l == target.noise_level) {
                return fail(format!(
                    "duplicate calibration target for noise_level {}",
                    target.noise_level
                ));
            }
            levels.push(target.noise_level);
            if !target.x_noise_probability.is_finite()
                || !(0.0..1.0).contains(&target.x_noise_probability)
            {
                return fail(format!(
                    "calibration x_noise_probability {} outside [0, 1)",
                    target.x_noise_probability
                ));
            }
            if !target.mean_recording_pages.is_finite()
                || target.mean_recording_pages <= 0.0
                || target.mean_recording_pages > self.guest_pages as f64
            {
                return fail(format!(
                    "calibration mean_recording_pages {} not reachable in a {}-page guest",
                    target.mean_recording_pages, self.guest_pages
                ));
            }
        }

        Ok(())
    }

    /// Calibration target for a noise level, if the table has one.
    pub fn calibration_target(&self, noise_level: f64) -> Option<&CalibrationTarget> {
        self.calibration
            .targets
            .iter()
            .find(|t| t.noise_level == noise_level)
    }

    /// Builds a runnable instance with the scenario's own seed.
    pub fn build(&self) -> Result<SimInstance, ScenarioError> {
        self.build_seeded(self.seed, None)
    }

    /// Builds a runnable instance, overriding the seed and optionally
    /// the integrity mode (used by campaigns to fan out runs and to
    /// flip the countermeasure on without editing the scenario).
    pub fn build_seeded(
        &self,
        seed_value: u64,
        integrity_override: Option<bool>,
    ) -> Result<SimInstance, ScenarioError> {
        let origin = "<build>";
        self.validate(origin)?;

        let guest_pages = self.guest_pages as usize;
        let page_size = self.page_size as usize;
        let mut layout_rng = ChaCha12Rng::seed_from_u64(seed::derive(seed_value, &[0x1A71]));

        // Pages not claimed by an explicit list, in random order, feed
        // count-based allocations.
        let mut explicit: BTreeSet<usize> = BTreeSet::new();
        let collect_explicit = |spec: &PagesSpec, explicit: &mut BTreeSet<usize>| {
            if let PagesSpec::List(pages) = spec {
                explicit.extend(pages.iter().map(|&p| p as usize));
            }
        };
        for svc in &self.services {
            collect_explicit(&svc.kernel_common, &mut explicit);
            collect_explicit(&svc.service_common, &mut explicit);
            collect_explicit(&svc.volatile_pool, &mut explicit);
        }
        for res in &self.resources {
            collect_explicit(&res.pages, &mut explicit);
        }
        let mut free: Vec<usize> = (0..guest_pages).filter(|p| !explicit.contains(p)).collect();
        free.shuffle(&mut layout_rng);

        let mut take = |spec: &PagesSpec| -> Vec<Gpa> {
            match spec {
                PagesSpec::List(pages) => pages.iter().map(|&p| Gpa(p as usize)).collect(),
                PagesSpec::Count(n) => {
                    let mut out: Vec<Gpa> =
                        free.drain(free.len() - *n as usize..).map(Gpa).collect();
                    out.sort_unstable();
                    out
                }
            }
        };

        let services: Vec<ServiceProfile> = self
            .services
            .iter()
            .map(|svc| ServiceProfile {
                name: svc.name.clone(),
                kernel_common: take(&svc.kernel_common),
                service_common: take(&svc.service_common),
                volatile_pool: take(&svc.volatile_pool),
                volatile_draw: DrawRange {
                    min: svc.volatile_draw.min as usize,
                    max: svc.volatile_draw.max as usize,
                },
                pre_resource_fraction: svc.pre_resource_fraction,
                resources: svc.resources.clone(),
            })
            .collect();

        let content_seed = seed::derive(seed_value, &[0xC0DE]);
        let resources: Vec<ResourceSpec> = self
            .resources
            .iter()
            .enumerate()
            .map(|(idx, res)| {
                let mut content_rng =
                    ChaCha12Rng::seed_from_u64(seed::derive(content_seed, &[idx as u64]));
                let mut content = vec![0u8; res.size_bytes as usize];
                content_rng.fill(&mut content[..]);
                ResourceSpec {
                    name: res.name.clone(),
                    gpas: take(&res.pages),
                    size_bytes: res.size_bytes as usize,
                    content,
                    sticky: res.sticky,
                    relocation_rate: res.relocation_rate,
                }
            })
            .collect();

        let mut machine = Machine::new(MachineConfig {
            guest_pages,
            page_size,
            spare_frames: self.spare_frames as usize,
            integrity_mode: integrity_override.unwrap_or(self.integrity_mode),
            content_seed,
        })?;
        let mut frames: Vec<usize> = (0..guest_pages).collect();
        frames.shuffle(&mut layout_rng);
        for (gpa, &frame) in frames.iter().enumerate() {
            machine.map(Gpa(gpa), crate::mem::FrameId(frame))?;
        }

        let noise = NoiseModel {
            level: self.noise.level,
            window_seconds: self.noise.window_seconds,
            clients: self
                .noise
                .clients
                .iter()
                .map(|c| ClientWeight {
                    service: c.service.clone(),
                    resource: c.resource.clone(),
                    weight: c.weight,
                })
                .collect(),
        };

        SimInstance::assemble(
            machine,
            services,
            resources,
            noise,
            seed::derive(seed_value, &[0x2077]),
        )
        .map_err(|source| ScenarioError::Assemble {
            path: "<build>".into(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
guest_pages = 128
page_size = 64
seed = 7

[target]
service = "svc"
resource = "res"
control = "decoy"

[noise]
level = 10.0
window_seconds = 0.1

[[services]]
name = "svc"
kernel_common = 4
service_common = 4
volatile_pool = 16
volatile_draw = { min = 2, max = 5 }
pre_resource_fraction = 0.9
resources = ["res", "decoy"]

[[resources]]
name = "res"
pages = 1
size_bytes = 64

[[resources]]
name = "decoy"
pages = 2
size_bytes = 100
"#;

    #[test]
    fn minimal_scenario_parses_and_builds() {
        let spec = ScenarioSpec::from_toml(MINIMAL, "<test>").unwrap();
        assert_eq!(spec.guest_pages, 128);
        assert!(spec.resources[0].sticky, "sticky defaults to true");
        let mut sim = spec.build().unwrap();
        let bytes = sim.handle_request("svc", "res").unwrap();
        assert_eq!(bytes.len(), 64);
        let decoy = sim.handle_request("svc", "decoy").unwrap();
        assert_eq!(decoy.len(), 100);
    }

    #[test]
    fn build_is_deterministic_in_seed() {
        let spec = ScenarioSpec::from_toml(MINIMAL, "<test>").unwrap();
        let mut a = spec.build().unwrap();
        let mut b = spec.build().unwrap();
        assert_eq!(
            a.ground_truth_resource_pages("res").unwrap(),
            b.ground_truth_resource_pages("res").unwrap()
        );
        assert_eq!(
            a.handle_request("svc", "res").unwrap(),
            b.handle_request("svc", "res").unwrap()
        );
        let mut c = spec.build_seeded(999, None).unwrap();
        assert_ne!(
            a.handle_request("svc", "res").unwrap(),
            c.handle_request("svc", "res").unwrap(),
            "different seed, different payload"
        );
    }

    #[test]
    fn explicit_page_lists_are_honored() {
        let text = MINIMAL.replace("kernel_common = 4", "kernel_common = [0, 1, 2, 3]").replace(
            "name = \"res\"\npages = 1",
            "name = \"res\"\npages = [100]",
        );
        let spec = ScenarioSpec::from_toml(&text, "<test>").unwrap();
        let sim = spec.build().unwrap();
        assert_eq!(
            sim.ground_truth_resource_pages("res").unwrap(),
            vec![Gpa(100)]
        );
    }

    #[test]
    fn syntax_errors_carry_line_context() {
        let err = ScenarioSpec::from_toml("guest_pages = {", "cfg.toml").unwrap_err();
        let text = err.to_string();
        assert!(text.contains("cfg.toml"), "got: {text}");
        let chain = format!("{:?}", anyhow_like(&err));
        assert!(chain.contains("line"), "toml context lost: {chain}");
    }

    fn anyhow_like(err: &ScenarioError) -> String {
        use std::error::Error;
        let mut out = err.to_string();
        let mut source = err.source();
        while let Some(s) = source {
            out.push_str(" | ");
            out.push_str(&s.to_string());
            source = s.source();
        }
        out
    }

    #[test]
    fn rejects_overlapping_explicit_lists() {
        let text = MINIMAL
            .replace("kernel_common = 4", "kernel_common = [0, 1]")
            .replace("service_common = 4", "service_common = [1, 2]");
        let err = ScenarioSpec::from_toml(&text, "<test>").unwrap_err();
        assert!(err.to_string().contains("overlaps"), "got: {err}");
    }

    #[test]
    fn rejects_page_budget_overrun() {
        let text = MINIMAL.replace("volatile_pool = 16", "volatile_pool = 125");
        let err = ScenarioSpec::from_toml(&text, "<test>").unwrap_err();
        assert!(err.to_string().contains("pages"), "got: {err}");
    }

    #[test]
    fn rejects_size_page_count_mismatch() {
        let text = MINIMAL.replace(
            "name = \"decoy\"\npages = 2\nsize_bytes = 100",
            "name = \"decoy\"\npages = 4\nsize_bytes = 100",
        );
        let err = ScenarioSpec::from_toml(&text, "<test>").unwrap_err();
        assert!(err.to_string().contains("need 2 pages"), "got: {err}");
    }

    #[test]
    fn rejects_unserved_target_pair() {
        let text = MINIMAL.replace("resources = [\"res\", \"decoy\"]", "resources = [\"decoy\"]");
        let err = ScenarioSpec::from_toml(&text, "<test>").unwrap_err();
        assert!(err.to_string().contains("must serve"), "got: {err}");
    }

    #[test]
    fn rejects_unknown_fields_and_absurd_geometry() {
        let text = format!("{MINIMAL}\nbogus_field = 3\n");
        assert!(ScenarioSpec::from_toml(&text, "<t>").is_err());

        let text = MINIMAL.replace("guest_pages = 128", "guest_pages = 99999999999");
        assert!(ScenarioSpec::from_toml(&text, "<t>").is_err());

        let text = MINIMAL.replace("page_size = 64", "page_size = 65");
        assert!(ScenarioSpec::from_toml(&text, "<t>").is_err());

        let text = MINIMAL.replace("level = 10.0", "level = 1e300");
        assert!(ScenarioSpec::from_toml(&text, "<t>").is_err());

        let text = MINIMAL.replace("level = 10.0", "level = nan");
        assert!(ScenarioSpec::from_toml(&text, "<t>").is_err());
    }

    #[test]
    fn sticky_resources_with_relocation_rate_are_contradictory() {
        let text = MINIMAL.replace(
            "name = \"res\"\npages = 1\nsize_bytes = 64",
            "name = \"res\"\npages = 1\nsize_bytes = 64\nrelocation_rate = 2.0",
        );
        let err = ScenarioSpec::from_toml(&text, "<t>").unwrap_err();
        assert!(err.to_string().contains("sticky"), "got: {err}");
    }

    #[test]
    fn relocatable_resources_need_free_slack() {
        // Fill the guest completely, then mark a resource relocatable.
        let text = MINIMAL
            .replace("volatile_pool = 16", "volatile_pool = 117")
            .replace(
                "name = \"res\"\npages = 1\nsize_bytes = 64",
                "name = \"res\"\npages = 1\nsize_bytes = 64\nsticky = false\nrelocation_rate = 1.0",
            );
        let err = ScenarioSpec::from_toml(&text, "<t>").unwrap_err();
        assert!(err.to_string().contains("relocate"), "got: {err}");
    }

    #[test]
    fn round_trips_through_display() {
        let spec = ScenarioSpec::from_toml(MINIMAL, "<test>").unwrap();
        let text = spec.to_string();
        let again = ScenarioSpec::from_toml(&text, "<roundtrip>").unwrap();
        assert_eq!(again.guest_pages, spec.guest_pages);
        assert_eq!(again.resources.len(), spec.resources.len());
        // Builds from the round-tripped spec are identical.
        let mut a = spec.build().unwrap();
        let mut b = again.build().unwrap();
        assert_eq!(
            a.handle_request("svc", "res").unwrap(),
            b.handle_request("svc", "res").unwrap()
        );
    }

    #[test]
    fn calibration_table_lookup() {
        let text = format!(
            "{MINIMAL}\n[[calibration.targets]]\nnoise_level = 20.0\nx_noise_probability = 0.35\nmean_recording_pages = 30.0\n"
        );
        let spec = ScenarioSpec::from_toml(&text, "<t>").unwrap();
        assert!(spec.calibration_target(20.0).is_some());
        assert!(spec.calibration_target(30.0).is_none());
    }
}
