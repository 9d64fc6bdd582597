//! Campaign runner behind the `slatsim` binary.
//!
//! [`campaign`] executes seeded identification/extraction campaigns over
//! a grid of noise levels, [`report`] fixes the CSV schemas, and
//! [`plot`] renders the per-iteration convergence curves. Everything is
//! deterministic in (scenario, campaign settings, base seed); the CSV
//! bytes themselves are reproducible.

pub mod campaign;
pub mod plot;
pub mod report;
