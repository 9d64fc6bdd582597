//! Deterministic simulation of a page-frame remapping attack against a
//! memory-encrypted virtual machine.
//!
//! The model has three layers:
//!
//! * [`mem`] — guest-physical memory behind a second-level translation
//!   table, with access tracking (present-bit clearing), frame remapping,
//!   and an optional per-frame integrity binding that defeats remapping.
//! * [`guest`] — a synthetic guest running request-serving services whose
//!   page-access behaviour is reproducible from a seed, plus a Poisson
//!   client-noise model and resource relocation/eviction.
//! * [`identify`] / [`extract`] — the attack itself: narrowing down which
//!   guest pages back a chosen service resource purely from access
//!   recordings, then pulling guest memory out through remapped responses.
//!
//! [`scenario`] parses and validates the on-disk scenario description
//! format and builds ready-to-run instances; [`calibrate`] fits a
//! scenario's free parameters to measured noise/recording targets.
//!
//! Everything downstream of a seed is deterministic: two runs with the
//! same scenario and seed produce byte-identical recordings, rankings,
//! and extracted images.

pub mod calibrate;
pub mod extract;
pub mod guest;
pub mod identify;
pub mod mem;
pub mod scenario;
pub mod seed;
