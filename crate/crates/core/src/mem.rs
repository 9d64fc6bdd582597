//! Guest-physical memory behind a second-level translation table.
//!
//! The hypervisor side of the model: a bank of physical frames, a
//! per-guest-page translation entry, access tracking by present-bit
//! clearing, and arbitrary remapping of guest pages onto frames. Frame
//! contents are opaque to the hypervisor in the threat model (memory
//! encryption); accessors that read frame bytes directly exist for
//! ground-truth checks in tests and are documented as such.
//!
//! An optional integrity mode binds every mapped page to a digest of
//! (frame content, guest page index, boot nonce) and re-checks the
//! binding on each access, which turns any remap of a page onto foreign
//! content into a fault instead of a silently wrong translation.

use std::collections::BTreeSet;
use std::fmt;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::seed;

/// Guest-physical page index.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct Gpa(pub usize);

/// Host physical frame index.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct FrameId(pub usize);

impl fmt::Display for Gpa {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for FrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Hard ceilings on machine geometry, shared with scenario validation so
/// untrusted scenario files cannot request absurd allocations.
pub const MAX_GUEST_PAGES: usize = 1 << 22;
pub const MAX_PAGE_SIZE: usize = 1 << 16;
pub const MIN_PAGE_SIZE: usize = 16;
pub const MAX_TOTAL_BYTES: u64 = 1 << 28;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MemError {
    #[error("guest page {0} is out of range")]
    GpaOutOfRange(Gpa),
    #[error("frame {0} is out of range")]
    FrameOutOfRange(FrameId),
    #[error("guest page {0} is already mapped")]
    AlreadyMapped(Gpa),
    #[error("guest page {0} is not mapped")]
    Unmapped(Gpa),
    #[error("integrity fault on guest page {0}")]
    IntegrityFault(Gpa),
    #[error("access tracking is already active")]
    TrackingActive,
    #[error("access tracking is not active")]
    TrackingInactive,
    #[error("frame {0} backs a guest mapping and cannot be written from the host")]
    FrameInUse(FrameId),
    #[error("write of {len} bytes at offset {offset} exceeds page size {page_size}")]
    OutOfPage {
        offset: usize,
        len: usize,
        page_size: usize,
    },
    #[error("bad machine geometry: {0}")]
    BadGeometry(String),
}

/// What happened when the guest touched a page.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum AccessOutcome {
    /// The access went through directly.
    Granted,
    /// The page was non-present under tracking: the implicit fault was
    /// recorded, the present bit restored, and the access then granted.
    Tracked,
    /// Integrity mode rejected the page's current backing; the access
    /// did not complete.
    IntegrityFault,
}

impl AccessOutcome {
    pub fn is_fault(self) -> bool {
        matches!(self, AccessOutcome::IntegrityFault)
    }
}

/// Whether an access reads or writes. Tracking records both identically;
/// the distinction only matters for content updates.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum AccessKind {
    Read,
    Write,
}

/// The ordered trace of one tracking session.
///
/// Pages appear in first-touch order and at most once: repeat accesses
/// to an already-recorded page do not fault again and are not recorded
/// again within the same session.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct AccessRecording {
    pages: Vec<Gpa>,
}

impl AccessRecording {
    pub fn pages(&self) -> &[Gpa] {
        &self.pages
    }

    pub fn len(&self) -> usize {
        self.pages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pages.is_empty()
    }

    pub fn contains(&self, gpa: Gpa) -> bool {
        self.pages.contains(&gpa)
    }

    /// The recording as an unordered set.
    pub fn page_set(&self) -> BTreeSet<Gpa> {
        self.pages.iter().copied().collect()
    }

    /// Position of `gpa` in first-touch order, if recorded.
    pub fn touch_position(&self, gpa: Gpa) -> Option<usize> {
        self.pages.iter().position(|&p| p == gpa)
    }

    /// Builds a synthetic recording from an explicit first-touch order.
    /// Real recordings come from tracking sessions; this exists for
    /// worked examples and tests, and deduplicates to keep the at-most-
    /// once invariant.
    pub fn from_pages(pages: Vec<Gpa>) -> Self {
        let mut seen = BTreeSet::new();
        AccessRecording {
            pages: pages.into_iter().filter(|p| seen.insert(*p)).collect(),
        }
    }
}

#[derive(Clone, Debug)]
struct SltEntry {
    frame: FrameId,
    /// Cleared at the start of a tracking session; the first access to a
    /// non-present page is the recorded "touch".
    present: bool,
    /// Integrity binding over (frame content, gpa, nonce); `None` when
    /// integrity mode is off.
    digest: Option<[u8; 32]>,
}

/// Geometry and modes for a [`Machine`].
#[derive(Clone, Debug)]
pub struct MachineConfig {
    /// Size of the guest-physical address space, in pages.
    pub guest_pages: usize,
    /// Page size in bytes; power of two.
    pub page_size: usize,
    /// Extra unmapped frames beyond `guest_pages`, available to the host
    /// as staging space.
    pub spare_frames: usize,
    /// Enable the per-page integrity binding countermeasure.
    pub integrity_mode: bool,
    /// Seed for the deterministic initial frame fill.
    pub content_seed: u64,
}

impl Default for MachineConfig {
    fn default() -> Self {
        MachineConfig {
            guest_pages: 64,
            page_size: 256,
            spare_frames: 4,
            integrity_mode: false,
            content_seed: 0,
        }
    }
}

/// Physical frames plus the second-level translation table for one guest.
pub struct Machine {
    page_size: usize,
    frames: Vec<Box<[u8]>>,
    entries: Vec<Option<SltEntry>>,
    /// Per-gpa original mapping, captured at `map` time.
    snapshot: Vec<Option<FrameId>>,
    /// Frames appearing in the snapshot; the host may not write these.
    snapshot_frames: BTreeSet<FrameId>,
    /// First-touch order of the active tracking session, if any.
    tracking: Option<Vec<Gpa>>,
    /// Digest nonce; fixed at construction, same role as a boot-time key.
    nonce: u64,
    integrity_mode: bool,
}

impl Machine {
    pub fn new(config: MachineConfig) -> Result<Self, MemError> {
        if config.guest_pages == 0 || config.guest_pages > MAX_GUEST_PAGES {
            return Err(MemError::BadGeometry(format!(
                "guest_pages {} outside 1..={}",
                config.guest_pages, MAX_GUEST_PAGES
            )));
        }
        if !config.page_size.is_power_of_two()
            || config.page_size < MIN_PAGE_SIZE
            || config.page_size > MAX_PAGE_SIZE
        {
            return Err(MemError::BadGeometry(format!(
                "page_size {} must be a power of two in {}..={}",
                config.page_size, MIN_PAGE_SIZE, MAX_PAGE_SIZE
            )));
        }
        let total_frames = config.guest_pages.saturating_add(config.spare_frames);
        let total_bytes = total_frames as u64 * config.page_size as u64;
        if total_bytes > MAX_TOTAL_BYTES {
            return Err(MemError::BadGeometry(format!(
                "{total_frames} frames of {} bytes exceed the {} byte ceiling",
                config.page_size, MAX_TOTAL_BYTES
            )));
        }

        let mut frames = Vec::with_capacity(total_frames);
        for idx in 0..total_frames {
            let mut frame = vec![0u8; config.page_size].into_boxed_slice();
            seed::fill_pattern(
                seed::derive(config.content_seed, &[0xF0A3, idx as u64]),
                &mut frame,
            );
            frames.push(frame);
        }

        Ok(Machine {
            page_size: config.page_size,
            frames,
            entries: vec![None; config.guest_pages],
            snapshot: vec![None; config.guest_pages],
            snapshot_frames: BTreeSet::new(),
            tracking: None,
            nonce: seed::derive(config.content_seed, &[0x1D07]),
            integrity_mode: config.integrity_mode,
        })
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn guest_pages(&self) -> usize {
        self.entries.len()
    }

    pub fn total_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn integrity_mode(&self) -> bool {
        self.integrity_mode
    }

    pub fn tracking_active(&self) -> bool {
        self.tracking.is_some()
    }

    fn digest_for(&self, frame: FrameId, gpa: Gpa) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(&self.frames[frame.0]);
        hasher.update((gpa.0 as u64).to_le_bytes());
        hasher.update(self.nonce.to_le_bytes());
        hasher.finalize().into()
    }

    fn check_gpa(&self, gpa: Gpa) -> Result<(), MemError> {
        if gpa.0 < self.entries.len() {
            Ok(())
        } else {
            Err(MemError::GpaOutOfRange(gpa))
        }
    }

    fn check_frame(&self, frame: FrameId) -> Result<(), MemError> {
        if frame.0 < self.frames.len() {
            Ok(())
        } else {
            Err(MemError::FrameOutOfRange(frame))
        }
    }

    /// Establishes the initial mapping `gpa -> frame` and snapshots it as
    /// the restore point. In integrity mode the binding digest is taken
    /// over the frame's content at map time.
    pub fn map(&mut self, gpa: Gpa, frame: FrameId) -> Result<(), MemError> {
        self.check_gpa(gpa)?;
        self.check_frame(frame)?;
        if self.entries[gpa.0].is_some() {
            return Err(MemError::AlreadyMapped(gpa));
        }
        let digest = self.integrity_mode.then(|| self.digest_for(frame, gpa));
        self.entries[gpa.0] = Some(SltEntry {
            frame,
            present: true,
            digest,
        });
        self.snapshot[gpa.0] = Some(frame);
        self.snapshot_frames.insert(frame);
        Ok(())
    }

    /// Points an already-mapped guest page at a different frame and
    /// returns the frame it previously pointed at. The snapshot and any
    /// integrity binding are deliberately left untouched: remapping is a
    /// host-side action the guest never sanctioned.
    pub fn remap(&mut self, gpa: Gpa, frame: FrameId) -> Result<FrameId, MemError> {
        self.check_gpa(gpa)?;
        self.check_frame(frame)?;
        let entry = self.entries[gpa.0]
            .as_mut()
            .ok_or(MemError::Unmapped(gpa))?;
        let previous = entry.frame;
        entry.frame = frame;
        Ok(previous)
    }

    /// Current translation of `gpa`.
    pub fn translate(&self, gpa: Gpa) -> Result<FrameId, MemError> {
        self.check_gpa(gpa)?;
        self.entries[gpa.0]
            .as_ref()
            .map(|e| e.frame)
            .ok_or(MemError::Unmapped(gpa))
    }

    /// The frame `gpa` was originally mapped to.
    pub fn snapshot_frame(&self, gpa: Gpa) -> Result<FrameId, MemError> {
        self.check_gpa(gpa)?;
        self.snapshot[gpa.0].ok_or(MemError::Unmapped(gpa))
    }

    /// Frames backing the original mappings, in ascending order: the
    /// guest's own memory, as opposed to host spares.
    pub fn original_frames(&self) -> Vec<FrameId> {
        self.snapshot_frames.iter().copied().collect()
    }

    /// Frames not backing any original mapping, in ascending order.
    /// These are the host's scratch space for staging probe content.
    pub fn unmapped_frames(&self) -> Vec<FrameId> {
        (0..self.frames.len())
            .map(FrameId)
            .filter(|f| !self.snapshot_frames.contains(f))
            .collect()
    }

    /// Clears the present bit on every mapped page and starts recording
    /// first touches.
    pub fn begin_tracking(&mut self) -> Result<(), MemError> {
        if self.tracking.is_some() {
            return Err(MemError::TrackingActive);
        }
        for entry in self.entries.iter_mut().flatten() {
            entry.present = false;
        }
        self.tracking = Some(Vec::new());
        Ok(())
    }

    /// Stops recording, restores all present bits, and returns the
    /// ordered first-touch trace.
    pub fn end_tracking(&mut self) -> Result<AccessRecording, MemError> {
        let pages = self.tracking.take().ok_or(MemError::TrackingInactive)?;
        for entry in self.entries.iter_mut().flatten() {
            entry.present = true;
        }
        Ok(AccessRecording { pages })
    }

    /// A guest touch of `gpa`. Tracking (if active) observes the touch
    /// before the integrity check runs, so a tampered page still shows up
    /// in the recording even though the access itself faults.
    pub fn on_access(&mut self, gpa: Gpa, _kind: AccessKind) -> Result<AccessOutcome, MemError> {
        self.check_gpa(gpa)?;
        let entry = self.entries[gpa.0]
            .as_ref()
            .ok_or(MemError::Unmapped(gpa))?;
        let frame = entry.frame;
        let bound = entry.digest;

        let mut tracked = false;
        if self.tracking.is_some() {
            let entry = self.entries[gpa.0].as_mut().expect("checked above");
            if !entry.present {
                entry.present = true;
                tracked = true;
            }
        }
        if tracked {
            self.tracking
                .as_mut()
                .expect("tracking checked active")
                .push(gpa);
        }

        if self.integrity_mode {
            let expected = self.digest_for(frame, gpa);
            if bound != Some(expected) {
                return Ok(AccessOutcome::IntegrityFault);
            }
        }

        Ok(if tracked {
            AccessOutcome::Tracked
        } else {
            AccessOutcome::Granted
        })
    }

    /// Guest read of a whole page through the current translation.
    /// Integrity faults surface as errors here because the read produces
    /// no data.
    pub fn read_through(&mut self, gpa: Gpa) -> Result<&[u8], MemError> {
        match self.on_access(gpa, AccessKind::Read)? {
            AccessOutcome::IntegrityFault => Err(MemError::IntegrityFault(gpa)),
            _ => {
                let frame = self.entries[gpa.0].as_ref().expect("mapped").frame;
                Ok(&self.frames[frame.0])
            }
        }
    }

    /// Guest write through the current translation. In integrity mode a
    /// successful write re-binds the page to its new content, exactly as
    /// a guest-initiated update should; a faulting write changes nothing.
    pub fn guest_write(
        &mut self,
        gpa: Gpa,
        offset: usize,
        bytes: &[u8],
    ) -> Result<AccessOutcome, MemError> {
        if offset + bytes.len() > self.page_size {
            return Err(MemError::OutOfPage {
                offset,
                len: bytes.len(),
                page_size: self.page_size,
            });
        }
        let outcome = self.on_access(gpa, AccessKind::Write)?;
        if outcome.is_fault() {
            return Ok(outcome);
        }
        let frame = self.entries[gpa.0].as_ref().expect("mapped").frame;
        self.frames[frame.0][offset..offset + bytes.len()].copy_from_slice(bytes);
        if self.integrity_mode {
            let digest = self.digest_for(frame, gpa);
            self.entries[gpa.0].as_mut().expect("mapped").digest = Some(digest);
        }
        Ok(outcome)
    }

    /// Host-side write of an entire spare frame (probe staging). Frames
    /// that back a guest mapping are refused: the host in this model
    /// tampers with translations, never with the guest's own memory.
    pub fn host_write_frame(&mut self, frame: FrameId, bytes: &[u8]) -> Result<(), MemError> {
        self.check_frame(frame)?;
        if self.snapshot_frames.contains(&frame) {
            return Err(MemError::FrameInUse(frame));
        }
        if bytes.len() != self.page_size {
            return Err(MemError::OutOfPage {
                offset: 0,
                len: bytes.len(),
                page_size: self.page_size,
            });
        }
        self.frames[frame.0].copy_from_slice(bytes);
        Ok(())
    }

    /// Raw frame content. Ground-truth accessor for tests and evaluation
    /// artifacts; attack code must only learn content through service
    /// responses.
    pub fn frame_bytes(&self, frame: FrameId) -> Result<&[u8], MemError> {
        self.check_frame(frame)?;
        Ok(&self.frames[frame.0])
    }

    /// Puts every translation back to its snapshot. Returns how many
    /// entries actually changed. Idempotent.
    pub fn restore_mappings(&mut self) -> usize {
        let mut changed = 0;
        for (idx, entry) in self.entries.iter_mut().enumerate() {
            if let Some(entry) = entry {
                let original = self.snapshot[idx].expect("mapped entries have snapshots");
                if entry.frame != original {
                    entry.frame = original;
                    changed += 1;
                }
            }
        }
        changed
    }
}
