//! Fuzz the translation-table state machine: decode the input as a
//! small op program over a tiny machine and check every step against a
//! plain-map model of what translations, snapshots, integrity faults,
//! tracking windows, and restores must do. Mirrors the seeded property
//! suite in crates/core/tests/properties.rs, but with the op stream
//! chosen by the fuzzer.

#![no_main]

use libfuzzer_sys::fuzz_target;
use slatsim_core::mem::{AccessKind, FrameId, Gpa, Machine, MachineConfig};

const PAGES: usize = 8;
const PAGE_SIZE: usize = 32;
const SPARES: usize = 4;
const FRAMES: usize = PAGES + SPARES;

fuzz_target!(|data: &[u8]| {
    let Some((&cfg, ops)) = data.split_first() else {
        return;
    };
    if ops.len() > 1 << 14 {
        return;
    }
    let integrity = cfg & 1 == 1;
    let mut machine = Machine::new(MachineConfig {
        guest_pages: PAGES,
        page_size: PAGE_SIZE,
        spare_frames: SPARES,
        integrity_mode: integrity,
        content_seed: cfg as u64,
    })
    .expect("fixed geometry is valid");
    for gpa in 0..PAGES {
        machine.map(Gpa(gpa), FrameId(gpa)).unwrap();
    }
    let snapshot: Vec<usize> = (0..PAGES).collect();
    let mut model = snapshot.clone();
    // Every guest write either faults or re-binds its page, and the host
    // may not write snapshot frames, so under integrity mode a page
    // faults exactly when its translation has drifted from the snapshot.
    let faults = |model: &[usize], gpa: usize| integrity && model[gpa] != snapshot[gpa];

    for chunk in ops.chunks_exact(3) {
        let (op, a, b) = (chunk[0], chunk[1], chunk[2]);
        let gpa = a as usize % (PAGES + 2);
        match op % 7 {
            0 => {
                let frame = b as usize % (FRAMES + 2);
                let res = machine.remap(Gpa(gpa), FrameId(frame));
                if gpa >= PAGES || frame >= FRAMES {
                    assert!(res.is_err(), "remap out of range must fail");
                } else {
                    assert_eq!(res.unwrap(), FrameId(model[gpa]));
                    model[gpa] = frame;
                }
            }
            1 => {
                let res = machine.on_access(Gpa(gpa), AccessKind::Read);
                if gpa >= PAGES {
                    assert!(res.is_err(), "access out of range must fail");
                } else {
                    assert_eq!(res.unwrap().is_fault(), faults(&model, gpa));
                }
            }
            2 => {
                let offset = b as usize % (PAGE_SIZE + 4);
                let res = machine.guest_write(Gpa(gpa), offset, &[b]);
                if gpa >= PAGES || offset + 1 > PAGE_SIZE {
                    assert!(res.is_err(), "write out of range must fail");
                } else if faults(&model, gpa) {
                    assert!(res.unwrap().is_fault());
                } else {
                    assert!(!res.unwrap().is_fault());
                    assert_eq!(machine.read_through(Gpa(gpa)).unwrap()[offset], b);
                }
            }
            3 => {
                machine.begin_tracking().unwrap();
                assert!(machine.begin_tracking().is_err(), "no nested windows");
                let mut expected = Vec::new();
                for touch in [gpa, b as usize % (PAGES + 2)] {
                    let res = machine.on_access(Gpa(touch), AccessKind::Read);
                    if touch >= PAGES {
                        assert!(res.is_err());
                    } else {
                        // Tracking observes the touch even when the
                        // access itself faults.
                        assert_eq!(res.unwrap().is_fault(), faults(&model, touch));
                        if !expected.contains(&Gpa(touch)) {
                            expected.push(Gpa(touch));
                        }
                    }
                }
                let recording = machine.end_tracking().unwrap();
                assert_eq!(recording.pages(), &expected[..]);
            }
            4 => {
                let drifted = (0..PAGES).filter(|&g| model[g] != snapshot[g]).count();
                assert_eq!(machine.restore_mappings(), drifted);
                model.copy_from_slice(&snapshot);
            }
            5 => {
                let frame = b as usize % (FRAMES + 2);
                let res = machine.host_write_frame(FrameId(frame), &[a; PAGE_SIZE]);
                if frame >= FRAMES || frame < PAGES {
                    // Out of range, or backing a live guest mapping.
                    assert!(res.is_err());
                } else {
                    res.unwrap();
                    assert_eq!(
                        machine.frame_bytes(FrameId(frame)).unwrap(),
                        [a; PAGE_SIZE].as_slice()
                    );
                }
            }
            _ => {
                assert!(machine.end_tracking().is_err(), "no window is open here");
            }
        }

        for g in 0..PAGES {
            assert_eq!(machine.translate(Gpa(g)).unwrap(), FrameId(model[g]));
            assert_eq!(machine.snapshot_frame(Gpa(g)).unwrap(), FrameId(snapshot[g]));
        }
        assert!(machine.translate(Gpa(PAGES)).is_err());
    }

    machine.restore_mappings();
    assert_eq!(machine.restore_mappings(), 0, "restore must be idempotent");
});
