//! Fuzz the scenario TOML parser. `ScenarioSpec::from_toml` must never
//! panic on arbitrary text, and any spec it accepts must survive a
//! serialize/reparse round trip.

#![no_main]

use libfuzzer_sys::fuzz_target;
use slatsim_core::scenario::ScenarioSpec;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(spec) = ScenarioSpec::from_toml(text, "<fuzz>") else {
        return;
    };
    // from_toml validated it, so re-rendering and reparsing must both
    // succeed: anything less means the parser and the serializer
    // disagree about the format.
    let rendered = spec.to_string();
    ScenarioSpec::from_toml(&rendered, "<fuzz reparse>")
        .expect("accepted spec failed to round-trip through its own TOML rendering");
});
