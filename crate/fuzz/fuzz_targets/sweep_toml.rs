//! Sweep configs come from user-edited TOML files; parsing must never panic,
//! and any accepted config must survive a serialize/reparse round trip.

#![no_main]

use landaulab::experiments::SweepSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(spec) = SweepSpec::from_toml_str(text) else { return };
    let emitted = toml::to_string(&spec).expect("accepted spec must serialize");
    let back = SweepSpec::from_toml_str(&emitted).expect("emitted spec must reparse");
    assert_eq!(spec, back, "round trip must be the identity");
});
