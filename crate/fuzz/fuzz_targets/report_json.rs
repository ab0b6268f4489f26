//! Downstream tools read the JSON artifacts back; the serde decoders for the
//! report types must reject malformed bytes without panicking.

#![no_main]

use landaulab::classical_dynamics::{DriftReport, DriftSweep};
use landaulab::experiments::RemainderFit;
use landaulab::spectral_count::CountingCurve;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = serde_json::from_slice::<CountingCurve>(data);
    let _ = serde_json::from_slice::<DriftReport>(data);
    let _ = serde_json::from_slice::<DriftSweep>(data);
    let _ = serde_json::from_slice::<RemainderFit>(data);
});
