//! Family specs also arrive embedded in cached rows and report JSON; decoding
//! arbitrary bytes and realizing the result must fail cleanly, never panic.

#![no_main]

use landaulab::experiments::FamilySpec;
use landaulab::fields::SemiclassicalParams;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(spec) = serde_json::from_slice::<FamilySpec>(data) else { return };
    let Ok(params) = SemiclassicalParams::new(2.0, 0.1, 0.25) else { return };
    if let Ok(point) = spec.realize(&params) {
        // realized fields must at least evaluate at the domain center
        let c = point.domain.center();
        let _ = point.fields.potential_at(&c);
        let _ = point.fields.intensities(&c);
    }
});
