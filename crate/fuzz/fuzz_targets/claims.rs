#![no_main]

use bizinsight::pipeline::parse_claims;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Some(claims) = parse_claims(text) {
        assert!(claims.iter().all(|c| c.is_well_formed()));
    }
});
