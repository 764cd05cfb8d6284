#![no_main]

use bizinsight::datamodel::MetricRegistry;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(reg) = MetricRegistry::from_json(text) {
        let _ = reg.violations();
        assert_eq!(MetricRegistry::from_json(&reg.to_json()).expect("round trip"), reg);
    }
});
