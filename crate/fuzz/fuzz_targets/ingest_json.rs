#![no_main]

use bizinsight::ingest::{parse_json_str, write_json, IngestConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let reg = bizinsight_fuzz::registry();
    let cfg = IngestConfig::default();
    if let Ok(first) = parse_json_str(text, &reg, &cfg) {
        let again = parse_json_str(&write_json(&first.dataset), &reg, &cfg).expect("written json parses");
        assert_eq!(again.dataset.rows.len(), first.dataset.rows.len());
    }
});
