#![no_main]

use bizinsight::narrative::{extract_numbers, parse_markdown, ReportDoc};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = parse_markdown(text);
    let _ = extract_numbers(text);
    if let Ok(doc) = ReportDoc::from_json(text) {
        let _ = doc.to_markdown();
    }
});
