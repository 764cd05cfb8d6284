#![no_main]

use bizinsight::datamodel::{insights_from_json, insights_to_json};
use bizinsight::narrative::{render_template, TemplateOptions};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(list) = insights_from_json(text) {
        assert_eq!(insights_from_json(&insights_to_json(&list)).expect("round trip"), list);
        let _ = render_template(&list, &TemplateOptions::default()).to_markdown();
    }
});
