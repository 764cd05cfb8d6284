#![no_main]

use bizinsight::prompt::{embed, extract};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Some(Ok(block)) = extract(text) {
        let again = extract(&embed(&block)).expect("fence present").expect("block parses");
        assert_eq!(again.facts.len(), block.facts.len());
    }
});
