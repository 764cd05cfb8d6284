#![no_main]

use bizinsight::anonymize::{decode, NameVault};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(v) = NameVault::from_json(text) {
        let back = NameVault::from_json(&v.to_json()).expect("round trip");
        assert_eq!(back.to_json(), v.to_json());
    }
    // Against an empty vault every token in the text is a leak.
    let (_, leaks) = decode(text, &NameVault::new("fuzz"));
    assert_eq!(leaks > 0, bizinsight::anonymize::contains_token_pattern(text));
});
