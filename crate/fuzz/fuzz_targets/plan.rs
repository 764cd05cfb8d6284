#![no_main]

use bizinsight::datamodel::TransformPlan;
use bizinsight::preprocess::apply_plan;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(plan) = TransformPlan::from_json(text) {
        let _ = apply_plan(&bizinsight_fuzz::sample(), &plan);
    }
});
