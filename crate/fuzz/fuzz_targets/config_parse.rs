#![no_main]

use clang_vqa::data::DatasetSpec;
use clang_vqa::train::TrainConfig;
use libfuzzer_sys::fuzz_target;

// Both CLI-facing JSON documents share a target; valid parses also run
// their validators, which must reject rather than panic.
fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = serde_json::from_str::<TrainConfig>(text) {
            let _ = cfg.validate();
        }
        if let Ok(spec) = serde_json::from_str::<DatasetSpec>(text) {
            let _ = spec.validate();
        }
    }
});
