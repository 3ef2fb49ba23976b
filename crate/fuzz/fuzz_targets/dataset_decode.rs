#![no_main]

use clang_vqa::data::format::decode_dataset;
use libfuzzer_sys::fuzz_target;

// Input layout: manifest text, a NUL, then raw blob bytes. JSON never
// carries a NUL, so the split loses no interesting inputs.
fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == 0).unwrap_or(data.len());
    let (manifest, blob) = data.split_at(split);
    let blob = blob.get(1..).unwrap_or(&[]);
    if let Ok(text) = std::str::from_utf8(manifest) {
        let _ = decode_dataset(text, blob);
    }
});
