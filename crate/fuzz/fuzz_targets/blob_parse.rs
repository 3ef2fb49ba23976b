#![no_main]

use clang_vqa::data::format::parse_blob_header;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = parse_blob_header(data);
});
