#![no_main]
use libfuzzer_sys::fuzz_target;
use vqa_core::eval::Split;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = vqa_core::eval::dataset::parse_aokvqa(text, Split::Val);
});
