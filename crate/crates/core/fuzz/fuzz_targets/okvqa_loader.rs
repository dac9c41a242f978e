#![no_main]
use libfuzzer_sys::fuzz_target;

// Question and annotation files separated by a NUL byte.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let (questions, annotations) = text.split_once('\0').unwrap_or((text, ""));
    let _ = vqa_core::eval::dataset::parse_okvqa(questions, annotations);
});
