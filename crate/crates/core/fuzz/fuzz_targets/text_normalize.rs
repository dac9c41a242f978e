#![no_main]
use libfuzzer_sys::fuzz_target;
use vqa_core::answer::normalize_answer;
use vqa_core::tokenize::{count_tokens, truncate_to_tokens};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let once = normalize_answer(text);
    assert_eq!(normalize_answer(&once), once);
    let cut = truncate_to_tokens(text, 7);
    assert!(count_tokens(&cut) <= 7);
});
