#![no_main]
use libfuzzer_sys::fuzz_target;
use vqa_core::eval::dataset::{parse_records, records_to_jsonl};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_records(text) {
        let again = parse_records(&records_to_jsonl(&records)).expect("written records parse");
        assert_eq!(again.len(), records.len());
    }
});
