#![no_main]
use libfuzzer_sys::fuzz_target;
use vqa_core::qa::{AdjTypeLexicon, PosTagger, RuleBasedTagger};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(tagger) = RuleBasedTagger::parse(text) {
        let _ = tagger.tag(text);
    }
    let _ = AdjTypeLexicon::parse(text);
});
