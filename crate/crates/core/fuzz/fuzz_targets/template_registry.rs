#![no_main]
use libfuzzer_sys::fuzz_target;
use vqa_core::qa::TemplateRegistry;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(registry) = TemplateRegistry::parse(text) {
        for t in registry.templates() {
            let q = t.render(Some("color"));
            assert!(registry.identify(&q).is_some());
        }
    }
});
