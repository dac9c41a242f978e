#![no_main]
use libfuzzer_sys::fuzz_target;
use vqa_core::pipeline::PipelineConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(config) = PipelineConfig::from_toml(text) {
        let again = PipelineConfig::from_toml(&config.to_toml()).expect("serialized config parses");
        assert_eq!(again.config_id(), config.config_id());
    }
});
