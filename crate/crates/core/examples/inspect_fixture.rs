//! Prints every stage artifact of the first OK-VQA fixture item.

use std::path::PathBuf;

use vqa_core::pipeline::{load_items, Pipeline, PipelineConfig};

fn main() {
    let fixtures = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let config = PipelineConfig::load(&fixtures.join("stub_okvqa.toml")).expect("fixture config");
    let items = load_items(&config).expect("fixture items");
    let pipeline = Pipeline::from_config(config).expect("stub pipeline");
    for item in &items {
        let trace = pipeline.process_item(item);
        println!("{}", trace.render(item));
    }
}
