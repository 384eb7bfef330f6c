#![no_main]

use libfuzzer_sys::fuzz_target;
use scarline::pipeline::PipelineConfig;

fuzz_target!(|text: &str| {
    if let Ok(cfg) = PipelineConfig::parse(text) {
        let written = cfg.to_text();
        let again = PipelineConfig::parse(&written).expect("written config must parse");
        assert_eq!(again.to_text(), written);
    }
});
