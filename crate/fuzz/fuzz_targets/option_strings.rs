//! Small option grammars: registration stages, fusion strategy, baseline, protocol.
#![no_main]

use libfuzzer_sys::fuzz_target;
use scarline::fusion::Strategy;
use scarline::pipeline::Baseline;
use scarline::registration::Stages;
use scarline::svm::Protocol;

fuzz_target!(|text: &str| {
    let _ = Stages::parse(text);
    let _ = text.parse::<Strategy>();
    let _ = text.parse::<Baseline>();
    if let Ok(p) = text.parse::<Protocol>() {
        assert_eq!(
            p.to_string()
                .parse::<Protocol>()
                .expect("written protocol must parse"),
            p
        );
    }
});
