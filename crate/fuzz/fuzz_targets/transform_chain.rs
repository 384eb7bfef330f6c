#![no_main]

use libfuzzer_sys::fuzz_target;
use scarline::transform::{SpatialTransform, TransformChain};

fuzz_target!(|text: &str| {
    if let Ok(chain) = TransformChain::parse(text) {
        let written = chain.to_text();
        let again = TransformChain::parse(&written).expect("written chain must parse");
        assert_eq!(again.to_text(), written);
        let _ = chain.map_point([1.0, 2.0, 3.0]);
    }
});
