#![no_main]

use libfuzzer_sys::fuzz_target;
use scarline::pipeline::{clicks_to_csv, parse_clicks};

fuzz_target!(|text: &str| {
    if let Ok(clicks) = parse_clicks(text) {
        let again = parse_clicks(&clicks_to_csv(&clicks)).expect("written clicks must parse");
        assert_eq!(again, clicks);
    }
});
