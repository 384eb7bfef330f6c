#![no_main]

use libfuzzer_sys::fuzz_target;
use scarline::features::LabeledDataset;

fuzz_target!(|text: &str| {
    if let Ok(ds) = LabeledDataset::from_csv(text) {
        let written = ds.to_csv();
        let again = LabeledDataset::from_csv(&written).expect("written features must parse");
        assert_eq!(again.to_csv(), written);
    }
});
