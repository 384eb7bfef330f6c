#![no_main]

use libfuzzer_sys::fuzz_target;
use scarline::svm::SvmModel;

fuzz_target!(|text: &str| {
    if let Ok(m) = SvmModel::parse(text) {
        let written = m.to_text();
        let again = SvmModel::parse(&written).expect("written model must parse");
        assert_eq!(again.to_text(), written);
        let x = vec![0.5; m.mean.len()];
        let _ = m.decision(&x);
    }
});
