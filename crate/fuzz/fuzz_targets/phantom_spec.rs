#![no_main]

use libfuzzer_sys::fuzz_target;
use scarline::volume::{make_phantom, PhantomSpec};

fuzz_target!(|text: &str| {
    let Ok(spec) = PhantomSpec::from_json(text) else {
        return;
    };
    let again = PhantomSpec::from_json(&spec.to_json()).expect("written spec must parse");
    assert_eq!(again.to_json(), spec.to_json());
    // Rendering is only worth it on small grids.
    if spec.dims.iter().product::<usize>() <= 4096 && spec.shells.len() + spec.blobs.len() <= 16 {
        let _ = make_phantom(&spec);
    }
});
