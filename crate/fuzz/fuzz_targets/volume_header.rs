//! Header text, then a NUL, then the raw payload.
#![no_main]

use libfuzzer_sys::fuzz_target;
use scarline::volume::Header;

fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == 0).unwrap_or(data.len());
    let Ok(text) = std::str::from_utf8(&data[..split]) else {
        return;
    };
    let Ok(h) = Header::parse(text) else {
        return;
    };
    let again = Header::parse(&h.to_text()).expect("written header must parse");
    assert_eq!(again.to_text(), h.to_text());
    let payload = data.get(split + 1..).unwrap_or(&[]);
    if let Ok(v) = h.decode(payload) {
        assert_eq!(v.geometry().len() * h.dtype.bytes(), payload.len());
    }
});
