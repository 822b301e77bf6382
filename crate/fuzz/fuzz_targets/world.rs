#![no_main]
use libfuzzer_sys::fuzz_target;
use slam2d::sim::{format_world, parse_world};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(w) = parse_world("fuzz", text) {
        let again = parse_world("fuzz", &format_world(&w)).expect("formatted world parses");
        assert_eq!(again.segments.len(), w.segments.len());
    }
});
