#![no_main]
use libfuzzer_sys::fuzz_target;
use slam2d::io::{format_map_meta, parse_map_meta};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(meta) = parse_map_meta(text) {
        assert_eq!(parse_map_meta(&format_map_meta(&meta)).unwrap(), meta);
    }
});
