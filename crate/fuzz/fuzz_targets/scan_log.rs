#![no_main]
use libfuzzer_sys::fuzz_target;
use slam2d::io::{format_scan_log, parse_scan_log};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(scans) = parse_scan_log(text) {
        let again = parse_scan_log(&format_scan_log(&scans)).expect("formatted log parses");
        assert_eq!(again.len(), scans.len());
    }
});
