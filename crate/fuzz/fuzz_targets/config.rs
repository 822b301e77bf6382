#![no_main]
use libfuzzer_sys::fuzz_target;
use slam2d::io::{format_config, parse_config};
use slam2d::pipeline::PipelineConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(map) = parse_config(text) {
        assert_eq!(parse_config(&format_config(&map)).unwrap(), map);
        let _ = PipelineConfig::from_map(&map);
    }
});
