#![no_main]
use libfuzzer_sys::fuzz_target;
use slam2d::io::decode_pgm;

fuzz_target!(|data: &[u8]| {
    if let Ok((w, h, pixels)) = decode_pgm(data) {
        assert_eq!(pixels.len(), w * h);
    }
});
