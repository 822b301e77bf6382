#![no_main]
use libfuzzer_sys::fuzz_target;
use slam2d::io::{format_graph, parse_graph};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(g) = parse_graph(text, 10) {
        let again = parse_graph(&format_graph(&g), 10).expect("formatted graph parses");
        assert_eq!(again.len(), g.len());
        assert_eq!(again.constraints().len(), g.constraints().len());
    }
});
