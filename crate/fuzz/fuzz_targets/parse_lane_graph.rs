#![no_main]

use hdlane::graph::LaneGraph;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(g) = LaneGraph::from_json(text) {
        let _ = g.validate();
        let _ = g.incidence();
        let back = LaneGraph::from_json(&g.to_json()).expect("serialized graph parses");
        assert_eq!(back.to_json(), g.to_json());
    }
});
