#![no_main]

use hdlane::scenario::ScenarioSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(spec) = ScenarioSpec::from_json(text) {
        let _ = spec.world_graph();
    }
});
