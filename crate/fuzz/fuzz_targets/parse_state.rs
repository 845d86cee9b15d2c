#![no_main]

use hdlane::aggregator::GlobalMap;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(state) = GlobalMap::from_json(text) {
        let _ = state.snapshot();
    }
});
