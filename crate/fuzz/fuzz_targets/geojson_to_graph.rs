#![no_main]

use hdlane::geo_map::{geojson_to_graph, GeoLaneMap};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((&degree, rest)) = data.split_first() else {
        return;
    };
    let Ok(text) = std::str::from_utf8(rest) else {
        return;
    };
    if let Ok(map) = GeoLaneMap::from_json(text) {
        let _ = geojson_to_graph(&map, 1 + usize::from(degree % 6));
    }
});
