#![no_main]

use hdlane::geo_map::GeoLaneMap;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok((map, _warnings)) = GeoLaneMap::parse(text) {
        let bytes = map.to_json();
        let back = GeoLaneMap::from_json(&bytes).expect("serialized map parses");
        assert_eq!(back.to_json(), bytes);
    }
});
