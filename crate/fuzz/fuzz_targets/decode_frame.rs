#![no_main]

use hdlane::transport::{decode_frame, encode_frame};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    match decode_frame(data) {
        Ok(map) => {
            // Coordinates are rounded on encode, so compare from the first
            // canonical encoding onward.
            let once = encode_frame(&map).expect("decoded map re-encodes");
            let twice = encode_frame(&decode_frame(&once).expect("re-decodes")).unwrap();
            assert_eq!(once, twice);
        }
        Err(e) => assert!(e.kind().is_some(), "unclassified decode error: {e}"),
    }
});
