#![no_main]

use hdlane::rgcn::RgcnModel;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(model) = RgcnModel::from_json(text) {
        let back = RgcnModel::from_json(&model.to_json()).expect("serialized model parses");
        assert_eq!(back, model);
    }
});
