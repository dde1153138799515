#![no_main]

use libfuzzer_sys::fuzz_target;
use vapf::attribute::AttributeSchema;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(schema) = AttributeSchema::from_json(text) {
        let again = AttributeSchema::from_json(&schema.to_json()).expect("round trip");
        assert_eq!(again, schema);
    }
});
