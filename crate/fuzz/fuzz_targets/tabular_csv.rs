#![no_main]

use libfuzzer_sys::fuzz_target;
use vapf::attribute::{parse_tabular_csv, AttributeSchema};

fuzz_target!(|data: &[u8]| {
    let schema = AttributeSchema::clinical_default();
    if let Ok(rows) = parse_tabular_csv(data, &schema) {
        for row in rows {
            assert!(row.label <= 1);
        }
    }
});
