#![no_main]

use libfuzzer_sys::fuzz_target;
use vapf::visual::{decode_volume, parse_volume_header};

// Input: header text, a NUL byte, then the raw payload.
fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == 0).unwrap_or(data.len());
    let Ok(header) = std::str::from_utf8(&data[..split]) else {
        return;
    };
    let payload = data.get(split + 1..).unwrap_or(&[]);
    let dims = parse_volume_header(header);
    if let Ok(vol) = decode_volume(header, payload) {
        let dims = dims.expect("decoded volume has a valid header");
        assert_eq!(vol.data.len(), dims.iter().product::<usize>());
    }
});
