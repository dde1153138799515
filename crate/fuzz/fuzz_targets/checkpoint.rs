#![no_main]

use libfuzzer_sys::fuzz_target;
use vapf::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::from_bytes(data) {
        // anything accepted must re-encode to a stable form
        let bytes = ckpt.to_bytes();
        let again = Checkpoint::from_bytes(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(again.to_bytes(), bytes);
    }
});
