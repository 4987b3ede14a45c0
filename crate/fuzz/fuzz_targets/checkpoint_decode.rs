#![no_main]

use libfuzzer_sys::fuzz_target;
use planenav::qnet::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = decode_checkpoint(data) {
        assert!(p.is_finite());
        // Weights are stored as f32, so a decoded checkpoint re-encodes exactly.
        let again = decode_checkpoint(&encode_checkpoint(&p)).expect("re-encoded checkpoint decodes");
        assert_eq!(again.as_slice(), p.as_slice());
    }
});
