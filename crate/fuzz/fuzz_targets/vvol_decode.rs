#![no_main]

use libfuzzer_sys::fuzz_target;
use planenav::volume::{decode_vvol, encode_vvol};

fuzz_target!(|data: &[u8]| {
    if let Ok(v) = decode_vvol(data) {
        let bytes = encode_vvol(&v);
        assert_eq!(bytes, data);
    }
});
