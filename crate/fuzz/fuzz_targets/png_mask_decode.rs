#![no_main]

use bccseg_core::data::{decode_gray, decode_mask, encode_mask};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = decode_gray(data);
    if let Ok(mask) = decode_mask(data) {
        assert_eq!(decode_mask(&encode_mask(&mask)).expect("round trip"), mask);
    }
});
