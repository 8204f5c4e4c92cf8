#![no_main]

use bccseg_core::data::{decode_rgb, encode_rgb};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(image) = decode_rgb(data) {
        assert_eq!(image.data.len(), image.width * image.height * 3);
        assert_eq!(decode_rgb(&encode_rgb(&image)).expect("round trip"), image);
    }
});
