#![no_main]

use bccseg_core::train::{decode_checkpoint, decode_raw, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = decode_raw(data);
    if let Ok((model, state)) = decode_checkpoint(data) {
        // The config blob may be formatted differently, so compare canonical
        // encodings rather than the input bytes.
        let canonical = encode_checkpoint(&model, &state).expect("re-encode");
        let (model, state) = decode_checkpoint(&canonical).expect("canonical decodes");
        assert_eq!(encode_checkpoint(&model, &state).expect("re-encode"), canonical);
    }
});
