#![no_main]

use bccseg_core::data::{parse_manifest, write_manifest};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rows) = parse_manifest(text) {
        let again = parse_manifest(&write_manifest(&rows)).expect("rewritten manifest parses");
        assert_eq!(again, rows);
    }
});
