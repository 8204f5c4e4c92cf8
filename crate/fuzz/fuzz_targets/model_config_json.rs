#![no_main]

use bccseg_core::model::ModelConfig;
use bccseg_core::opcount::count_ops;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(config) = ModelConfig::from_json(text) {
        // Validated configs have bounded size, so counting is cheap.
        let _ = count_ops(&config, 64, 64);
        let _ = config.parameter_count();
    }
});
