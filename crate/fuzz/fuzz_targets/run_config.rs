#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = evdet::config::parse_config(text) {
            let _ = cfg.model_spec();
        }
    }
});
