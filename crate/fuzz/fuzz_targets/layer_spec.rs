#![no_main]

use evdet::layer_spec::LayerSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(spec) = text.parse::<LayerSpec>() {
            assert_eq!(spec.to_string().parse::<LayerSpec>().unwrap(), spec);
        }
    }
});
