#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = evdet::quant::parse_manifest(text) {
            // Blobs are absent, so loading must fail cleanly rather than panic.
            let _ = m.into_model(|name| Err(evdet::Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, name.to_string()))));
        }
    }
});
