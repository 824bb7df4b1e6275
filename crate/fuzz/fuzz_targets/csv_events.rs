#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(loaded) = evdet::event_io::parse_csv(text, 64, 48) {
            assert!(loaded.stream.is_time_ordered());
            assert!(loaded.stream.events.iter().all(|e| e.x < 64 && e.y < 48));
        }
    }
});
