#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(loaded) = evdet::event_io::parse_evs(data) {
        let mut again = Vec::new();
        evdet::event_io::write_evs(&loaded.stream, &mut again).unwrap();
        let back = evdet::event_io::parse_evs(&again).unwrap();
        assert_eq!(back.stream.events, loaded.stream.events);
    }
});
