#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = evdet::checkpoint::decode_checkpoint(data) {
        let again = evdet::checkpoint::decode_checkpoint(&ck.encode()).unwrap();
        assert_eq!(again.encode(), ck.encode());
    }
});
