#![no_main]

use gridntk::checkpoint::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Checkpoint::from_bytes(data) {
        // Re-encoding is a fixed point after one normalization pass.
        let once = c.to_bytes().expect("decoded checkpoints re-encode");
        let twice = Checkpoint::from_bytes(&once).expect("round trip").to_bytes().unwrap();
        assert_eq!(once, twice);
    }
});
