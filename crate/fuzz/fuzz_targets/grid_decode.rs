#![no_main]

use gridntk::encoding::GridStack;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(g) = GridStack::from_bytes(data) {
        assert_eq!(g.to_bytes(), data);
        assert!(g.is_finite());
    }
});
