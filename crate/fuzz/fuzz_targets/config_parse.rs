#![no_main]

use gridntk::config::{parse_overlay, resolve, ConfigOverlay};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(overlay) = parse_overlay(text) {
        // Resolution may reject the overlay but must not panic; refuse
        // grids large enough to exhaust memory during validation.
        if let Some(gridntk::encoding::EncodingSpec::Multigrid { slots, levels, .. }) = &overlay.encoding {
            if *slots > 8 || *levels > 4 {
                return;
            }
        }
        let _ = resolve(Some("desk-baseline"), Some(&overlay), &ConfigOverlay::default());
    }
});
