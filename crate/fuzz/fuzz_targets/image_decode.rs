#![no_main]

use gridntk::image::RgbImage;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = RgbImage::decode(data) {
        assert_eq!(img.as_slice().len(), 3 * img.width() * img.height());
        assert!(img.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }
});
