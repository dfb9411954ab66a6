#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = mfrt::dataset::decode_image(data) {
        assert_eq!(img.shape()[0], 3);
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
});
