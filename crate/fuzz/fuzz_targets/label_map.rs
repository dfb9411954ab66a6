#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((h, w, values)) = mfrt::dataset::decode_label_map(data) {
        assert_eq!(values.len(), h * w);
        if values.iter().all(|&v| v <= u16::MAX as u32) {
            let bytes = mfrt::dataset::encode_pgm16(h, w, &values).expect("encodes");
            assert_eq!(mfrt::dataset::decode_label_map(&bytes).expect("decodes"), (h, w, values));
        }
    }
});
