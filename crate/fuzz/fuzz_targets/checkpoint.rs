#![no_main]

use libfuzzer_sys::fuzz_target;
use mfrt::checkpoint::{from_bytes, to_bytes};

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = from_bytes(data) {
        assert_eq!(from_bytes(&to_bytes(&model)).expect("round trip"), model);
    }
});
