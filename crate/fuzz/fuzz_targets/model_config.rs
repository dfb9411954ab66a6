#![no_main]

use libfuzzer_sys::fuzz_target;
use mfrt::ModelConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ModelConfig::from_toml(text) {
        let again = ModelConfig::from_toml(&cfg.to_toml()).expect("round trip");
        assert_eq!(again, cfg);
        let _ = mfrt::profile::count_params(&cfg);
        let _ = mfrt::profile::count_flops(&cfg, 64, 64);
    }
});
