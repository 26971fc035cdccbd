#![no_main]

use episdf::trainer::TrainConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = TrainConfig::parse(text, "config.txt") {
            assert_eq!(TrainConfig::parse(&cfg.to_text(), "config.txt").unwrap(), cfg);
        }
    }
});
