#![no_main]

use episdf::formats::parse_pfm;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((w, h, v)) = parse_pfm(data, "fuzz.pfm") {
        assert_eq!(v.len(), w * h);
    }
});
