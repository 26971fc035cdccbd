#![no_main]

use episdf::formats::{encode_ppm, parse_ppm};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((w, h, px)) = parse_ppm(data, "fuzz.ppm") {
        assert_eq!(px.len(), w * h * 3);
        assert_eq!(parse_ppm(&encode_ppm(w, h, &px), "fuzz.ppm").unwrap(), (w, h, px));
    }
});
