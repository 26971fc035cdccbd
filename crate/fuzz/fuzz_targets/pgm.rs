#![no_main]

use episdf::formats::{encode_pgm, parse_pgm};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((w, h, px)) = parse_pgm(data, "fuzz.pgm") {
        assert_eq!(px.len(), w * h);
        assert_eq!(parse_pgm(&encode_pgm(w, h, &px), "fuzz.pgm").unwrap(), (w, h, px));
    }
});
