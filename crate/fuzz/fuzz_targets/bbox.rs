#![no_main]

use episdf::formats::{format_bbox, parse_bbox};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(b) = parse_bbox(text, "bbox.txt") {
            assert_eq!(parse_bbox(&format_bbox(&b), "bbox.txt").unwrap(), b);
        }
    }
});
