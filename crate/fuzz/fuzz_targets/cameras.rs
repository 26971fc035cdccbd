#![no_main]

use episdf::geometry::parse_cameras;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_cameras(text, "cameras.txt");
    }
});
