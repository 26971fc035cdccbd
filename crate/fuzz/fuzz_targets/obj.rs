#![no_main]

use episdf::formats::parse_obj;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok((v, f)) = parse_obj(text, "mesh.obj") {
            assert!(f.iter().flatten().all(|&i| i < v.len()));
        }
    }
});
