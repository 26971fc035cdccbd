#![no_main]

use episdf::diff::checkpoint::{decode, encode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = decode(data) {
        assert_eq!(decode(&encode(&records)).unwrap().len(), records.len());
    }
});
