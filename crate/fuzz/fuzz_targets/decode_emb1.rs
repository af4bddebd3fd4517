#![no_main]

use libfuzzer_sys::fuzz_target;
use mcr_stitch::store::{decode_emb1, encode_emb1};

fuzz_target!(|data: &[u8]| {
    // anything that decodes must re-encode to the same bytes
    if let Ok(m) = decode_emb1(data) {
        assert_eq!(encode_emb1(&m).unwrap(), data);
    }
});
