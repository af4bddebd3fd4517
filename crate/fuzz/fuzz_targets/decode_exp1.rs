#![no_main]

use libfuzzer_sys::fuzz_target;
use mcr_stitch::projector::{decode_exp1, decode_exp1_descriptor};

fuzz_target!(|data: &[u8]| {
    let desc = decode_exp1_descriptor(data);
    if let Ok(pp) = decode_exp1(data) {
        assert_eq!(desc.unwrap(), pp.descriptor);
    }
});
