#![no_main]

use libfuzzer_sys::fuzz_target;
use mcr_stitch::aggregation::decode_pqd1;

fuzz_target!(|data: &[u8]| {
    let _ = decode_pqd1(data);
});
