#![no_main]

use libfuzzer_sys::fuzz_target;
use mcr_stitch::synth::decode_gt1;

fuzz_target!(|data: &[u8]| {
    let _ = decode_gt1(data);
});
