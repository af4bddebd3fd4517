#![no_main]

use libfuzzer_sys::fuzz_target;
use mcr_stitch::config::parse_index_list;

fuzz_target!(|text: &str| {
    let _ = parse_index_list(text);
});
