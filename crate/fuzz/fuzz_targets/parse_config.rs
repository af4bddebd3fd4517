#![no_main]

use libfuzzer_sys::fuzz_target;
use mcr_stitch::config::parse_config;
use std::path::Path;

fuzz_target!(|text: &str| {
    let _ = parse_config(text, Path::new("/fuzz"));
});
