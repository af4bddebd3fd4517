#![no_main]

use libfuzzer_sys::fuzz_target;
use mcr_stitch::SpaceManifest;

fuzz_target!(|text: &str| {
    let _ = SpaceManifest::parse(text);
});
