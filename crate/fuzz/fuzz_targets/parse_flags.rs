#![no_main]

use libfuzzer_sys::fuzz_target;
use mcr_stitch::aggregation::Centricity;
use mcr_stitch::config::SetRef;
use mcr_stitch::training::{InterTerm, LossMask};

fuzz_target!(|text: &str| {
    let _ = text.parse::<LossMask>();
    let _ = text.parse::<InterTerm>();
    let _ = text.parse::<Centricity>();
    let _ = text.parse::<SetRef>();
});
