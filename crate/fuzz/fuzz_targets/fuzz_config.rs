//! The config parser consumes arbitrary user text and must only ever
//! fail with a structured error.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = liwt::config::Config::parse(text);
    }
});
