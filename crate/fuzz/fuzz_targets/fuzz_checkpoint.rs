//! Checkpoints nest the config text and every tensor snapshot inside one
//! container; all lengths come from the wire and must be validated.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = liwt::checkpoint::Checkpoint::<f32>::from_bytes(data);
});
