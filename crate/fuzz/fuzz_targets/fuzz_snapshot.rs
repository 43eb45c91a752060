//! Tensor snapshots are length-prefixed binary; the reader must reject
//! any malformed input without panicking or overallocating.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = liwt::tensor::read_snapshot::<f32>(data);
    let _ = liwt::tensor::read_snapshot::<f64>(data);
    let _ = liwt::tensor::read_snapshot_prefix::<f32>(data);
});
