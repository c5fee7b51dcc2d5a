#![no_main]

use factcheck_core::nn::read_checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = read_checkpoint(data);
});
