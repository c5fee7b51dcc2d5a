#![no_main]

use factcheck_core::retrieval::{segment, Granularity};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    for g in [Granularity::Sentence, Granularity::Paragraph] {
        if let Ok(passages) = segment(text, g) {
            for (i, p) in passages.iter().enumerate() {
                assert_eq!(p.index, i);
                assert!(!p.text.trim().is_empty());
            }
        }
    }
});
