#![no_main]

use factcheck_core::corpus::{read_dataset, write_dataset, Format, Split};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = read_dataset(data, Format::Jsonl, Split::Train) {
        // Anything accepted must survive a round trip.
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf, Format::Jsonl).unwrap();
        let again = read_dataset(buf.as_slice(), Format::Jsonl, Split::Train).unwrap();
        assert_eq!(ds, again);
    }
});
