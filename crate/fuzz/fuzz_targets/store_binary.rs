#![no_main]

use factcheck_core::embedding::EmbeddingStore;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(store) = EmbeddingStore::read_binary(data) {
        let mut buf = Vec::new();
        store.write_binary(&mut buf).unwrap();
        assert_eq!(EmbeddingStore::read_binary(buf.as_slice()).unwrap(), store);
    }
});
