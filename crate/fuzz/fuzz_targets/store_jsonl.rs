#![no_main]

use factcheck_core::embedding::EmbeddingStore;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(store) = EmbeddingStore::read_jsonl(data) {
        for (_, v) in store.iter() {
            assert_eq!(v.dim(), store.dim());
        }
    }
});
