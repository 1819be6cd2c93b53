#![no_main]

use libfuzzer_sys::fuzz_target;
use mergesearch::tensor_store::WeightStore;

fuzz_target!(|data: &[u8]| {
    // Anything that parses must serialize back to a file that parses identically.
    if let Ok(store) = WeightStore::from_bytes("fuzz", data) {
        let bytes = store.to_bytes().expect("parsed store serializes");
        let again = WeightStore::from_bytes("fuzz", &bytes).expect("own output parses");
        assert_eq!(store, again);
        for t in store.tensors() {
            assert_eq!(t.to_f32().len(), t.numel());
        }
    }
});
