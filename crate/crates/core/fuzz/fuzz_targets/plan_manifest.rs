#![no_main]

use libfuzzer_sys::fuzz_target;
use mergesearch::dis_space::{export_plan, import_plan};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(plan) = import_plan(text) {
        let out = export_plan(&plan).expect("imported plan exports");
        assert_eq!(import_plan(&out).expect("exported plan imports"), plan);
    }
});
