#![no_main]

use libfuzzer_sys::fuzz_target;
use mergesearch::dis_space::{build_dis_plan, DisConfig};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(config) = DisConfig::from_json(text) else { return };
    if !config.violations().is_empty() {
        return;
    }
    // keep realized plans small enough for the fuzzer's time budget
    if config.slot_count() * config.blocks.len() > 4096 {
        return;
    }
    if let Ok(plan) = build_dis_plan(&config, None) {
        assert_eq!(plan.infeasible, !config.is_feasible());
        assert_eq!(plan.len(), config.realized_depth());
    }
});
