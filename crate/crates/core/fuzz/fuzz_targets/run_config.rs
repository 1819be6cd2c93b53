#![no_main]

use libfuzzer_sys::fuzz_target;
use mergesearch::run_config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(config) = RunConfig::from_json(text) {
        if config.violations().is_empty() {
            let _ = config.schedule();
            let _ = config.search_options();
        }
    }
});
