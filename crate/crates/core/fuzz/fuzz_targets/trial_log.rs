#![no_main]

use libfuzzer_sys::fuzz_target;
use mergesearch::mf_optimizer::{budget_report, incumbent_trajectory, read_trial_log, trial_log_line};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = read_trial_log(text) {
        let _ = budget_report(&records);
        let _ = incumbent_trajectory(&records, None);
        let lines = records.iter().map(|r| trial_log_line(r).unwrap()).collect::<Vec<_>>().join("\n");
        assert_eq!(read_trial_log(&lines).unwrap(), records);
    }
});
