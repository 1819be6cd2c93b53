#![no_main]

use libfuzzer_sys::fuzz_target;
use mergesearch::evaluator::parse_eval_reply;

fuzz_target!(|data: (u8, &[u8])| {
    let (arity, bytes) = data;
    let Ok(line) = std::str::from_utf8(bytes) else { return };
    if let Ok(costs) = parse_eval_reply(line, arity as usize) {
        assert_eq!(costs.len(), arity as usize);
        assert!(costs.iter().all(|c| c.is_finite() && *c >= 0.0));
    }
});
