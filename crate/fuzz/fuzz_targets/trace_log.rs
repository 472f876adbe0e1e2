#![no_main]

use libfuzzer_sys::fuzz_target;
use modsel::env::parse_trace_log;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_trace_log(text);
    }
});
