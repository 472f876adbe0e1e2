#![no_main]

use libfuzzer_sys::fuzz_target;
use modsel::policy::PolicyParams;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(p) = PolicyParams::from_checkpoint(text) {
        assert_eq!(PolicyParams::from_checkpoint(&p.to_checkpoint()).expect("re-parse"), p);
    }
});
