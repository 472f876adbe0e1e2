#![no_main]

use libfuzzer_sys::fuzz_target;
use modsel::segmenter::SegParams;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(p) = SegParams::from_checkpoint(text) {
        assert_eq!(SegParams::from_checkpoint(&p.to_checkpoint()).expect("re-parse"), p);
    }
});
