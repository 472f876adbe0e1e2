#![no_main]

use libfuzzer_sys::fuzz_target;
use modsel::session::ApplyRequest;

fuzz_target!(|data: &[u8]| {
    let _ = ApplyRequest::from_json(data);
});
