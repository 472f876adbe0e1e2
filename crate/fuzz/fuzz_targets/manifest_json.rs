#![no_main]

use libfuzzer_sys::fuzz_target;
use modsel::phantom::DatasetManifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = DatasetManifest::from_json(data) {
        // accepted manifests survive a round trip
        let again = DatasetManifest::from_json(m.to_json().as_bytes()).expect("re-parse");
        assert_eq!(again, m);
    }
});
