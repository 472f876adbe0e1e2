#![no_main]

use libfuzzer_sys::fuzz_target;
use modsel::volume::{Dims, MultiModalVolume, SoftMask};

// First three bytes pick small dims and the channel count; the rest is payload.
fuzz_target!(|data: &[u8]| {
    if data.len() < 4 {
        return;
    }
    let side = |b: u8| usize::from(b % 8) + 1;
    let Ok(dims) = Dims::new(side(data[0]), side(data[1]), side(data[2])) else {
        return;
    };
    let channels = usize::from(data[3] % 3) + 1;
    let payload = &data[4..];
    if let Ok(v) = MultiModalVolume::from_le_bytes(dims, channels, payload) {
        assert_eq!(v.to_le_bytes(), payload);
    }
    if let Ok(m) = SoftMask::from_le_bytes(dims, payload) {
        assert!(m.data().iter().all(|p| (0.0..=1.0).contains(p)));
    }
});
