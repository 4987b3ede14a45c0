#![no_main]

use libfuzzer_sys::fuzz_target;
use planenav::geometry::Plane;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(p) = text.parse::<Plane>() {
        let a = p.coefficients();
        let l1: f64 = a.iter().map(|x| x.abs()).sum();
        assert!((l1 - 1.0).abs() < 1e-9);
        assert!(a.iter().all(|x| x.is_finite()));
    }
});
