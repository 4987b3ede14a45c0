#![no_main]

use libfuzzer_sys::fuzz_target;
use planenav::image::Image2D;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = Image2D::from_pgm(data) {
        assert_eq!(img.data.len(), img.width * img.height);
        assert_eq!(Image2D::from_pgm(&img.to_pgm()).expect("round trip"), img);
    }
});
