#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(pgm) = deepssm::io::read_pgm(data) {
        let _ = pgm.to_image();
        let _ = pgm.to_mask(1.0);
    }
});
