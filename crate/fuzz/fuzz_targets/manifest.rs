#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = depstream::corpus::Manifest::read(data) {
        let mut out = Vec::new();
        m.write(&mut out).expect("a parsed manifest writes back");
    }
});
