#![no_main]

use hsbnet::io::Manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = Manifest::parse(text) {
        let printed = m.to_string();
        let back = Manifest::parse(&printed).expect("re-parse of printed manifest");
        assert_eq!(back, m);
        assert_eq!(back.to_string(), printed);
    }
});
