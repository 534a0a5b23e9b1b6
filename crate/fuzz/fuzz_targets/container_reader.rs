#![no_main]

use hsbnet::io::ArrayContainer;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = ArrayContainer::from_bytes(data) {
        // Anything accepted must serialize back to an equivalent container.
        let again = ArrayContainer::from_bytes(&c.to_bytes()).expect("re-read of written container");
        assert_eq!(again.len(), c.len());
        for ((n1, a), (n2, b)) in c.entries().iter().zip(again.entries()) {
            assert_eq!(n1, n2);
            assert!(a.bit_eq(b));
        }
    }
});
