#![no_main]
use geolandmark::ghmp::{read_ghmp, write_ghmp};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(stack) = read_ghmp(data) {
        let bytes = write_ghmp(&stack);
        // the container has one encoding per stack
        assert_eq!(bytes, data);
        assert_eq!(read_ghmp(&bytes).unwrap(), stack);
    }
});
