#![no_main]
use libfuzzer_sys::fuzz_target;
use melflow::dsp::container;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = container::decode(data) {
        let bytes = container::encode(&m);
        assert_eq!(bytes.as_slice(), data);
    }
});
