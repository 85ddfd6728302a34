#![no_main]
use libfuzzer_sys::fuzz_target;
use melflow::tasks::Alignment;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(a) = Alignment::parse(text) {
        assert_eq!(Alignment::parse(&a.to_text()).unwrap(), a);
        assert_eq!(a.frame_symbols().len(), a.n_frames());
    }
});
