#![no_main]
use libfuzzer_sys::fuzz_target;
use melflow::dsp::wav;

fuzz_target!(|data: &[u8]| {
    if let Ok(w) = wav::decode(data) {
        // Decoded samples are exact 16-bit values, so re-encoding is lossless.
        let again = wav::decode(&wav::encode(&w)).expect("re-encoded WAV must decode");
        assert_eq!(w.samples(), again.samples());
    }
});
