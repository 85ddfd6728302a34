#![no_main]
use libfuzzer_sys::fuzz_target;
use melflow::harness::ExperimentRecord;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(r) = ExperimentRecord::from_json(text) {
        let _ = melflow::harness::report::summary_table(std::slice::from_ref(&r));
    }
});
