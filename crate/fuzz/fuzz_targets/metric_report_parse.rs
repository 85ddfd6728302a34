#![no_main]
use libfuzzer_sys::fuzz_target;
use melflow::metrics::MetricReport;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(r) = MetricReport::from_jsonl(text) {
        let _ = r.summary_table();
        if let Ok(jsonl) = r.to_jsonl() {
            let _ = MetricReport::from_jsonl(&jsonl).expect("serialised report parses");
        }
    }
});
