#![no_main]
use libfuzzer_sys::fuzz_target;
use melflow::model::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        let bytes = ck.encode().expect("decoded checkpoint re-encodes");
        let again = Checkpoint::decode(&bytes).expect("re-encoded checkpoint decodes");
        // Tensors are stored as f32, so they survive the round trip exactly.
        let (a, b) = (ck.params.entries(), again.params.entries());
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert_eq!((&x.name, x.trainable, &x.value), (&y.name, y.trainable, &y.value));
        }
        let _ = ck.into_model();
    }
});
