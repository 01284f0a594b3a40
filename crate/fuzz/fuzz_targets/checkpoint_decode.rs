#![no_main]
use ernf::checkpoint::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::decode(data) {
        // Decoded values are already f32-exact, so a re-encode is lossless.
        let again = Checkpoint::decode(&ckpt.encode()).expect("re-encoded checkpoint decodes");
        assert_eq!(again, ckpt);
    }
});
