#![no_main]
use ernf::ppm;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(fb) = ppm::decode(data) {
        assert_eq!(fb.rgb.len(), fb.width as usize * fb.height as usize);
        let once = ppm::decode(&ppm::encode(&fb)).expect("encoded frame decodes");
        let twice = ppm::decode(&ppm::encode(&once)).expect("encoded frame decodes");
        assert_eq!(once, twice);
    }
});
