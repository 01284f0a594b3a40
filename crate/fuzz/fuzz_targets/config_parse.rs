#![no_main]
use ernf::config::TrainConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = TrainConfig::from_toml(text) {
        let again = TrainConfig::from_toml(&toml::to_string(&cfg).unwrap()).expect("config re-parses");
        assert_eq!(again, cfg);
    }
});
