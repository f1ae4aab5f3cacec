#![no_main]
use hybridmp_cli::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ExperimentConfig::from_json(text) {
        let again = ExperimentConfig::from_json(&serde_json::to_string(&cfg).unwrap()).expect("round trip");
        assert_eq!(cfg, again);
    }
});
