#![no_main]
use hybridmp::lq::LqSpec;
use hybridmp::model::ProblemSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(lq) = LqSpec::from_json(text) {
        let again = LqSpec::from_json(&lq.to_json().unwrap()).expect("serialised spec must parse");
        assert_eq!(lq, again);
    }
    if let Ok(spec) = ProblemSpec::from_json(text) {
        let out = spec.to_json().unwrap();
        assert_eq!(ProblemSpec::from_json(&out).unwrap().to_json().unwrap(), out);
    }
});
