#![no_main]
use hybridmp::pathsim::PathBundle;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(bundle) = PathBundle::read_csv(data) {
        let mut first = Vec::new();
        bundle.write_csv(&mut first).unwrap();
        let mut second = Vec::new();
        PathBundle::read_csv(first.as_slice()).expect("written bundle must parse").write_csv(&mut second).unwrap();
        assert_eq!(first, second);
    }
});
