#![no_main]
use hybridmp::wonham::FilterPath;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(path) = FilterPath::read_csv(data) {
        let mut first = Vec::new();
        path.write_csv(&mut first).unwrap();
        let mut second = Vec::new();
        FilterPath::read_csv(first.as_slice()).expect("written filter must parse").write_csv(&mut second).unwrap();
        assert_eq!(first, second);
    }
});
