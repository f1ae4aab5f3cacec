#![no_main]
use hybridmp::adjoint::AdjointPath;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(path) = AdjointPath::read_csv(data) {
        let mut first = Vec::new();
        path.write_csv(&mut first).unwrap();
        let mut second = Vec::new();
        AdjointPath::read_csv(first.as_slice()).expect("written adjoint must parse").write_csv(&mut second).unwrap();
        assert_eq!(first, second);
    }
});
