#![no_main]
use libfuzzer_sys::fuzz_target;
use matsde::SquareMatrix;

fuzz_target!(|data: &str| {
    if let Ok(m) = SquareMatrix::parse_csv(data) {
        let back = SquareMatrix::parse_csv(&m.to_csv()).expect("own output parses");
        assert_eq!(back, m);
    }
});
