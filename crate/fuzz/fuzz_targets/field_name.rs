#![no_main]
use libfuzzer_sys::fuzz_target;
use matsde::calculus::FieldName;

fuzz_target!(|data: &str| {
    if let Ok(name) = data.parse::<FieldName>() {
        let back: FieldName = name.to_string().parse().expect("display parses");
        assert_eq!(back, name);
    }
});
