#![no_main]
use libfuzzer_sys::fuzz_target;
use matsde::fxmarket::FxModelSpec;

fuzz_target!(|data: &str| {
    if let Ok(spec) = FxModelSpec::from_json(data) {
        let back = FxModelSpec::from_json(&spec.to_json()).expect("own output parses");
        assert_eq!(back, spec);
    }
});
