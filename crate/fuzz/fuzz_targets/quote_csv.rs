#![no_main]
use libfuzzer_sys::fuzz_target;
use matsde::fxmarket::RateSeries;

fuzz_target!(|data: &str| {
    if let Ok(series) = RateSeries::from_csv_str(data) {
        let csv = series.to_csv();
        let back = RateSeries::from_csv_str(&csv).expect("own output parses");
        assert_eq!(back, series);
        assert_eq!(back.to_csv(), csv);
    }
});
