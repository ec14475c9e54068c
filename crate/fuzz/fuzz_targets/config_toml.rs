#![no_main]
use libfuzzer_sys::fuzz_target;
use matsde_cli::ExperimentConfig;

fuzz_target!(|data: &str| {
    if let Ok(cfg) = ExperimentConfig::from_toml(data) {
        let _ = cfg.validate();
    }
});
