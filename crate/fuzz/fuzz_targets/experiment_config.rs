#![no_main]

use factcheck_core::experiment::{apply_overrides, parse_experiment};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let (config, overrides) = text.split_once('\0').unwrap_or((text, ""));
    if let Ok(cfg) = parse_experiment(config) {
        let _ = cfg.validate();
        let _ = parse_experiment(&cfg.to_toml()).unwrap();
        let lines: Vec<String> = overrides.lines().map(String::from).collect();
        let _ = apply_overrides(&cfg, &lines);
    }
});
