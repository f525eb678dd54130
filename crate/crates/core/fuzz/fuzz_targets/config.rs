#![no_main]
use darcy_core::harness::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(config) = ExperimentConfig::parse(text, None) {
        // the echo of a valid config is itself a valid config
        let echo: String = config.echo().iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        assert_eq!(ExperimentConfig::parse(&echo, None).expect("echo parses"), config);
    }
});
