#![no_main]
use libfuzzer_sys::fuzz_target;
use pat_lab::config::parse_config;

fuzz_target!(|data: &[u8]| {
    if let Ok(cfg) = parse_config(data) {
        // anything accepted must survive its own serialization
        let text = serde_json::to_vec(&cfg).unwrap();
        assert_eq!(parse_config(&text).unwrap(), cfg);
    }
});
