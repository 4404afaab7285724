#![no_main]
use jumptraj::config::parse_config;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = parse_config(text) {
        let again = parse_config(&cfg.to_toml_string()).expect("serialized config parses");
        assert_eq!(cfg, again);
    }
});
