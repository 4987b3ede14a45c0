#![no_main]

use libfuzzer_sys::fuzz_target;
use planenav::trainer::TrainConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = TrainConfig::from_kv_str(text) {
        let _ = cfg.validate();
        let echoed = TrainConfig::from_kv_str(&cfg.to_kv_string()).expect("echo parses");
        assert_eq!(echoed.to_kv_string(), cfg.to_kv_string());
    }
});
