#![no_main]

use libfuzzer_sys::fuzz_target;
use mirg_core::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(config) = RunConfig::from_toml(text) {
        assert_eq!(RunConfig::from_toml(&config.to_toml()).expect("written config reloads"), config);
    }
});
