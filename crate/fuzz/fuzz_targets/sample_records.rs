#![no_main]

//! Decodes pipeline input and output lines.

use libfuzzer_sys::fuzz_target;
use mirg_core::pipeline::{FinalSample, RawSample};

fuzz_target!(|data: &[u8]| {
    if let Ok(raw) = serde_json::from_slice::<RawSample>(data) {
        let _ = raw.validate();
    }
    if let Ok(fin) = serde_json::from_slice::<FinalSample>(data) {
        let line = serde_json::to_string(&fin).expect("final samples serialize");
        assert_eq!(serde_json::from_str::<FinalSample>(&line).expect("written line reloads"), fin);
    }
});
