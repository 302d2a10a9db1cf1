#![no_main]

use libfuzzer_sys::fuzz_target;
use mirg_core::eval::{evaluate, read_samples};

fuzz_target!(|data: &[u8]| {
    let Ok(samples) = read_samples(data) else {
        return;
    };
    if let Ok(report) = evaluate(samples) {
        assert!((0.0..=1.0).contains(&report.average));
        assert!(report.total_correct <= report.total_samples);
    }
});
