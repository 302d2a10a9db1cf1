#![no_main]

//! Input: a GroundTruth JSON line, then the response text.

use libfuzzer_sys::fuzz_target;
use mirg_core::eval::is_correct;
use mirg_core::reward::{score_response, GroundTruth};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Some((head, response)) = text.split_once('\n') else {
        return;
    };
    let Ok(gt) = serde_json::from_str::<GroundTruth>(head) else {
        return;
    };
    let r = score_response(response, &gt);
    assert!(r.r_fmt == 0.0 || r.r_fmt == 1.0);
    assert!((0.0..=1.0).contains(&r.r_img) && (0.0..=1.0).contains(&r.r_obj));
    assert!(r.r_obj <= r.r_img + 1e-12);
    if r.r_fmt == 0.0 {
        assert_eq!(r.total, 0.0);
    }
    if is_correct(response, &gt) {
        assert!(r.r_obj > 0.5 - 1e-12);
    }
});
