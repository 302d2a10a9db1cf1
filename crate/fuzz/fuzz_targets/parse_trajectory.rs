#![no_main]

use libfuzzer_sys::fuzz_target;
use mirg_core::grammar::{check_format, extract_groundings, parse_trajectory, serialize_trajectory};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let parsed = parse_trajectory(text);
    assert_eq!(parsed.is_ok(), check_format(text));
    if let Ok(t) = parsed {
        t.validate().expect("parsed trajectories satisfy the id rules");
        let canonical = serialize_trajectory(&t).expect("parsed trajectories serialize");
        assert_eq!(parse_trajectory(&canonical).expect("canonical text parses"), t);
        let _ = extract_groundings(&t);
    }
});
