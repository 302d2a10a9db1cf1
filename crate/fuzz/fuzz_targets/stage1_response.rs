#![no_main]

//! Feeds arbitrary annotator text to stage 1, in strict and lenient envelope modes.

use libfuzzer_sys::fuzz_target;
use mirg_core::grammar::parse_trajectory;
use mirg_core::pipeline::stages::free_mentions;
use mirg_core::pipeline::{stage1_generate_cot, AnnotatorClient, AnnotatorRequest, ClientError, ImageRef, PipelineConfig, RawSample};
use mirg_core::types::{BoundingBox, GroundedObject, PositionId};

struct Canned(String);

impl AnnotatorClient for Canned {
    fn complete(&self, _: &AnnotatorRequest) -> Result<String, ClientError> {
        Ok(self.0.clone())
    }
}

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let _ = free_mentions(text);
    let raw = RawSample {
        sample_id: "fuzz".into(),
        image_refs: vec![ImageRef {
            id: "a.jpg".into(),
            width: 100.0,
            height: 100.0,
        }],
        query: "Find the cup.".into(),
        gold_objects: vec![GroundedObject::new(
            PositionId::new(1, 1).unwrap(),
            "cup",
            BoundingBox::new(10.0, 10.0, 20.0, 20.0).unwrap(),
        )
        .unwrap()],
    };
    for strict_envelope in [true, false] {
        let config = PipelineConfig {
            strict_envelope,
            max_retries: 0,
            ..PipelineConfig::default()
        };
        if let Ok(cot) = stage1_generate_cot(&raw, &Canned(text.to_string()), &config) {
            assert!(parse_trajectory(&cot.cot_text).is_ok());
        }
    }
});
