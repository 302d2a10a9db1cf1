#![no_main]

//! Feeds arbitrary annotator text to stage 2 as the mapping response.

use libfuzzer_sys::fuzz_target;
use mirg_core::pipeline::{stage2_map_objects, AnnotatorClient, AnnotatorRequest, ClientError, CotSample, ImageRef, PipelineConfig, RawSample};
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
    let gold = |n, desc: &str| {
        GroundedObject::new(PositionId::new(n, 1).unwrap(), desc, BoundingBox::new(1.0, 1.0, 9.0, 9.0).unwrap()).unwrap()
    };
    let image = |id: &str| ImageRef {
        id: id.into(),
        width: 64.0,
        height: 48.0,
    };
    let cot = CotSample {
        raw: RawSample {
            sample_id: "fuzz".into(),
            image_refs: vec![image("a.jpg"), image("b.jpg")],
            query: "Match the mug across views.".into(),
            gold_objects: vec![gold(1, "mug"), gold(2, "mug again")],
        },
        cot_text: "<think>Image-1 has [[mug]] and Image-2 has [[mug again]].</think><answer>[[mug]], [[mug again]]</answer>".into(),
    };
    let config = PipelineConfig {
        max_retries: 0,
        ..PipelineConfig::default()
    };
    if let Ok(mapped) = stage2_map_objects(&cot, &Canned(text.to_string()), &config) {
        assert_eq!(mapped.mappings.len(), 2);
        for m in &mapped.mappings {
            let img = &cot.raw.image_refs[m.image_index as usize - 1];
            assert!(m.bbox.within(img.width, img.height) && m.bbox.area() > 0.0);
        }
    }
});
