//! The three annotation stages, plus the templates the mock annotator answers with.
//!
//! Stage 1 produces a think/answer text in which objects are written as
//! free-form mentions `[[description]]`. Stage 2 maps every distinct mention
//! to an image index and box. Stage 3 rewrites the mentions into grounded
//! tokens: the first mention of an object becomes a full mention with id
//! `[N-M]`, where M counts objects of image N in order of first mention, and
//! every later mention becomes a back-reference.

use std::collections::{HashMap, HashSet};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::client::{compose_prompt, AnnotatorClient, AnnotatorRequest, ClientError};
use super::PipelineConfig;
use crate::grammar::{
    find_reserved, parse_trajectory, serialize_trajectory, Block, ObjectMention, Trajectory, ANSWER_OPEN, THINK_OPEN,
};
use crate::types::{BoundingBox, GroundedObject, PositionId};

pub const MENTION_OPEN: &str = "[[";
pub const MENTION_CLOSE: &str = "]]";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StageError {
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("annotator text has no think/answer envelope")]
    EnvelopeMissing,
    #[error("malformed chain of thought: {0}")]
    MalformedCot(String),
    #[error("chain of thought never mentions gold object {0:?}")]
    GoldNotMentioned(String),
    #[error("malformed annotator response: {0}")]
    MalformedResponse(String),
    #[error("mention {0:?} was not mapped")]
    UnresolvedMention(String),
    #[error("mention {description:?} mapped to image {image_index} of {image_count}")]
    OutOfRangeIndex {
        description: String,
        image_index: i64,
        image_count: usize,
    },
    #[error("box for {0:?} is empty after clamping to the image")]
    EmptyBox(String),
    #[error("reassembled trajectory rejected: {0}")]
    ValidationFailed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRef {
    pub id: String,
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSample {
    pub sample_id: String,
    pub image_refs: Vec<ImageRef>,
    pub query: String,
    pub gold_objects: Vec<GroundedObject>,
}

fn has_markup(text: &str) -> bool {
    text.contains(MENTION_OPEN) || text.contains(MENTION_CLOSE)
}

impl RawSample {
    /// Gold descriptions must be distinct since stage 2 maps mentions by text.
    pub fn validate(&self) -> Result<(), StageError> {
        let invalid = |msg: String| Err(StageError::InvalidSample(msg));
        if self.sample_id.trim().is_empty() {
            return invalid("empty sample_id".into());
        }
        if self.image_refs.is_empty() {
            return invalid("no images".into());
        }
        for image in &self.image_refs {
            let ok = |v: f64| v.is_finite() && v > 0.0;
            if image.id.is_empty() || !ok(image.width) || !ok(image.height) {
                return invalid(format!("bad image reference {:?}", image.id));
            }
        }
        if self.query.trim().is_empty() || has_markup(&self.query) || find_reserved(&self.query).is_some() {
            return invalid("query is empty or contains reserved markup".into());
        }
        if self.gold_objects.is_empty() {
            return invalid("no gold objects".into());
        }
        let mut positions = HashSet::new();
        let mut descriptions = HashSet::new();
        for obj in &self.gold_objects {
            if obj.position.image_index() as usize > self.image_refs.len() {
                return invalid(format!("gold object {} is past the last image", obj.position));
            }
            if !positions.insert(obj.position) {
                return invalid(format!("gold object {} appears twice", obj.position));
            }
            let desc = obj.description.trim();
            if desc != obj.description || has_markup(desc) || find_reserved(desc).is_some() {
                return invalid(format!("gold description {:?} is not clean text", obj.description));
            }
            if !descriptions.insert(desc) {
                return invalid(format!("gold description {desc:?} is not unique"));
            }
        }
        Ok(())
    }

    fn attachments(&self) -> Vec<String> {
        self.image_refs.iter().map(|i| i.id.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CotSample {
    pub raw: RawSample,
    pub cot_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MentionMapping {
    pub description: String,
    pub image_index: u32,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

/// `mappings` follow the order in which the mentions first appear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MappedSample {
    pub cot: CotSample,
    pub mappings: Vec<MentionMapping>,
}

/// One line of the pipeline output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinalSample {
    pub sample_id: String,
    pub image_refs: Vec<ImageRef>,
    pub query: String,
    pub gold_objects: Vec<GroundedObject>,
    #[serde(with = "trajectory_text")]
    pub trajectory: Trajectory,
}

mod trajectory_text {
    use serde::{de, ser, Deserialize, Deserializer, Serializer};

    use crate::grammar::{parse_trajectory, serialize_trajectory, Trajectory};

    pub fn serialize<S: Serializer>(t: &Trajectory, serializer: S) -> Result<S::Ok, S::Error> {
        let text = serialize_trajectory(t).map_err(ser::Error::custom)?;
        serializer.serialize_str(&text)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<Trajectory, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse_trajectory(&text).map_err(de::Error::custom)
    }
}

/// Every free-form mention in `text`, in order and with repeats, trimmed.
pub fn free_mentions(text: &str) -> Result<Vec<&str>, String> {
    let mut found = Vec::new();
    let mut rest = text;
    let mut offset = 0;
    loop {
        let open = rest.find(MENTION_OPEN);
        if let Some(c) = rest.find(MENTION_CLOSE) {
            if open.is_none_or(|o| c < o) {
                return Err(format!("stray {MENTION_CLOSE} at byte {}", offset + c));
            }
        }
        let Some(o) = open else {
            return Ok(found);
        };
        let body_start = o + MENTION_OPEN.len();
        let Some(len) = rest[body_start..].find(MENTION_CLOSE) else {
            return Err(format!("unclosed mention at byte {}", offset + o));
        };
        let body = &rest[body_start..body_start + len];
        if body.contains(MENTION_OPEN) {
            return Err(format!("nested mention at byte {}", offset + o));
        }
        let body = body.trim();
        if body.is_empty() {
            return Err(format!("empty mention at byte {}", offset + o));
        }
        found.push(body);
        let consumed = body_start + len + MENTION_CLOSE.len();
        offset += consumed;
        rest = &rest[consumed..];
    }
}

fn distinct<'a>(mentions: impl IntoIterator<Item = &'a str>) -> Vec<&'a str> {
    let mut seen = HashSet::new();
    mentions.into_iter().filter(|m| seen.insert(*m)).collect()
}

fn cot_mentions(cot_text: &str) -> Result<Vec<String>, StageError> {
    let t = parse_trajectory(cot_text).map_err(|e| StageError::MalformedCot(e.to_string()))?;
    let think = t.think_text();
    let answer = t.answer_text();
    let mut all = free_mentions(&think).map_err(StageError::MalformedCot)?;
    all.extend(free_mentions(&answer).map_err(StageError::MalformedCot)?);
    Ok(distinct(all).into_iter().map(str::to_string).collect())
}

/// Ids for `mappings` taken in order: `[N-M]` with M counting within image N.
pub fn plan_bbox_ids(mappings: &[MentionMapping]) -> Vec<PositionId> {
    let mut per_image: HashMap<u32, u32> = HashMap::new();
    mappings
        .iter()
        .map(|m| {
            let next = per_image.entry(m.image_index).or_insert(0);
            *next += 1;
            PositionId::new(m.image_index, *next).expect("mapped image indices are positive")
        })
        .collect()
}

/// Rewrites the free-form mentions of `cot_text` into grounded tokens.
pub fn render_stage3(cot_text: &str, mappings: &[MentionMapping]) -> Result<String, StageError> {
    let cot = parse_trajectory(cot_text).map_err(|e| StageError::MalformedCot(e.to_string()))?;
    let ids = plan_bbox_ids(mappings);
    let index: HashMap<&str, usize> = mappings.iter().enumerate().map(|(i, m)| (m.description.as_str(), i)).collect();
    let mut introduced = HashSet::new();

    let mut convert = |text: &str| -> Result<Block, StageError> {
        let mut block = Block::new();
        let mut rest = text;
        while let Some(open) = rest.find(MENTION_OPEN) {
            block.push_text(&rest[..open]);
            let body_start = open + MENTION_OPEN.len();
            let len = rest[body_start..].find(MENTION_CLOSE).ok_or_else(|| StageError::MalformedCot("unclosed mention".into()))?;
            let desc = rest[body_start..body_start + len].trim();
            let &i = index.get(desc).ok_or_else(|| StageError::UnresolvedMention(desc.to_string()))?;
            let mention = if introduced.insert(i) {
                let m = &mappings[i];
                let obj = GroundedObject::new(ids[i], m.description.clone(), m.bbox)
                    .map_err(|e| StageError::ValidationFailed(e.to_string()))?;
                ObjectMention::Full(obj)
            } else {
                ObjectMention::BackReference(ids[i])
            };
            block.push_mention(mention);
            rest = &rest[body_start + len + MENTION_CLOSE.len()..];
        }
        block.push_text(rest);
        Ok(block)
    };
    let think = convert(&cot.think_text())?;
    let answer = convert(&cot.answer_text())?;
    serialize_trajectory(&Trajectory::new(think, answer)).map_err(|e| StageError::ValidationFailed(e.to_string()))
}

/// Checks a stage-3 text against the mapping it was built from.
pub fn validate_final(text: &str, raw: &RawSample, mappings: &[MentionMapping]) -> Result<Trajectory, StageError> {
    let fail = |msg: String| StageError::ValidationFailed(msg);
    let trajectory = parse_trajectory(text).map_err(|e| fail(e.to_string()))?;
    trajectory.validate().map_err(|e| fail(e.to_string()))?;
    if has_markup(&trajectory.think_text()) || has_markup(&trajectory.answer_text()) {
        return Err(fail("free-form mention left in the text".into()));
    }
    let fulls: Vec<&GroundedObject> = trajectory.full_mentions().collect();
    if fulls.len() != mappings.len() {
        return Err(fail(format!("{} full mentions for {} mapped objects", fulls.len(), mappings.len())));
    }
    for ((obj, mapping), id) in fulls.iter().zip(mappings).zip(plan_bbox_ids(mappings)) {
        if obj.description != mapping.description || obj.position != id || obj.bbox != mapping.bbox {
            return Err(fail(format!("full mention {} does not match mapped object {:?} at {id}", obj.position, mapping.description)));
        }
        let image = &raw.image_refs[id.image_index() as usize - 1];
        if !obj.bbox.within(image.width, image.height) {
            return Err(fail(format!("box of {id} leaves image {}", image.id)));
        }
    }
    Ok(trajectory)
}

/// Calls `client`, retrying transport errors with exponential backoff.
pub fn call_with_retry(client: &dyn AnnotatorClient, request: &AnnotatorRequest, config: &PipelineConfig) -> Result<String, ClientError> {
    let mut attempt = 0;
    loop {
        match client.complete(request) {
            Err(e) if e.is_retryable() && attempt < config.max_retries => {
                let delay = config.backoff_ms.saturating_mul(1u64 << attempt.min(16));
                if delay > 0 {
                    thread::sleep(Duration::from_millis(delay));
                }
                attempt += 1;
            }
            other => return other,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CotObject {
    description: String,
    image_index: u32,
}

#[derive(Serialize, Deserialize)]
struct CotPayload {
    stage: u8,
    sample_id: String,
    query: String,
    objects: Vec<CotObject>,
}

#[derive(Serialize, Deserialize)]
struct MappingPayload {
    stage: u8,
    sample_id: String,
    cot_text: String,
    mentions: Vec<String>,
    images: Vec<ImageRef>,
    gold: Vec<GroundedObject>,
}

#[derive(Serialize, Deserialize)]
struct PlannedObject {
    bbox_id: String,
    description: String,
    image_index: u32,
    #[serde(rename = "box")]
    bbox: BoundingBox,
}

#[derive(Serialize, Deserialize)]
struct ReassemblyPayload {
    stage: u8,
    sample_id: String,
    cot_text: String,
    objects: Vec<PlannedObject>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MappingEntry {
    description: String,
    image_index: i64,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MappingResponse {
    objects: Vec<MappingEntry>,
}

const COT_INSTRUCTION: &str = "Reason step by step about which objects in the attached images answer the query. \
Write the reasoning inside <think></think> and the final objects inside <answer></answer>. \
Write every object you refer to as [[description]], using the exact descriptions given for the target objects.";

const MAPPING_INSTRUCTION: &str = "For every [[description]] mention in the reasoning below, give the image it appears in \
(1-based) and its bounding box in pixels. Reply with JSON only: \
{\"objects\":[{\"description\":...,\"image_index\":...,\"box\":[x1,y1,x2,y2]}]}.";

const REASSEMBLY_INSTRUCTION: &str = "Rewrite the reasoning so that the first mention of each object is \
<bbox_id>[N-M]</bbox_id><|object_ref_start|>description<|object_ref_end|><|box_start|>(x1,y1),(x2,y2)<|box_end|> \
using the given ids and boxes, and every later mention is just <bbox_id>[N-M]</bbox_id>. Change nothing else.";

fn answer_only_cot(raw: &RawSample) -> String {
    let answer = raw.gold_objects.iter().map(|o| format!("[[{}]]", o.description)).collect::<Vec<_>>().join(", ");
    format!("<think>{}</think><answer>{answer}</answer>", raw.query.trim())
}

/// Wraps envelope-less text: all of it becomes the think block and its mentions the answer.
fn wrap_cot(text: &str) -> Result<String, StageError> {
    let mentions = free_mentions(text).map_err(StageError::MalformedCot)?;
    let answer = distinct(mentions).iter().map(|m| format!("[[{m}]]")).collect::<Vec<_>>().join(", ");
    Ok(format!("<think>{text}</think><answer>{answer}</answer>"))
}

pub fn stage1_generate_cot(raw: &RawSample, client: &dyn AnnotatorClient, config: &PipelineConfig) -> Result<CotSample, StageError> {
    raw.validate()?;
    let cot_text = if config.skip_cot {
        answer_only_cot(raw)
    } else {
        let payload = CotPayload {
            stage: 1,
            sample_id: raw.sample_id.clone(),
            query: raw.query.clone(),
            objects: raw
                .gold_objects
                .iter()
                .map(|o| CotObject {
                    description: o.description.clone(),
                    image_index: o.position.image_index(),
                })
                .collect(),
        };
        let request = AnnotatorRequest {
            prompt: compose_prompt(COT_INSTRUCTION, &serde_json::to_value(&payload).expect("payload serializes")),
            attachments: raw.attachments(),
            max_tokens: config.max_tokens,
        };
        let text = call_with_retry(client, &request, config)?.trim().to_string();
        let lacks_envelope = !text.contains(THINK_OPEN) && !text.contains(ANSWER_OPEN);
        if !lacks_envelope {
            text
        } else if config.strict_envelope || find_reserved(&text).is_some() {
            return Err(StageError::EnvelopeMissing);
        } else {
            wrap_cot(&text)?
        }
    };

    let trajectory = parse_trajectory(&cot_text).map_err(|e| StageError::MalformedCot(e.to_string()))?;
    if !trajectory.mentions().is_empty() {
        return Err(StageError::MalformedCot("already contains grounded mentions".into()));
    }
    let mentions = cot_mentions(&cot_text)?;
    for gold in &raw.gold_objects {
        if !mentions.contains(&gold.description) {
            return Err(StageError::GoldNotMentioned(gold.description.clone()));
        }
    }
    Ok(CotSample {
        raw: raw.clone(),
        cot_text,
    })
}

pub fn stage2_map_objects(cot: &CotSample, client: &dyn AnnotatorClient, config: &PipelineConfig) -> Result<MappedSample, StageError> {
    let raw = &cot.raw;
    let mentions = cot_mentions(&cot.cot_text)?;
    let payload = MappingPayload {
        stage: 2,
        sample_id: raw.sample_id.clone(),
        cot_text: cot.cot_text.clone(),
        mentions: mentions.clone(),
        images: raw.image_refs.clone(),
        gold: raw.gold_objects.clone(),
    };
    let request = AnnotatorRequest {
        prompt: compose_prompt(MAPPING_INSTRUCTION, &serde_json::to_value(&payload).expect("payload serializes")),
        attachments: raw.attachments(),
        max_tokens: config.max_tokens,
    };
    let text = call_with_retry(client, &request, config)?;
    let response: MappingResponse =
        serde_json::from_str(text.trim()).map_err(|e| StageError::MalformedResponse(e.to_string()))?;

    let mut by_description: HashMap<&str, &MappingEntry> = HashMap::new();
    for entry in &response.objects {
        if by_description.insert(entry.description.trim(), entry).is_some() {
            return Err(StageError::MalformedResponse(format!("{:?} mapped twice", entry.description)));
        }
    }
    let image_count = raw.image_refs.len();
    let mappings = mentions
        .into_iter()
        .map(|description| {
            let entry = by_description
                .get(description.as_str())
                .ok_or_else(|| StageError::UnresolvedMention(description.clone()))?;
            if entry.image_index < 1 || entry.image_index as usize > image_count {
                return Err(StageError::OutOfRangeIndex {
                    description,
                    image_index: entry.image_index,
                    image_count,
                });
            }
            let image = &raw.image_refs[entry.image_index as usize - 1];
            let bbox = BoundingBox::clamped(entry.bbox, image.width, image.height)
                .map_err(|e| StageError::MalformedResponse(format!("box for {description:?}: {e}")))?;
            if bbox.area() <= 0.0 {
                return Err(StageError::EmptyBox(description));
            }
            Ok(MentionMapping {
                description,
                image_index: entry.image_index as u32,
                bbox,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MappedSample {
        cot: cot.clone(),
        mappings,
    })
}

pub fn stage3_reassemble(mapped: &MappedSample, client: &dyn AnnotatorClient, config: &PipelineConfig) -> Result<FinalSample, StageError> {
    let raw = &mapped.cot.raw;
    let ids = plan_bbox_ids(&mapped.mappings);
    let payload = ReassemblyPayload {
        stage: 3,
        sample_id: raw.sample_id.clone(),
        cot_text: mapped.cot.cot_text.clone(),
        objects: mapped
            .mappings
            .iter()
            .zip(&ids)
            .map(|(m, id)| PlannedObject {
                bbox_id: id.to_string(),
                description: m.description.clone(),
                image_index: m.image_index,
                bbox: m.bbox,
            })
            .collect(),
    };
    let request = AnnotatorRequest {
        prompt: compose_prompt(REASSEMBLY_INSTRUCTION, &serde_json::to_value(&payload).expect("payload serializes")),
        attachments: raw.attachments(),
        max_tokens: config.max_tokens,
    };
    let text = call_with_retry(client, &request, config)?;
    let trajectory = validate_final(text.trim(), raw, &mapped.mappings)?;
    Ok(FinalSample {
        sample_id: raw.sample_id.clone(),
        image_refs: raw.image_refs.clone(),
        query: raw.query.clone(),
        gold_objects: raw.gold_objects.clone(),
        trajectory,
    })
}

fn decode<T: for<'de> Deserialize<'de>>(payload: &serde_json::Value) -> Result<T, ClientError> {
    T::deserialize(payload).map_err(|e| ClientError::Protocol(format!("unexpected payload: {e}")))
}

pub(super) fn mock_cot(payload: &serde_json::Value) -> Result<String, ClientError> {
    let p: CotPayload = decode(payload)?;
    let mut think = format!("The query asks: {}\n", p.query.trim());
    for (i, obj) in p.objects.iter().enumerate() {
        think += &format!("Step {}: Image-{} shows [[{}]], which fits the query.\n", i + 1, obj.image_index, obj.description);
    }
    think += "No other object fits.";
    let answer = p.objects.iter().map(|o| format!("[[{}]]", o.description)).collect::<Vec<_>>().join(", ");
    Ok(format!("<think>{think}</think><answer>{answer}</answer>"))
}

/// Answers from the gold objects; mentions with no gold counterpart are left out.
pub(super) fn mock_mapping(payload: &serde_json::Value) -> Result<String, ClientError> {
    let p: MappingPayload = decode(payload)?;
    let objects = p
        .mentions
        .iter()
        .filter_map(|m| p.gold.iter().find(|g| g.description == *m))
        .map(|g| MappingEntry {
            description: g.description.clone(),
            image_index: i64::from(g.position.image_index()),
            bbox: g.bbox.to_array(),
        })
        .collect();
    Ok(serde_json::to_string(&MappingResponse { objects }).expect("response serializes"))
}

pub(super) fn mock_reassembly(payload: &serde_json::Value) -> Result<String, ClientError> {
    let p: ReassemblyPayload = decode(payload)?;
    let mappings: Vec<MentionMapping> = p
        .objects
        .into_iter()
        .map(|o| MentionMapping {
            description: o.description,
            image_index: o.image_index,
            bbox: o.bbox,
        })
        .collect();
    render_stage3(&p.cot_text, &mappings).map_err(|e| ClientError::Protocol(e.to_string()))
}
