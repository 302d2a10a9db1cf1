//! Multi-image grounding with verifiable rewards.
//!
//! * [`grammar`]: the think/answer trajectory format with `[N-M]` object mentions.
//! * [`reward`]: format, image and object rewards and their sum.
//! * [`grpo`]: group-normalized advantages, the KL-penalized objective and its gradient.
//! * [`env`]: a seeded synthetic multi-image world, a two-head softmax policy and the training loop.
//! * [`eval`]: Acc@0.5 over JSONL prediction files.
//! * [`pipeline`]: the three-stage trajectory construction pipeline over annotator clients.

pub mod config;
pub mod env;
pub mod eval;
pub mod grammar;
pub mod grpo;
pub mod matching;
pub mod pipeline;
pub mod reward;
pub mod types;

pub use grammar::{check_format, extract_groundings, parse_trajectory, serialize_trajectory, Trajectory};
pub use reward::{iou, score_response, GroundTruth, RewardBreakdown};
pub use types::{BoundingBox, GroundedObject, PositionId};
