//! Turns a policy action into a trajectory string so rewards go through the real parser.

use super::policy::ActionRecord;
use super::scene::TaskSample;
use crate::grammar::{serialize_trajectory, Block, ObjectMention, Trajectory, ANSWER_CLOSE};
use crate::types::{GroundedObject, PositionId};

/// Test hooks that break an otherwise valid rendering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    DropAnswerClose,
}

pub fn render_response(action: &ActionRecord, task: &TaskSample) -> String {
    let position = PositionId::new(action.chosen_image, 1).expect("actions use 1-based images");
    let target = GroundedObject::new(position, task.query.target_description(), action.bbox).expect("templated descriptions are non-empty");
    let think = Block::new().text(&format!(
        "The query asks: {} Comparing the {} images, the target is in Image-{}, grid cell {}.",
        task.query.text,
        task.images.len(),
        action.chosen_image,
        action.chosen_cell
    ));
    let answer = Block::new().mention(ObjectMention::Full(target));
    serialize_trajectory(&Trajectory::new(think, answer)).expect("rendered trajectories satisfy the grammar")
}

pub fn render_response_corrupted(action: &ActionRecord, task: &TaskSample, corruption: Corruption) -> String {
    let text = render_response(action, task);
    match corruption {
        Corruption::DropAnswerClose => text.replacen(ANSWER_CLOSE, "", 1),
    }
}
