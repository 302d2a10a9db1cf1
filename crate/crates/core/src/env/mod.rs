//! Seeded synthetic multi-image grounding world and the toy policy trained on it.

pub mod policy;
pub mod render;
pub mod scene;
pub mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use policy::{policy_greedy, policy_logprob, policy_sample, ActionRecord, ToyPolicy};
pub use render::{render_response, render_response_corrupted, Corruption};
pub use scene::{generate_task, TaskKind, TaskSample};
pub use train::{evaluate_policy, train_loop, train_loop_with, EvalSummary, IterationMetrics, TrainingReport};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("invalid env config: {0}")]
    InvalidConfig(String),
    #[error("could not generate a uniquely-answerable task for seed {seed}")]
    GenerationExhausted { seed: u64 },
    #[error("action (image {chosen_image}, cell {chosen_cell}) is outside the action space")]
    InvalidAction { chosen_image: u32, chosen_cell: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub min_images: u32,
    pub max_images: u32,
    pub objects_per_image: u32,
    /// Actions are cells of a `grid_size x grid_size` grid over the chosen image.
    pub grid_size: u32,
    pub image_size_min: u32,
    pub image_size_max: u32,
    pub max_retries: u32,
    pub eval_tasks: u32,
    /// Held-out task `i` uses seed `eval_seed + i`.
    pub eval_seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            min_images: 2,
            max_images: 4,
            objects_per_image: 3,
            grid_size: 8,
            image_size_min: 80,
            image_size_max: 160,
            max_retries: 200,
            eval_tasks: 200,
            eval_seed: 1_000_000,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |msg: &str| Err(EnvError::InvalidConfig(msg.to_owned()));
        if self.min_images == 0 || self.max_images < self.min_images {
            return bad("need 1 <= min_images <= max_images");
        }
        if self.grid_size == 0 {
            return bad("grid_size must be positive");
        }
        if self.image_size_min == 0 || self.image_size_max < self.image_size_min {
            return bad("need 1 <= image_size_min <= image_size_max");
        }
        if self.max_retries == 0 {
            return bad("max_retries must be positive");
        }
        Ok(())
    }
}
