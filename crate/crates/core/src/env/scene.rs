use std::fmt;

use rand::seq::{IndexedMutRandom, IndexedRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EnvConfig, EnvError};
use crate::reward::GroundTruth;
use crate::types::{BoundingBox, GroundedObject, PositionId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Blue,
    Green,
    Yellow,
}

const SHAPES: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];
const COLORS: [Color; 4] = [Color::Red, Color::Blue, Color::Green, Color::Yellow];

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        })
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Color::Red => "red",
            Color::Blue => "blue",
            Color::Green => "green",
            Color::Yellow => "yellow",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Difference,
    Similarity,
    Tracking,
    Referential,
    Reasoning,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Difference,
        TaskKind::Similarity,
        TaskKind::Tracking,
        TaskKind::Referential,
        TaskKind::Reasoning,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Difference => "difference",
            TaskKind::Similarity => "similarity",
            TaskKind::Tracking => "tracking",
            TaskKind::Referential => "referential",
            TaskKind::Reasoning => "reasoning",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub bbox: BoundingBox,
    pub object_index: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneImage {
    pub width: f64,
    pub height: f64,
    pub objects: Vec<SceneObject>,
}

/// Templated query text plus the attributes it constrains. `image` is the
/// 1-based image the query resolves to, when it names or implies one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub text: String,
    pub color: Option<Color>,
    pub shape: Option<Shape>,
    pub image: Option<u32>,
}

impl Query {
    pub fn matches(&self, image_index: u32, obj: &SceneObject) -> bool {
        self.image.is_none_or(|n| n == image_index)
            && self.color.is_none_or(|c| c == obj.color)
            && self.shape.is_none_or(|s| s == obj.shape)
    }

    /// Attribute match ignoring the image constraint.
    pub fn attributes_match(&self, obj: &SceneObject) -> bool {
        self.color.is_none_or(|c| c == obj.color) && self.shape.is_none_or(|s| s == obj.shape)
    }

    pub fn target_description(&self) -> String {
        match (self.color, self.shape) {
            (Some(c), Some(s)) => format!("{c} {s}"),
            (Some(c), None) => format!("{c} object"),
            (None, Some(s)) => s.to_string(),
            (None, None) => "object".to_owned(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSample {
    pub images: Vec<SceneImage>,
    pub query: Query,
    pub ground_truth: GroundTruth,
    pub task_kind: TaskKind,
}

impl TaskSample {
    /// All objects satisfying the query, as positions.
    pub fn satisfying(&self) -> Vec<PositionId> {
        self.images
            .iter()
            .zip(1u32..)
            .flat_map(|(img, n)| {
                img.objects
                    .iter()
                    .filter(move |o| self.query.matches(n, o))
                    .map(move |o| PositionId::new(n, o.object_index).expect("indices are 1-based"))
            })
            .collect()
    }
}

pub fn generate_task(seed: u64, config: &EnvConfig) -> Result<TaskSample, EnvError> {
    config.validate()?;
    if config.objects_per_image == 0 {
        return Err(EnvError::GenerationExhausted { seed });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..config.max_retries {
        if let Some(task) = attempt(&mut rng, config) {
            return Ok(task);
        }
    }
    Err(EnvError::GenerationExhausted { seed })
}

fn attempt(rng: &mut ChaCha8Rng, config: &EnvConfig) -> Option<TaskSample> {
    let n_images = rng.random_range(config.min_images..=config.max_images);
    let mut images: Vec<SceneImage> = (0..n_images).map(|_| random_image(rng, config)).collect::<Option<_>>()?;

    let kinds: Vec<TaskKind> = TaskKind::ALL
        .into_iter()
        .filter(|k| n_images >= 2 || !matches!(k, TaskKind::Tracking | TaskKind::Reasoning))
        .collect();
    let kind = *kinds.choose(rng)?;

    let target_image = match kind {
        TaskKind::Tracking | TaskKind::Reasoning => rng.random_range(2..=n_images),
        _ => rng.random_range(1..=n_images),
    };
    let ti = (target_image - 1) as usize;
    let target = images[ti].objects.choose(rng)?.clone();

    // Copy the target's attributes into another image so image identity matters.
    let plant = |rng: &mut ChaCha8Rng, images: &mut Vec<SceneImage>, into: usize, shape_only: bool| {
        if let Some(victim) = images[into].objects.choose_mut(rng) {
            victim.shape = target.shape;
            if !shape_only {
                victim.color = target.color;
            }
        }
    };
    let others: Vec<usize> = (0..images.len()).filter(|&i| i != ti).collect();
    match kind {
        TaskKind::Referential | TaskKind::Reasoning | TaskKind::Similarity => {
            if let Some(&other) = others.choose(rng) {
                plant(rng, &mut images, other, false);
            }
        }
        TaskKind::Tracking => plant(rng, &mut images, 0, true),
        TaskKind::Difference => {}
    }

    let (color, shape, image, text) = match kind {
        TaskKind::Referential => (
            Some(target.color),
            Some(target.shape),
            Some(target_image),
            format!("Find the {} {} in Image-{target_image}.", target.color, target.shape),
        ),
        TaskKind::Tracking => (
            None,
            Some(target.shape),
            Some(target_image),
            format!("Track the {} seen in Image-1 and locate it in Image-{target_image}.", target.shape),
        ),
        TaskKind::Similarity => (
            Some(target.color),
            None,
            Some(target_image),
            format!("Which object in Image-{target_image} has the color {}? Locate it.", target.color),
        ),
        TaskKind::Difference => (
            Some(target.color),
            Some(target.shape),
            None,
            format!("One image contains a {} {} that the other images lack. Locate it.", target.color, target.shape),
        ),
        TaskKind::Reasoning => {
            let text = if target_image == n_images {
                format!("Find the {} {} in the last image.", target.color, target.shape)
            } else {
                format!("Find the {} {} in the image right after Image-{}.", target.color, target.shape, target_image - 1)
            };
            (Some(target.color), Some(target.shape), Some(target_image), text)
        }
    };
    let query = Query { text, color, shape, image };

    let description = query.target_description();
    let gold = GroundedObject::new(
        PositionId::new(target_image, target.object_index).ok()?,
        description,
        target.bbox,
    )
    .ok()?;
    let ground_truth = GroundTruth::new(vec![gold], n_images).ok()?;
    let task = TaskSample {
        images,
        query,
        ground_truth,
        task_kind: kind,
    };
    let satisfying = task.satisfying();
    (satisfying.len() == 1 && satisfying[0] == task.ground_truth.objects()[0].position).then_some(task)
}

fn random_image(rng: &mut ChaCha8Rng, config: &EnvConfig) -> Option<SceneImage> {
    let width = rng.random_range(config.image_size_min..=config.image_size_max) as f64;
    let height = rng.random_range(config.image_size_min..=config.image_size_max) as f64;
    let g = config.grid_size as usize;
    let cells = g * g;
    if config.objects_per_image as usize > cells {
        return None;
    }
    let cell_ids = rand::seq::index::sample(rng, cells, config.objects_per_image as usize);
    let objects = cell_ids
        .iter()
        .zip(1u32..)
        .map(|(cell, object_index)| {
            let bbox = jittered_cell_box(rng, cell, g, width, height);
            SceneObject {
                shape: *SHAPES.choose(rng).expect("non-empty"),
                color: *COLORS.choose(rng).expect("non-empty"),
                bbox,
                object_index,
            }
        })
        .collect();
    Some(SceneImage { width, height, objects })
}

/// A box near grid cell `cell`, shifted and rescaled so it never coincides with it.
fn jittered_cell_box(rng: &mut ChaCha8Rng, cell: usize, g: usize, width: f64, height: f64) -> BoundingBox {
    let cw = width / g as f64;
    let ch = height / g as f64;
    let (row, col) = (cell / g, cell % g);
    let cx = (col as f64 + 0.5) * cw;
    let cy = (row as f64 + 0.5) * ch;
    let mut offset = |size: f64| {
        let mag = rng.random_range(0.03..0.12) * size;
        if rng.random_bool(0.5) {
            mag
        } else {
            -mag
        }
    };
    let (dx, dy) = (offset(cw), offset(ch));
    let scale = rng.random_range(0.92..1.08);
    let (hw, hh) = (scale * cw / 2.0, scale * ch / 2.0);
    // Two decimals keeps rendered coordinates short.
    let r = |v: f64| (v * 100.0).round() / 100.0;
    BoundingBox::new(
        r((cx + dx - hw).clamp(0.0, width)),
        r((cy + dy - hh).clamp(0.0, height)),
        r((cx + dx + hw).clamp(0.0, width)),
        r((cy + dy + hh).clamp(0.0, height)),
    )
    .expect("clamped corners are ordered and non-negative")
}
