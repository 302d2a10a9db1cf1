//! Rule-based verifiable rewards: format, image and object.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{extract_groundings, parse_trajectory};
use crate::matching::max_weight_assignment;
use crate::types::{BoundingBox, GroundedObject, PositionId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GroundTruthError {
    #[error("ground truth has no objects")]
    Empty,
    #[error("image_count must be positive")]
    NoImages,
    #[error("object {0} points past image_count {1}")]
    ImageOutOfRange(PositionId, u32),
    #[error("object {0} appears twice")]
    DuplicatePosition(PositionId),
}

/// Gold objects for one task over `image_count` images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GroundTruthRepr", into = "GroundTruthRepr")]
pub struct GroundTruth {
    objects: Vec<GroundedObject>,
    image_count: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroundTruthRepr {
    image_count: u32,
    objects: Vec<GroundedObject>,
}

impl TryFrom<GroundTruthRepr> for GroundTruth {
    type Error = GroundTruthError;

    fn try_from(repr: GroundTruthRepr) -> Result<Self, Self::Error> {
        GroundTruth::new(repr.objects, repr.image_count)
    }
}

impl From<GroundTruth> for GroundTruthRepr {
    fn from(gt: GroundTruth) -> Self {
        Self {
            image_count: gt.image_count,
            objects: gt.objects,
        }
    }
}

impl GroundTruth {
    pub fn new(objects: Vec<GroundedObject>, image_count: u32) -> Result<Self, GroundTruthError> {
        if image_count == 0 {
            return Err(GroundTruthError::NoImages);
        }
        if objects.is_empty() {
            return Err(GroundTruthError::Empty);
        }
        let mut seen = HashSet::new();
        for obj in &objects {
            if obj.position.image_index() > image_count {
                return Err(GroundTruthError::ImageOutOfRange(obj.position, image_count));
            }
            if !seen.insert(obj.position) {
                return Err(GroundTruthError::DuplicatePosition(obj.position));
            }
        }
        Ok(Self { objects, image_count })
    }

    pub fn objects(&self) -> &[GroundedObject] {
        &self.objects
    }

    pub fn image_count(&self) -> u32 {
        self.image_count
    }
}

/// Intersection over union; zero when the union has no area.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 || inter <= 0.0 {
        0.0
    } else {
        (inter / union).min(1.0)
    }
}

pub fn format_reward(text: &str) -> f64 {
    if crate::grammar::check_format(text) {
        1.0
    } else {
        0.0
    }
}

/// Compares only the image component of the two positions.
pub fn image_reward_single(pred: PositionId, gt: PositionId) -> f64 {
    if pred.image_index() == gt.image_index() {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchPair {
    pub gt_index: usize,
    pub pred_index: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MatchResult {
    pub pairs: Vec<MatchPair>,
    pub unmatched_gt: Vec<usize>,
    pub unmatched_pred: Vec<usize>,
}

/// IoU between a prediction and a gold object. Boxes in different images
/// never overlap.
pub fn grounded_iou(pred: &GroundedObject, gt: &GroundedObject) -> f64 {
    if pred.position.image_index() != gt.position.image_index() {
        0.0
    } else {
        iou(&pred.bbox, &gt.bbox)
    }
}

/// One-to-one matching of predictions to gold objects maximizing total IoU.
pub fn match_objects(preds: &[GroundedObject], gts: &[GroundedObject]) -> MatchResult {
    let weights: Vec<Vec<f64>> = gts
        .iter()
        .map(|g| preds.iter().map(|p| grounded_iou(p, g)).collect())
        .collect();
    let assignment = max_weight_assignment(&weights);

    let mut result = MatchResult::default();
    let mut pred_used = vec![false; preds.len()];
    for (gt_index, choice) in assignment.into_iter().enumerate() {
        match choice {
            Some(pred_index) => {
                pred_used[pred_index] = true;
                result.pairs.push(MatchPair {
                    gt_index,
                    pred_index,
                    iou: weights[gt_index][pred_index],
                });
            }
            None => result.unmatched_gt.push(gt_index),
        }
    }
    result.unmatched_pred = (0..preds.len()).filter(|&i| !pred_used[i]).collect();
    result
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_fmt: f64,
    pub r_img: f64,
    pub r_obj: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn new(r_fmt: f64, r_img: f64, r_obj: f64) -> Self {
        Self {
            r_fmt,
            r_img,
            r_obj,
            total: r_fmt + r_img + r_obj,
        }
    }

    /// Total with the image term dropped, for ablation runs.
    pub fn total_without_image(&self) -> f64 {
        self.r_fmt + self.r_obj
    }
}

/// Largest number of gold objects that can be paired one-to-one with a
/// prediction naming the same image. Box overlap plays no part.
pub fn image_matches(preds: &[GroundedObject], gts: &[GroundedObject]) -> usize {
    let weights: Vec<Vec<f64>> = gts
        .iter()
        .map(|g| preds.iter().map(|p| image_reward_single(p.position, g.position)).collect())
        .collect();
    max_weight_assignment(&weights).into_iter().flatten().count()
}

/// Scores already-extracted predictions; the format term is taken as given.
pub fn score_groundings(preds: &[GroundedObject], gt: &GroundTruth) -> RewardBreakdown {
    let gold = gt.objects();
    let matching = match_objects(preds, gold);
    let n = gold.len() as f64;
    let iou_sum: f64 = matching.pairs.iter().map(|p| p.iou).sum();
    let img_sum = image_matches(preds, gold) as f64;
    RewardBreakdown::new(1.0, img_sum / n, iou_sum / n)
}

pub fn score_response(text: &str, gt: &GroundTruth) -> RewardBreakdown {
    match parse_trajectory(text) {
        Ok(t) => score_groundings(&extract_groundings(&t), gt),
        Err(_) => RewardBreakdown::default(),
    }
}
