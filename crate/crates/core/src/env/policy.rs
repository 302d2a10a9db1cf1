//! Two-head linear softmax policy over (image, grid cell) actions.
//!
//! `pi(n, c | q) = pi(n | q) * pi(c | n, q)` where each head is a softmax of
//! a dot product between shared weights and per-candidate features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::TaskSample;
use super::EnvError;
use crate::reward::iou;
use crate::types::BoundingBox;

/// Image-head features: named-by-query, full-match count, color-match count, shape-match count.
pub const IMAGE_FEATURES: usize = 4;
/// Cell-head features: IoU with the best full match, a partial match and any object, plus
/// whether the cell centre lies inside a full match.
pub const CELL_FEATURES: usize = 4;
pub const PARAMETER_COUNT: usize = IMAGE_FEATURES + CELL_FEATURES;

/// Multiplier on cell IoU features so one step moves logits by a useful amount.
const IOU_FEATURE_SCALE: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    pub parameters: Vec<f64>,
    pub grid_size: u32,
}

impl ToyPolicy {
    /// All-zero weights: uniform over images and over cells.
    pub fn uniform(grid_size: u32) -> Self {
        Self {
            parameters: vec![0.0; PARAMETER_COUNT],
            grid_size,
        }
    }

    pub fn image_weights(&self) -> &[f64] {
        &self.parameters[..IMAGE_FEATURES]
    }

    pub fn cell_weights(&self) -> &[f64] {
        &self.parameters[IMAGE_FEATURES..]
    }

    pub fn cell_count(&self) -> u32 {
        self.grid_size * self.grid_size
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRecord {
    /// 1-based image index.
    pub chosen_image: u32,
    /// Row-major index into the `G x G` grid of the chosen image.
    pub chosen_cell: u32,
    pub bbox: BoundingBox,
}

impl ActionRecord {
    pub fn new(task: &TaskSample, grid_size: u32, chosen_image: u32, chosen_cell: u32) -> Result<Self, EnvError> {
        if chosen_image == 0 || chosen_image as usize > task.images.len() || chosen_cell >= grid_size * grid_size {
            return Err(EnvError::InvalidAction { chosen_image, chosen_cell });
        }
        let img = &task.images[(chosen_image - 1) as usize];
        Ok(Self {
            chosen_image,
            chosen_cell,
            bbox: cell_box(img.width, img.height, grid_size, chosen_cell),
        })
    }
}

pub fn cell_box(width: f64, height: f64, grid_size: u32, cell: u32) -> BoundingBox {
    let g = grid_size as f64;
    let (row, col) = ((cell / grid_size) as f64, (cell % grid_size) as f64);
    let (cw, ch) = (width / g, height / g);
    BoundingBox::new(col * cw, row * ch, (col + 1.0) * cw, (row + 1.0) * ch).expect("grid cells are valid boxes")
}

/// Per-task feature tables, independent of the weights.
#[derive(Debug, Clone)]
pub struct TaskFeatures {
    pub grid_size: u32,
    /// `image[n]` for 0-based image `n`.
    pub image: Vec<[f64; IMAGE_FEATURES]>,
    /// `cell[n][c]`.
    pub cell: Vec<Vec<[f64; CELL_FEATURES]>>,
}

impl TaskFeatures {
    pub fn new(task: &TaskSample, grid_size: u32) -> Self {
        let q = &task.query;
        let image = task
            .images
            .iter()
            .zip(1u32..)
            .map(|(img, n)| {
                let named = if q.image == Some(n) { 1.0 } else { 0.0 };
                let full = img.objects.iter().filter(|o| q.attributes_match(o)).count() as f64;
                let color = q.color.map_or(0, |c| img.objects.iter().filter(|o| o.color == c).count()) as f64;
                let shape = q.shape.map_or(0, |s| img.objects.iter().filter(|o| o.shape == s).count()) as f64;
                [named, full, color, shape]
            })
            .collect();

        let cell = task
            .images
            .iter()
            .map(|img| {
                (0..grid_size * grid_size)
                    .map(|c| {
                        let cb = cell_box(img.width, img.height, grid_size, c);
                        let (cx, cy) = ((cb.x1() + cb.x2()) / 2.0, (cb.y1() + cb.y2()) / 2.0);
                        let mut f = [0.0f64; CELL_FEATURES];
                        for o in &img.objects {
                            let overlap = iou(&cb, &o.bbox);
                            let partial = !q.attributes_match(o)
                                && (q.color.is_some_and(|c| c == o.color) || q.shape.is_some_and(|s| s == o.shape));
                            if q.attributes_match(o) {
                                f[0] = f[0].max(overlap);
                                if o.bbox.contains_point(cx, cy) {
                                    f[3] = 1.0;
                                }
                            } else if partial {
                                f[1] = f[1].max(overlap);
                            }
                            f[2] = f[2].max(overlap);
                        }
                        f[0] *= IOU_FEATURE_SCALE;
                        f[1] *= IOU_FEATURE_SCALE;
                        f[2] *= IOU_FEATURE_SCALE;
                        f
                    })
                    .collect()
            })
            .collect();

        Self { grid_size, image, cell }
    }

    pub fn image_count(&self) -> usize {
        self.image.len()
    }

    pub fn cell_count(&self) -> usize {
        (self.grid_size * self.grid_size) as usize
    }
}

fn dot(w: &[f64], f: &[f64]) -> f64 {
    w.iter().zip(f).map(|(a, b)| a * b).sum()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Log-probabilities of every action for one (policy, task) pair.
#[derive(Debug, Clone)]
pub struct ActionDistribution<'f> {
    features: &'f TaskFeatures,
    pub image_logp: Vec<f64>,
    /// `cell_logp[n][c] = log pi(c | n)`.
    pub cell_logp: Vec<Vec<f64>>,
}

impl<'f> ActionDistribution<'f> {
    pub fn new(policy: &ToyPolicy, features: &'f TaskFeatures) -> Self {
        let image_logits: Vec<f64> = features.image.iter().map(|f| dot(policy.image_weights(), f)).collect();
        let cell_logp = features
            .cell
            .iter()
            .map(|cells| {
                let logits: Vec<f64> = cells.iter().map(|f| dot(policy.cell_weights(), f)).collect();
                log_softmax(&logits)
            })
            .collect();
        Self {
            features,
            image_logp: log_softmax(&image_logits),
            cell_logp,
        }
    }

    /// `n` is 0-based here.
    pub fn logprob(&self, n: usize, c: usize) -> f64 {
        self.image_logp[n] + self.cell_logp[n][c]
    }

    /// Every `(n, c, log pi)` in row-major order.
    pub fn actions(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.image_logp.len()).flat_map(move |n| (0..self.cell_logp[n].len()).map(move |c| (n, c, self.logprob(n, c))))
    }

    /// Gradient of `log pi(n, c)` with respect to the policy parameters.
    pub fn grad_logprob(&self, n: usize, c: usize) -> Vec<f64> {
        let mut grad = vec![0.0; PARAMETER_COUNT];
        for (n2, lp) in self.image_logp.iter().enumerate() {
            let p = lp.exp();
            for (k, f) in self.features.image[n2].iter().enumerate() {
                grad[k] -= p * f;
            }
        }
        for (k, f) in self.features.image[n].iter().enumerate() {
            grad[k] += f;
        }
        for (c2, lp) in self.cell_logp[n].iter().enumerate() {
            let p = lp.exp();
            for (k, f) in self.features.cell[n][c2].iter().enumerate() {
                grad[IMAGE_FEATURES + k] -= p * f;
            }
        }
        for (k, f) in self.features.cell[n][c].iter().enumerate() {
            grad[IMAGE_FEATURES + k] += f;
        }
        grad
    }

    /// Mode of the factorized distribution: best image, then best cell in it.
    /// Ties go to the lowest index.
    pub fn greedy(&self) -> (usize, usize) {
        let n = argmax(&self.image_logp);
        (n, argmax(&self.cell_logp[n]))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let n = sample_index(&self.image_logp, rng.random::<f64>());
        let c = sample_index(&self.cell_logp[n], rng.random::<f64>());
        (n, c)
    }
}

fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Inverse-CDF draw from log-probabilities with `u` in `[0, 1)`.
fn sample_index(logp: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, lp) in logp.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    // Rounding left the cumulative sum just under 1; take the last reachable index.
    logp.iter().rposition(|lp| lp.exp() > 0.0).unwrap_or(logp.len() - 1)
}

fn check_action(task: &TaskSample, policy: &ToyPolicy, action: &ActionRecord) -> Result<(usize, usize), EnvError> {
    let invalid = EnvError::InvalidAction {
        chosen_image: action.chosen_image,
        chosen_cell: action.chosen_cell,
    };
    if action.chosen_image == 0 || action.chosen_image as usize > task.images.len() || action.chosen_cell >= policy.cell_count() {
        return Err(invalid);
    }
    Ok(((action.chosen_image - 1) as usize, action.chosen_cell as usize))
}

pub fn policy_logprob(policy: &ToyPolicy, task: &TaskSample, action: &ActionRecord) -> Result<f64, EnvError> {
    let (n, c) = check_action(task, policy, action)?;
    let features = TaskFeatures::new(task, policy.grid_size);
    Ok(ActionDistribution::new(policy, &features).logprob(n, c))
}

pub fn policy_sample<R: Rng + ?Sized>(policy: &ToyPolicy, task: &TaskSample, rng: &mut R) -> (ActionRecord, f64) {
    let features = TaskFeatures::new(task, policy.grid_size);
    let dist = ActionDistribution::new(policy, &features);
    let (n, c) = dist.sample(rng);
    let action = ActionRecord::new(task, policy.grid_size, n as u32 + 1, c as u32).expect("sampled indices are in range");
    (action, dist.logprob(n, c))
}

pub fn policy_greedy(policy: &ToyPolicy, task: &TaskSample) -> ActionRecord {
    let features = TaskFeatures::new(task, policy.grid_size);
    let (n, c) = ActionDistribution::new(policy, &features).greedy();
    ActionRecord::new(task, policy.grid_size, n as u32 + 1, c as u32).expect("greedy indices are in range")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::scene::generate_task;
    use crate::env::EnvConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_image_task() -> TaskSample {
        let cfg = EnvConfig {
            min_images: 2,
            max_images: 2,
            grid_size: 4,
            ..EnvConfig::default()
        };
        generate_task(3, &cfg).unwrap()
    }

    #[test]
    fn uniform_logprob_closed_form() {
        let task = two_image_task();
        let policy = ToyPolicy::uniform(4);
        let action = ActionRecord::new(&task, 4, 2, 5).unwrap();
        let lp = policy_logprob(&policy, &task, &action).unwrap();
        assert!((lp + 32f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let task = two_image_task();
        let policy = ToyPolicy {
            parameters: vec![0.3, -1.2, 2.0, 0.5, 1.5, -0.7, 0.2, 3.0],
            grid_size: 4,
        };
        let feats = TaskFeatures::new(&task, 4);
        let total: f64 = ActionDistribution::new(&policy, &feats).actions().map(|(_, _, lp)| lp.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn out_of_range_action_is_invalid() {
        let task = two_image_task();
        let policy = ToyPolicy::uniform(4);
        let bad = ActionRecord {
            chosen_image: 3,
            chosen_cell: 0,
            bbox: cell_box(10.0, 10.0, 4, 0),
        };
        assert!(matches!(policy_logprob(&policy, &task, &bad), Err(EnvError::InvalidAction { .. })));
        assert!(ActionRecord::new(&task, 4, 1, 16).is_err());
        assert!(ActionRecord::new(&task, 4, 0, 0).is_err());
    }

    #[test]
    fn sampled_logprob_matches_exact() {
        let task = two_image_task();
        let policy = ToyPolicy {
            parameters: vec![1.0, 0.5, 0.0, 0.0, 2.0, 0.0, 0.0, 1.0],
            grid_size: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let (a, lp) = policy_sample(&policy, &task, &mut rng);
            assert_eq!(lp, policy_logprob(&policy, &task, &a).unwrap());
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let task = two_image_task();
        let policy = ToyPolicy::uniform(4);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| policy_sample(&policy, &task, &mut rng).0).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
        assert_ne!(draw(5), draw(6));
    }

    #[test]
    fn grad_logprob_matches_finite_differences() {
        let task = two_image_task();
        let policy = ToyPolicy {
            parameters: vec![0.4, -0.3, 0.8, 0.1, 0.9, -0.2, 0.3, 0.6],
            grid_size: 4,
        };
        let feats = TaskFeatures::new(&task, 4);
        let analytic = ActionDistribution::new(&policy, &feats).grad_logprob(1, 6);
        let h = 1e-6;
        for k in 0..PARAMETER_COUNT {
            let mut up = policy.clone();
            up.parameters[k] += h;
            let mut down = policy.clone();
            down.parameters[k] -= h;
            let fd = (ActionDistribution::new(&up, &feats).logprob(1, 6) - ActionDistribution::new(&down, &feats).logprob(1, 6)) / (2.0 * h);
            assert!((fd - analytic[k]).abs() < 1e-7, "param {k}: {fd} vs {}", analytic[k]);
        }
    }

    #[test]
    fn cell_box_tiles_image() {
        let b = cell_box(80.0, 40.0, 4, 6);
        assert_eq!(b.to_array(), [40.0, 10.0, 60.0, 20.0]);
    }
}
