//! Group Relative Policy Optimization over the toy grounding policy.
//!
//! Each iteration samples a group of `N` responses from the frozen policy,
//! turns their rewards into group-normalized advantages and ascends
//!
//! ```text
//! J(theta) = 1/N * sum_i ratio_i * A_i  -  lambda * KL(pi_theta || pi_ref)
//! ```
//!
//! with `ratio_i = pi_theta(o_i) / pi_old(o_i)` at whole-response granularity
//! and no clipping. KL is exact over the enumerated action space.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::policy::{ActionDistribution, ActionRecord, TaskFeatures, ToyPolicy};
use crate::env::scene::TaskSample;
use crate::reward::RewardBreakdown;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GrpoError {
    #[error("advantage normalization needs at least 2 rewards, got {0}")]
    DegenerateGroup(usize),
    #[error("gradient has {got} entries, policy has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("reference assigns zero probability where the policy does not")]
    SupportMismatch,
    #[error("response {index} does not fit the task: {reason}")]
    InvalidResponse { index: usize, reason: String },
    #[error("invalid GRPO config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub kl_coefficient: f64,
    pub std_epsilon: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Add the image term to the training reward. Off only for ablations.
    pub image_reward: bool,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            kl_coefficient: 0.04,
            std_epsilon: 1e-8,
            learning_rate: 0.05,
            iterations: 300,
            seed: 0,
            image_reward: true,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |msg: &str| Err(GrpoError::InvalidConfig(msg.to_owned()));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if !(self.kl_coefficient >= 0.0 && self.kl_coefficient.is_finite()) {
            return bad("kl_coefficient must be finite and non-negative");
        }
        if !(self.std_epsilon > 0.0 && self.std_epsilon.is_finite()) {
            return bad("std_epsilon must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }

    /// The scalar reward optimized in training.
    pub fn training_reward(&self, r: &RewardBreakdown) -> f64 {
        if self.image_reward {
            r.total
        } else {
            r.total_without_image()
        }
    }
}

/// `(r_i - mean) / max(std, eps)` with the population standard deviation.
/// A group of identical rewards yields exact zeros.
pub fn normalize_advantages(rewards: &[f64], eps: f64) -> Result<Vec<f64>, GrpoError> {
    let n = rewards.len();
    if n < 2 {
        return Err(GrpoError::DegenerateGroup(n));
    }
    if rewards.iter().all(|r| *r == rewards[0]) {
        return Ok(vec![0.0; n]);
    }
    let mean = rewards.iter().sum::<f64>() / n as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n as f64;
    let denom = var.sqrt().max(eps);
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

pub fn importance_ratio(logp_current: f64, logp_old: f64) -> f64 {
    (logp_current - logp_old).exp()
}

/// `sum_a p(a) * (log p(a) - log q(a))` over aligned log-probability tables.
pub fn categorical_kl(log_p: &[f64], log_q: &[f64]) -> Result<f64, GrpoError> {
    let mut kl = 0.0;
    for (lp, lq) in log_p.iter().zip(log_q) {
        let p = lp.exp();
        if p == 0.0 {
            continue;
        }
        if *lq == f64::NEG_INFINITY {
            return Err(GrpoError::SupportMismatch);
        }
        kl += p * (lp - lq);
    }
    // Rounding can leave a tiny negative when p and q agree.
    Ok(kl.max(0.0))
}

fn joint_logp(dist: &ActionDistribution<'_>) -> Vec<f64> {
    dist.actions().map(|(_, _, lp)| lp).collect()
}

pub fn kl_divergence(policy: &ToyPolicy, reference: &ToyPolicy, task: &TaskSample) -> Result<f64, GrpoError> {
    let features = TaskFeatures::new(task, policy.grid_size);
    kl_with_features(policy, reference, &features)
}

fn kl_with_features(policy: &ToyPolicy, reference: &ToyPolicy, features: &TaskFeatures) -> Result<f64, GrpoError> {
    if policy.parameters == reference.parameters {
        return Ok(0.0);
    }
    let p = ActionDistribution::new(policy, features);
    let q = ActionDistribution::new(reference, features);
    categorical_kl(&joint_logp(&p), &joint_logp(&q))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub action: ActionRecord,
    pub text: String,
    pub reward: RewardBreakdown,
    pub logprob_old: f64,
    pub logprob_current: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub query_id: u64,
    responses: Vec<ResponseRecord>,
    advantages: Vec<f64>,
}

impl RolloutGroup {
    /// Builds the group and its advantages from `reward_of` applied to each response.
    pub fn new(
        query_id: u64,
        responses: Vec<ResponseRecord>,
        reward_of: impl Fn(&RewardBreakdown) -> f64,
        eps: f64,
    ) -> Result<Self, GrpoError> {
        let rewards: Vec<f64> = responses.iter().map(|r| reward_of(&r.reward)).collect();
        let advantages = normalize_advantages(&rewards, eps)?;
        Ok(Self {
            query_id,
            responses,
            advantages,
        })
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn responses(&self) -> &[ResponseRecord] {
        &self.responses
    }

    pub fn advantages(&self) -> &[f64] {
        &self.advantages
    }

    /// Recomputes `logprob_current` under `policy`; `logprob_old` is untouched.
    pub fn refresh_current(&mut self, policy: &ToyPolicy, task: &TaskSample) -> Result<(), GrpoError> {
        let features = TaskFeatures::new(task, policy.grid_size);
        let dist = ActionDistribution::new(policy, &features);
        for (index, r) in self.responses.iter_mut().enumerate() {
            let (n, c) = action_indices(&r.action, &features, index)?;
            r.logprob_current = dist.logprob(n, c);
        }
        Ok(())
    }
}

fn action_indices(action: &ActionRecord, features: &TaskFeatures, index: usize) -> Result<(usize, usize), GrpoError> {
    let n = action.chosen_image as usize;
    let c = action.chosen_cell as usize;
    if n == 0 || n > features.image_count() || c >= features.cell_count() {
        return Err(GrpoError::InvalidResponse {
            index,
            reason: format!("image {n} cell {c} outside the action space"),
        });
    }
    Ok((n - 1, c))
}

pub fn grpo_objective(group: &RolloutGroup, kl: f64, kl_coefficient: f64) -> f64 {
    let n = group.len() as f64;
    let surrogate: f64 = group
        .responses
        .iter()
        .zip(&group.advantages)
        .map(|(r, a)| importance_ratio(r.logprob_current, r.logprob_old) * a)
        .sum();
    surrogate / n - kl_coefficient * kl
}

/// Objective evaluated at `policy`, recomputing current log-probs and KL.
pub fn grpo_objective_at(
    group: &RolloutGroup,
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    task: &TaskSample,
    kl_coefficient: f64,
) -> Result<f64, GrpoError> {
    let mut group = group.clone();
    group.refresh_current(policy, task)?;
    let kl = kl_divergence(policy, reference, task)?;
    Ok(grpo_objective(&group, kl, kl_coefficient))
}

/// Exact gradient of the objective at `policy`, holding old log-probs and advantages fixed:
/// `1/N sum_i ratio_i A_i grad log pi(o_i) - lambda * grad KL`.
pub fn grpo_gradient(
    group: &RolloutGroup,
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    task: &TaskSample,
    kl_coefficient: f64,
) -> Result<Vec<f64>, GrpoError> {
    let features = TaskFeatures::new(task, policy.grid_size);
    let dist = ActionDistribution::new(policy, &features);
    let dim = policy.parameters.len();
    let mut grad = vec![0.0; dim];

    let n = group.len() as f64;
    for (index, (r, a)) in group.responses.iter().zip(&group.advantages).enumerate() {
        if *a == 0.0 {
            continue;
        }
        let (img, cell) = action_indices(&r.action, &features, index)?;
        let ratio = importance_ratio(dist.logprob(img, cell), r.logprob_old);
        let weight = ratio * a / n;
        for (g, d) in grad.iter_mut().zip(dist.grad_logprob(img, cell)) {
            *g += weight * d;
        }
    }

    if kl_coefficient != 0.0 && policy.parameters != reference.parameters {
        let ref_dist = ActionDistribution::new(reference, &features);
        // grad KL = sum_a p(a) (log p(a) - log q(a)) grad log p(a)
        for (img, cell, lp) in dist.actions() {
            let p = lp.exp();
            if p == 0.0 {
                continue;
            }
            let weight = p * (lp - ref_dist.logprob(img, cell));
            for (g, d) in grad.iter_mut().zip(dist.grad_logprob(img, cell)) {
                *g -= kl_coefficient * weight * d;
            }
        }
    }
    Ok(grad)
}

/// Gradient ascent step `theta + lr * gradient`.
pub fn update_policy(policy: &ToyPolicy, gradient: &[f64], learning_rate: f64) -> Result<ToyPolicy, GrpoError> {
    if gradient.len() != policy.parameters.len() {
        return Err(GrpoError::DimensionMismatch {
            expected: policy.parameters.len(),
            got: gradient.len(),
        });
    }
    let parameters = policy.parameters.iter().zip(gradient).map(|(p, g)| p + learning_rate * g).collect();
    Ok(ToyPolicy {
        parameters,
        grid_size: policy.grid_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advantages_of_zero_one_two() {
        let a = normalize_advantages(&[0.0, 1.0, 2.0], 1e-8).unwrap();
        // (r - 1) / sqrt(2/3)
        let s = 1.224744871391589;
        assert!((a[0] + s).abs() < 1e-12);
        assert_eq!(a[1], 0.0);
        assert!((a[2] - s).abs() < 1e-12);
    }

    #[test]
    fn equal_rewards_give_zero_advantages() {
        assert_eq!(normalize_advantages(&[5.0; 4], 1e-8).unwrap(), vec![0.0; 4]);
        assert_eq!(normalize_advantages(&[0.1; 3], 1e-8).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn tiny_spread_divides_by_epsilon() {
        let a = normalize_advantages(&[0.0, 1e-10], 1e-8).unwrap();
        assert!((a[0] + 0.005).abs() < 1e-12);
        assert!((a[1] - 0.005).abs() < 1e-12);
    }

    #[test]
    fn single_reward_is_degenerate() {
        assert_eq!(normalize_advantages(&[3.0], 1e-8), Err(GrpoError::DegenerateGroup(1)));
        assert_eq!(normalize_advantages(&[], 1e-8), Err(GrpoError::DegenerateGroup(0)));
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(importance_ratio(-2.0, -2.0), 1.0);
        assert!((importance_ratio(-1.0, -2.0) - std::f64::consts::E).abs() < 1e-15);
        assert!((importance_ratio(-3.0, -1.0) - (-2.0f64).exp()).abs() < 1e-15);
        assert!(importance_ratio(-1000.0, -1.0) >= 0.0);
    }

    #[test]
    fn hand_kl() {
        let p = [0.5f64.ln(), 0.5f64.ln()];
        let q = [0.9f64.ln(), 0.1f64.ln()];
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        let kl = categorical_kl(&p, &q).unwrap();
        assert!((kl - expected).abs() < 1e-15);
        assert!((kl - 0.510826).abs() < 1e-5);
        assert_eq!(categorical_kl(&p, &p).unwrap(), 0.0);
        assert_eq!(categorical_kl(&p, &[0.0, f64::NEG_INFINITY]), Err(GrpoError::SupportMismatch));
    }

    #[test]
    fn update_examples() {
        let policy = ToyPolicy {
            parameters: vec![1.0, 2.0],
            grid_size: 1,
        };
        let next = update_policy(&policy, &[0.5, -0.5], 0.1).unwrap();
        assert!((next.parameters[0] - 1.05).abs() < 1e-15);
        assert!((next.parameters[1] - 1.95).abs() < 1e-15);
        assert_eq!(update_policy(&policy, &[0.0, 0.0], 0.1).unwrap(), policy);
        assert_eq!(update_policy(&policy, &[3.0, 4.0], 0.0).unwrap(), policy);
        assert!(matches!(update_policy(&policy, &[1.0], 0.1), Err(GrpoError::DimensionMismatch { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(GrpoConfig::default().validate().is_ok());
        let bad = GrpoConfig {
            group_size: 1,
            ..GrpoConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = GrpoConfig {
            learning_rate: 0.0,
            ..GrpoConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
