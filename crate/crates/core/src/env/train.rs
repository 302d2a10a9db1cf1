//! Sequential GRPO training on synthetic tasks with held-out Acc@0.5 evaluation.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::policy::{ActionDistribution, ActionRecord, TaskFeatures, ToyPolicy};
use super::render::render_response;
use super::scene::generate_task;
use super::{EnvConfig, EnvError};
use crate::eval::is_correct;
use crate::grpo::{grpo_gradient, grpo_objective, kl_divergence, update_policy, GrpoConfig, GrpoError, ResponseRecord, RolloutGroup};
use crate::reward::score_response;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub tasks: usize,
    /// Acc@0.5 of the policy: probability that a sampled prediction is correct,
    /// computed exactly over the action space and averaged over tasks.
    pub accuracy: f64,
    /// Acc@0.5 of the single most likely action.
    pub greedy_accuracy: f64,
    /// Expected rewards under the policy, averaged over tasks.
    pub mean_reward: f64,
    pub mean_r_img: f64,
    pub mean_r_obj: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    /// Mean of the reward actually optimized (image term dropped in ablations).
    pub mean_reward: f64,
    pub mean_r_img: f64,
    pub mean_r_obj: f64,
    pub kl: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub initial_eval: EvalSummary,
    pub final_eval: EvalSummary,
    pub iterations: Vec<IterationMetrics>,
    pub policy: ToyPolicy,
}

/// Scores `policy` on the held-out tasks `eval_seed .. eval_seed + eval_tasks`.
/// Every action is rendered and scored through the real parser.
pub fn evaluate_policy(policy: &ToyPolicy, env: &EnvConfig) -> Result<EvalSummary, EnvError> {
    let (mut accuracy, mut greedy_accuracy) = (0.0, 0.0);
    let (mut reward, mut r_img, mut r_obj) = (0.0, 0.0, 0.0);
    for i in 0..env.eval_tasks {
        let task = generate_task(env.eval_seed.wrapping_add(u64::from(i)), env)?;
        let features = TaskFeatures::new(&task, policy.grid_size);
        let dist = ActionDistribution::new(policy, &features);
        let greedy = dist.greedy();
        for (n, c, logp) in dist.actions() {
            let p = logp.exp();
            let action = ActionRecord::new(&task, policy.grid_size, n as u32 + 1, c as u32)?;
            let text = render_response(&action, &task);
            let correct = if is_correct(&text, &task.ground_truth) { 1.0 } else { 0.0 };
            let r = score_response(&text, &task.ground_truth);
            accuracy += p * correct;
            reward += p * r.total;
            r_img += p * r.r_img;
            r_obj += p * r.r_obj;
            if (n, c) == greedy {
                greedy_accuracy += correct;
            }
        }
    }
    let n = f64::from(env.eval_tasks.max(1));
    Ok(EvalSummary {
        tasks: env.eval_tasks as usize,
        accuracy: accuracy / n,
        greedy_accuracy: greedy_accuracy / n,
        mean_reward: reward / n,
        mean_r_img: r_img / n,
        mean_r_obj: r_obj / n,
    })
}

pub fn train_loop(grpo: &GrpoConfig, env: &EnvConfig) -> Result<TrainingReport, TrainError> {
    train_loop_with(grpo, env, |_| {})
}

/// Runs training, calling `on_iteration` after every policy update.
pub fn train_loop_with(
    grpo: &GrpoConfig,
    env: &EnvConfig,
    mut on_iteration: impl FnMut(&IterationMetrics),
) -> Result<TrainingReport, TrainError> {
    grpo.validate()?;
    env.validate()?;

    let reference = ToyPolicy::uniform(env.grid_size);
    let mut policy = reference.clone();
    let initial_eval = evaluate_policy(&policy, env)?;
    let mut rng = ChaCha8Rng::seed_from_u64(grpo.seed);
    let mut iterations = Vec::with_capacity(grpo.iterations);

    for iteration in 1..=grpo.iterations {
        let task_seed = rng.next_u64();
        let task = generate_task(task_seed, env)?;
        let features = TaskFeatures::new(&task, policy.grid_size);
        let old = ActionDistribution::new(&policy, &features);

        let responses = (0..grpo.group_size)
            .map(|_| {
                let (n, c) = old.sample(&mut rng);
                let action = ActionRecord::new(&task, policy.grid_size, n as u32 + 1, c as u32)?;
                let text = render_response(&action, &task);
                let reward = score_response(&text, &task.ground_truth);
                let logprob = old.logprob(n, c);
                Ok(ResponseRecord {
                    action,
                    text,
                    reward,
                    logprob_old: logprob,
                    logprob_current: logprob,
                })
            })
            .collect::<Result<Vec<_>, EnvError>>()?;

        let group = RolloutGroup::new(task_seed, responses, |r| grpo.training_reward(r), grpo.std_epsilon)?;
        let kl = kl_divergence(&policy, &reference, &task)?;
        let objective = grpo_objective(&group, kl, grpo.kl_coefficient);
        let gradient = grpo_gradient(&group, &policy, &reference, &task, grpo.kl_coefficient)?;
        policy = update_policy(&policy, &gradient, grpo.learning_rate)?;

        let size = group.len() as f64;
        let mean = |f: &dyn Fn(&ResponseRecord) -> f64| group.responses().iter().map(f).sum::<f64>() / size;
        let metrics = IterationMetrics {
            iteration,
            mean_reward: mean(&|r| grpo.training_reward(&r.reward)),
            mean_r_img: mean(&|r| r.reward.r_img),
            mean_r_obj: mean(&|r| r.reward.r_obj),
            kl,
            objective,
        };
        on_iteration(&metrics);
        iterations.push(metrics);
    }

    let final_eval = if grpo.iterations == 0 {
        initial_eval.clone()
    } else {
        evaluate_policy(&policy, env)?
    };
    Ok(TrainingReport {
        initial_eval,
        final_eval,
        iterations,
        policy,
    })
}
