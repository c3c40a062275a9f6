//! Stage-2 optimization: episode returns, group-relative advantages
//! (standard, leave-one-out, and the binary refinement advantage), the
//! clipped surrogate with KL regularization against a frozen reference, and
//! the two training drivers (plain group RL and the alternating
//! simulation/policy-improvement schedule).

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::TaskInstance;
use crate::policy::{TabularPolicy, TabularSoftmaxParams, WithOracleRefiner};
use crate::rollout::{run_plain_episode, TrajectoryRecord};
use crate::simrollout::sim_rollout_episode;
use crate::{derive_seed, derive_seed2};

/// Variance floor below which a group is treated as zero-variance and its
/// advantages are zeroed instead of divided by noise.
pub const STD_GUARD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvantageMethod {
    Grpo,
    Rloo,
}

/// Who refines during simulation-improvement rollouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefinerKind {
    /// The tabular policy's own refinement rows.
    SelfRefine,
    /// The breadth-first solver as a perfect refiner.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Sim,
    Policy,
}

impl Phase {
    pub fn label(&self) -> &'static str {
        match self {
            Phase::Sim => "sim",
            Phase::Policy => "policy",
        }
    }
}

/// Hyperparameters shared by all training methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Group size G: episodes per task per optimizer step.
    pub group_size: usize,
    /// Outer iterations N of the alternating schedule.
    pub outer_iterations: usize,
    /// Simulation-improvement steps per outer iteration.
    pub sim_steps: usize,
    /// Policy-improvement steps per outer iteration.
    pub policy_steps: usize,
    /// Total optimizer steps for the non-alternating methods.
    pub steps: usize,
    pub epsilon_clip: f64,
    pub beta_kl: f64,
    pub learning_rate: f64,
    /// Tasks sampled per optimizer step.
    pub batch_tasks: usize,
    pub seed: u64,
    pub history_window: usize,
    pub refine_depth: usize,
    pub plan_depth: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{field} must be positive")]
    NotPositive { field: &'static str },
    #[error("group_size must be even for the alternating schedule (got {0})")]
    OddGroup(usize),
    #[error("group_size must be at least 2 for group advantages (got {0})")]
    GroupTooSmall(usize),
}

impl TrainConfig {
    pub fn validate(&self, alternating: bool) -> Result<(), ConfigError> {
        if self.group_size < 2 {
            return Err(ConfigError::GroupTooSmall(self.group_size));
        }
        if alternating && self.group_size % 2 != 0 {
            return Err(ConfigError::OddGroup(self.group_size));
        }
        for (field, ok) in [
            ("batch_tasks", self.batch_tasks >= 1),
            ("epsilon_clip", self.epsilon_clip > 0.0),
            ("learning_rate", self.learning_rate >= 0.0),
            ("beta_kl", self.beta_kl >= 0.0),
        ] {
            if !ok {
                return Err(ConfigError::NotPositive { field });
            }
        }
        Ok(())
    }

    /// Total optimizer steps of the alternating schedule.
    pub fn alternating_steps(&self) -> usize {
        self.outer_iterations * (self.sim_steps + self.policy_steps)
    }

    /// Phase of a global step index under the alternating schedule.
    pub fn phase_of(&self, step: usize) -> Phase {
        let cycle = self.sim_steps + self.policy_steps;
        if cycle == 0 || step % cycle >= self.sim_steps {
            Phase::Policy
        } else {
            Phase::Sim
        }
    }
}

// ---------------------------------------------------------------------------
// Returns and advantages
// ---------------------------------------------------------------------------

/// Sum of step rewards over a complete episode.
pub fn episode_return(records: &[TrajectoryRecord]) -> f64 {
    records.iter().map(|r| r.reward).sum()
}

/// Group-normalized advantages (r - mean) / population std, zeroed when the
/// group has no variance.
pub fn advantage_grpo(returns: &[f64]) -> Vec<f64> {
    assert!(returns.len() >= 2, "need a group of at least 2");
    let g = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / g;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g;
    let std = var.sqrt();
    if std < STD_GUARD {
        log::debug!("zero-variance group of {} returns; advantages zeroed", returns.len());
        return vec![0.0; returns.len()];
    }
    returns.iter().map(|r| (r - mean) / std).collect()
}

/// Leave-one-out advantages: each return against the mean of the others.
pub fn advantage_rloo(returns: &[f64]) -> Vec<f64> {
    assert!(returns.len() >= 2, "need a group of at least 2");
    let g = returns.len() as f64;
    let sum: f64 = returns.iter().sum();
    returns.iter().map(|r| r - (sum - r) / (g - 1.0)).collect()
}

/// Binary refinement advantage: 1 only for refinements that succeed and
/// strictly beat both group-mean returns.
pub fn advantage_refine(
    refine_returns: &[f64],
    refine_success: &[bool],
    mean_plain: f64,
    mean_refine: f64,
) -> Vec<f64> {
    assert_eq!(refine_returns.len(), refine_success.len());
    let bar = mean_plain.max(mean_refine);
    refine_returns
        .iter()
        .zip(refine_success)
        .map(|(&r, &ok)| if ok && r > bar { 1.0 } else { 0.0 })
        .collect()
}

/// Clipped surrogate for one sample: min(rho A, clip(rho, 1 +- eps) A)
/// minus the KL penalty.
pub fn surrogate_objective(ratio: f64, advantage: f64, epsilon: f64, kl: f64, beta: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
    (ratio * advantage).min(clipped * advantage) - beta * kl
}

/// Nonnegative per-sample KL estimator r - log r - 1 with
/// r = exp(logp_ref - logp_new).
pub fn kl_estimate(logp_new: f64, logp_ref: f64) -> f64 {
    let diff = logp_ref - logp_new;
    (diff.exp() - diff - 1.0).max(0.0)
}

// ---------------------------------------------------------------------------
// Batch surrogate over the tabular policy
// ---------------------------------------------------------------------------

/// One gradient sample: an observation key, the executed action, its
/// broadcast episode advantage, and the behaviour logprob the ratio is
/// anchored to.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleStep {
    pub key: String,
    pub action: crate::env::ActionPrimitive,
    pub advantage: f64,
    pub old_logprob: f64,
}

/// Mean surrogate value over a batch of samples.
pub fn surrogate_batch_value(
    params: &TabularSoftmaxParams,
    ref_params: &TabularSoftmaxParams,
    samples: &[SampleStep],
    epsilon: f64,
    beta: f64,
) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let total: f64 = samples
        .iter()
        .map(|s| {
            let logp = params.logprob(&s.key, s.action);
            let ratio = (logp - s.old_logprob).exp();
            let kl = kl_estimate(logp, ref_params.logprob(&s.key, s.action));
            surrogate_objective(ratio, s.advantage, epsilon, kl, beta)
        })
        .sum();
    total / samples.len() as f64
}

/// Exact gradient of [`surrogate_batch_value`] with respect to every touched
/// logit row.
pub fn surrogate_batch_grad(
    params: &TabularSoftmaxParams,
    ref_params: &TabularSoftmaxParams,
    samples: &[SampleStep],
    epsilon: f64,
    beta: f64,
) -> BTreeMap<String, [f64; 4]> {
    let mut grad: BTreeMap<String, [f64; 4]> = BTreeMap::new();
    if samples.is_empty() {
        return grad;
    }
    let n = samples.len() as f64;
    for s in samples {
        let (logp, glogp) = params.logprob_and_grad(&s.key, s.action);
        let ratio = (logp - s.old_logprob).exp();
        let unclipped = ratio * s.advantage;
        let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * s.advantage;
        // When the clipped branch is strictly smaller the ratio sits outside
        // the clip interval, where the clamp has zero slope.
        let pg_coeff = if unclipped <= clipped {
            s.advantage * ratio
        } else {
            0.0
        };
        let r_ref = (ref_params.logprob(&s.key, s.action) - logp).exp();
        let kl_coeff = -beta * (1.0 - r_ref);
        let coeff = (pg_coeff + kl_coeff) / n;
        let row = grad.entry(s.key.clone()).or_insert([0.0; 4]);
        for (g, dl) in row.iter_mut().zip(glogp) {
            *g += coeff * dl;
        }
    }
    grad
}

/// Gradient-ascent update of the logit table.
pub fn apply_gradient(
    params: &mut TabularSoftmaxParams,
    grad: &BTreeMap<String, [f64; 4]>,
    learning_rate: f64,
) {
    if learning_rate == 0.0 {
        return;
    }
    for (key, row) in grad {
        let target = params.row_mut(key);
        for (t, g) in target.iter_mut().zip(row) {
            *t += learning_rate * g;
        }
    }
}

// ---------------------------------------------------------------------------
// Training drivers
// ---------------------------------------------------------------------------

/// One line of the training log, emitted per optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub phase: String,
    pub mean_return: f64,
    pub success_rate: f64,
    pub mean_advantage_abs: f64,
    pub kl_mean: f64,
    pub refine_positive_fraction: f64,
    pub wallclock_ms: u64,
}

/// Mutable training state; checkpointable and resumable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub params: TabularSoftmaxParams,
    /// KL reference, frozen at training start.
    pub ref_params: TabularSoftmaxParams,
    pub next_step: usize,
}

impl TrainState {
    pub fn fresh(temperature: f64) -> Self {
        let params = TabularSoftmaxParams::new(temperature);
        TrainState {
            ref_params: params.clone(),
            params,
            next_step: 0,
        }
    }
}

/// Deterministic without-replacement batch of task indices for one step.
fn batch_indices(n_tasks: usize, batch: usize, seed: u64) -> Vec<usize> {
    use rand::Rng;
    use rand::SeedableRng;
    let mut indices: Vec<usize> = (0..n_tasks).collect();
    if batch >= n_tasks {
        return indices;
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for i in 0..batch {
        let j = rng.random_range(i..n_tasks);
        indices.swap(i, j);
    }
    indices.truncate(batch);
    indices
}

struct StepMetrics {
    mean_return: f64,
    success_rate: f64,
    mean_advantage_abs: f64,
    kl_mean: f64,
    refine_positive_fraction: f64,
}

fn kl_mean_over(params: &TabularSoftmaxParams, ref_params: &TabularSoftmaxParams, samples: &[SampleStep]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples
        .iter()
        .map(|s| kl_estimate(params.logprob(&s.key, s.action), ref_params.logprob(&s.key, s.action)))
        .sum::<f64>()
        / samples.len() as f64
}

fn samples_from_records(
    params: &TabularSoftmaxParams,
    records: &[TrajectoryRecord],
    advantage: f64,
    out: &mut Vec<SampleStep>,
) {
    for rec in records {
        if rec.parse_failed {
            continue;
        }
        out.push(SampleStep {
            old_logprob: params.logprob(&rec.observation_key, rec.response.action),
            key: rec.observation_key.clone(),
            action: rec.response.action,
            advantage,
        });
    }
}

/// One plain group-RL step: sample tasks, roll G episodes each, normalize
/// returns within each group, and take one clipped-surrogate ascent step.
fn plain_step(
    state: &mut TrainState,
    tasks: &[TaskInstance],
    cfg: &TrainConfig,
    method: AdvantageMethod,
    step: usize,
) -> StepMetrics {
    let step_seed = derive_seed2(cfg.seed, step as u64, 0);
    let batch = batch_indices(tasks.len(), cfg.batch_tasks, derive_seed(step_seed, 0));

    let episodes: Vec<Vec<crate::rollout::EpisodeResult>> = batch
        .par_iter()
        .enumerate()
        .map(|(slot, &task_idx)| {
            let policy = TabularPolicy::new(&state.params, cfg.plan_depth);
            (0..cfg.group_size)
                .map(|g| {
                    run_plain_episode(
                        &tasks[task_idx],
                        &policy,
                        cfg.history_window,
                        derive_seed2(step_seed, 1 + slot as u64, g as u64),
                    )
                })
                .collect()
        })
        .collect();

    let mut samples = Vec::new();
    let mut adv_abs_sum = 0.0;
    let mut adv_count = 0usize;
    let mut return_sum = 0.0;
    let mut success_sum = 0usize;
    let mut episode_count = 0usize;

    for group in &episodes {
        let returns: Vec<f64> = group.iter().map(|e| e.outcome.total_return).collect();
        let advantages = match method {
            AdvantageMethod::Grpo => advantage_grpo(&returns),
            AdvantageMethod::Rloo => advantage_rloo(&returns),
        };
        for (episode, &adv) in group.iter().zip(&advantages) {
            samples_from_records(&state.params, &episode.records, adv, &mut samples);
            adv_abs_sum += adv.abs();
            adv_count += 1;
            return_sum += episode.outcome.total_return;
            success_sum += episode.outcome.success as usize;
            episode_count += 1;
        }
    }

    let kl_mean = kl_mean_over(&state.params, &state.ref_params, &samples);
    let grad = surrogate_batch_grad(
        &state.params,
        &state.ref_params,
        &samples,
        cfg.epsilon_clip,
        cfg.beta_kl,
    );
    apply_gradient(&mut state.params, &grad, cfg.learning_rate);

    StepMetrics {
        mean_return: return_sum / episode_count.max(1) as f64,
        success_rate: success_sum as f64 / episode_count.max(1) as f64,
        mean_advantage_abs: adv_abs_sum / adv_count.max(1) as f64,
        kl_mean,
        refine_positive_fraction: 0.0,
    }
}

/// One simulation-improvement step: half the group rolls with refinement,
/// half plain; one update on the combined group, then a separate update on
/// the refinement stream with the binary advantage.
fn sim_step(
    state: &mut TrainState,
    tasks: &[TaskInstance],
    cfg: &TrainConfig,
    refiner: RefinerKind,
    step: usize,
) -> StepMetrics {
    let step_seed = derive_seed2(cfg.seed, step as u64, 0);
    let batch = batch_indices(tasks.len(), cfg.batch_tasks, derive_seed(step_seed, 0));
    let half = cfg.group_size / 2;

    type SimResult = (
        Vec<(Vec<TrajectoryRecord>, Vec<TrajectoryRecord>, crate::rollout::EpisodeOutcome)>,
        Vec<crate::rollout::EpisodeResult>,
    );
    let rollouts: Vec<SimResult> = batch
        .par_iter()
        .enumerate()
        .map(|(slot, &task_idx)| {
            let task = &tasks[task_idx];
            let sim: Vec<_> = (0..half)
                .map(|g| {
                    let seed = derive_seed2(step_seed, 1 + slot as u64, g as u64);
                    match refiner {
                        RefinerKind::SelfRefine => {
                            let policy = TabularPolicy::new(&state.params, cfg.plan_depth);
                            sim_rollout_episode(task, &policy, cfg.refine_depth, cfg.history_window, seed)
                        }
                        RefinerKind::Oracle => {
                            let policy =
                                WithOracleRefiner(TabularPolicy::new(&state.params, cfg.plan_depth));
                            sim_rollout_episode(task, &policy, cfg.refine_depth, cfg.history_window, seed)
                        }
                    }
                })
                .collect();
            let plain: Vec<_> = (half..cfg.group_size)
                .map(|g| {
                    let policy = TabularPolicy::new(&state.params, cfg.plan_depth);
                    run_plain_episode(
                        task,
                        &policy,
                        cfg.history_window,
                        derive_seed2(step_seed, 1 + slot as u64, g as u64),
                    )
                })
                .collect();
            (sim, plain)
        })
        .collect();

    let mut combined_samples = Vec::new();
    let mut refine_samples = Vec::new();
    let mut adv_abs_sum = 0.0;
    let mut adv_count = 0usize;
    let mut return_sum = 0.0;
    let mut success_sum = 0usize;
    let mut episode_count = 0usize;
    let mut refine_positive = 0usize;
    let mut refine_total = 0usize;

    for (sim, plain) in &rollouts {
        let refined_returns: Vec<f64> = sim.iter().map(|(_, _, o)| o.total_return).collect();
        let plain_returns: Vec<f64> = plain.iter().map(|e| e.outcome.total_return).collect();
        let mut combined_returns = refined_returns.clone();
        combined_returns.extend(&plain_returns);
        let advantages = advantage_grpo(&combined_returns);

        for (i, (plain_records, _, outcome)) in sim.iter().enumerate() {
            samples_from_records(&state.params, plain_records, advantages[i], &mut combined_samples);
            return_sum += outcome.total_return;
            success_sum += outcome.success as usize;
            episode_count += 1;
        }
        for (j, episode) in plain.iter().enumerate() {
            samples_from_records(
                &state.params,
                &episode.records,
                advantages[half + j],
                &mut combined_samples,
            );
            return_sum += episode.outcome.total_return;
            success_sum += episode.outcome.success as usize;
            episode_count += 1;
        }
        adv_abs_sum += advantages.iter().map(|a| a.abs()).sum::<f64>();
        adv_count += advantages.len();

        let mean_refine = refined_returns.iter().sum::<f64>() / half.max(1) as f64;
        let mean_plain = plain_returns.iter().sum::<f64>() / half.max(1) as f64;
        let refine_success: Vec<bool> = sim.iter().map(|(_, _, o)| o.success).collect();
        let refine_adv =
            advantage_refine(&refined_returns, &refine_success, mean_plain, mean_refine);
        for ((_, refine_records, _), &adv) in sim.iter().zip(&refine_adv) {
            samples_from_records(&state.params, refine_records, adv, &mut refine_samples);
            refine_positive += (adv == 1.0) as usize;
            refine_total += 1;
        }
    }

    let kl_mean = kl_mean_over(&state.params, &state.ref_params, &combined_samples);

    let grad = surrogate_batch_grad(
        &state.params,
        &state.ref_params,
        &combined_samples,
        cfg.epsilon_clip,
        cfg.beta_kl,
    );
    apply_gradient(&mut state.params, &grad, cfg.learning_rate);

    let refine_grad = surrogate_batch_grad(
        &state.params,
        &state.ref_params,
        &refine_samples,
        cfg.epsilon_clip,
        cfg.beta_kl,
    );
    apply_gradient(&mut state.params, &refine_grad, cfg.learning_rate);

    StepMetrics {
        mean_return: return_sum / episode_count.max(1) as f64,
        success_rate: success_sum as f64 / episode_count.max(1) as f64,
        mean_advantage_abs: adv_abs_sum / adv_count.max(1) as f64,
        kl_mean,
        refine_positive_fraction: refine_positive as f64 / refine_total.max(1) as f64,
    }
}

fn run_step(
    state: &mut TrainState,
    tasks: &[TaskInstance],
    cfg: &TrainConfig,
    method: AdvantageMethod,
    refiner: RefinerKind,
    phase: Phase,
    step: usize,
) -> TrainLogEntry {
    let started = Instant::now();
    let metrics = match phase {
        Phase::Policy => plain_step(state, tasks, cfg, method, step),
        Phase::Sim => sim_step(state, tasks, cfg, refiner, step),
    };
    state.next_step = step + 1;
    TrainLogEntry {
        step,
        phase: phase.label().to_string(),
        mean_return: metrics.mean_return,
        success_rate: metrics.success_rate,
        mean_advantage_abs: metrics.mean_advantage_abs,
        kl_mean: metrics.kl_mean,
        refine_positive_fraction: metrics.refine_positive_fraction,
        wallclock_ms: started.elapsed().as_millis() as u64,
    }
}

/// Plain group-RL training (standard or leave-one-out advantages) for
/// `cfg.steps` optimizer steps. Resumes from `state.next_step`; `on_step`
/// fires after every step for logging and checkpointing.
pub fn train_grpo(
    state: &mut TrainState,
    tasks: &[TaskInstance],
    cfg: &TrainConfig,
    method: AdvantageMethod,
    on_step: &mut dyn FnMut(&TrainLogEntry, &TrainState),
) -> Result<Vec<TrainLogEntry>, ConfigError> {
    cfg.validate(false)?;
    let mut log = Vec::new();
    for step in state.next_step..cfg.steps {
        let entry = run_step(
            state,
            tasks,
            cfg,
            method,
            RefinerKind::SelfRefine,
            Phase::Policy,
            step,
        );
        on_step(&entry, state);
        log.push(entry);
    }
    Ok(log)
}

/// Alternating simulation-improvement / policy-improvement training for
/// `outer_iterations * (sim_steps + policy_steps)` optimizer steps. With
/// `sim_steps == 0` this reduces exactly to [`train_grpo`] given equal
/// seeds, step counts, and hyperparameters.
pub fn train_dyna(
    state: &mut TrainState,
    tasks: &[TaskInstance],
    cfg: &TrainConfig,
    refiner: RefinerKind,
    on_step: &mut dyn FnMut(&TrainLogEntry, &TrainState),
) -> Result<Vec<TrainLogEntry>, ConfigError> {
    cfg.validate(true)?;
    let total = cfg.alternating_steps();
    let mut log = Vec::new();
    for step in state.next_step..total {
        let phase = cfg.phase_of(step);
        let entry = run_step(state, tasks, cfg, AdvantageMethod::Grpo, refiner, phase, step);
        on_step(&entry, state);
        log.push(entry);
    }
    Ok(log)
}

/// Sampled success rate of the current parameters: `episodes_per_task`
/// rollouts for every task, seeded independently of training.
pub fn evaluate_success(
    params: &TabularSoftmaxParams,
    tasks: &[TaskInstance],
    episodes_per_task: usize,
    h: usize,
    plan_depth: usize,
    seed: u64,
) -> f64 {
    if tasks.is_empty() || episodes_per_task == 0 {
        return 0.0;
    }
    let successes: usize = tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let policy = TabularPolicy::new(params, plan_depth);
            (0..episodes_per_task)
                .filter(|&r| {
                    run_plain_episode(task, &policy, h, derive_seed2(seed, i as u64, r as u64))
                        .outcome
                        .success
                })
                .count()
        })
        .sum();
    successes as f64 / (tasks.len() * episodes_per_task) as f64
}
