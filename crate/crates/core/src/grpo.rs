//! Group-standardized advantages and the KL-regularized training step.
//!
//! For each task a group of `n` samples is scored, rewards are standardized
//! within the group,
//!
//! ```text
//! mean = (1/n) sum_j r_j
//! s    = sqrt((1/n) sum_j (r_j - mean)^2 + eps)
//! A_i  = (r_i - mean) / s
//! ```
//!
//! and the policy ascends `sum_i A_i grad log pi(o_i | q)` minus
//! `lambda * grad KL(pi(.|q) || pi_ref(.|q))`, with the KL gradient taken
//! analytically at every prompt the group visited. Samples are used once,
//! on-policy, so there is no importance ratio or clipping.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::policy::{
    grad_log_prob, kl_divergence, kl_logit_gradient, snapshot_reference, GradientAccumulator,
    Policy, PromptContext, ReferencePolicy, TrainablePolicy,
};
use crate::recycle::{recycle_groups, recycled_to_tasks, JudgmentTask, MixConfig, RecycleQueue, SourceSet};
use crate::rng::{stream_rng, tag};
use crate::rollout::{sample_group, RolloutGroup, DEFAULT_GROUP_SIZE};
use crate::tasks::{Task, TaskSet};
use crate::verifier::Reward;

pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_KL_COEF: f64 = 0.01;
pub const DEFAULT_TABULAR_STEP: f64 = 0.1;
pub const DEFAULT_MLP_STEP: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageSet {
    pub values: Vec<f64>,
    pub mean_reward: f64,
    pub std: f64,
    pub epsilon: f64,
}

/// Standardizes binary rewards within a group (population variance).
pub fn compute_advantages(rewards: &[Reward], epsilon: f64) -> Result<AdvantageSet> {
    if rewards.len() < 2 {
        return Err(Error::Param(format!(
            "need at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Param(format!("epsilon {epsilon} must be positive")));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().map(|r| r.value()).sum::<f64>() / n;
    let variance = rewards
        .iter()
        .map(|r| (r.value() - mean).powi(2))
        .sum::<f64>()
        / n;
    let std = (variance + epsilon).sqrt();
    Ok(AdvantageSet {
        values: rewards.iter().map(|r| (r.value() - mean) / std).collect(),
        mean_reward: mean,
        std,
        epsilon,
    })
}

/// A scored group whose samples can be attributed to visited prompts.
pub trait ScoredGroup {
    fn rewards(&self) -> &[Reward];

    /// Each distinct prompt the group sampled from, with the
    /// `(action, sample index)` pairs drawn there.
    fn visits(&self) -> Vec<(PromptContext<'_>, Vec<(usize, usize)>)>;
}

impl ScoredGroup for RolloutGroup {
    fn rewards(&self) -> &[Reward] {
        &self.rewards
    }

    fn visits(&self) -> Vec<(PromptContext<'_>, Vec<(usize, usize)>)> {
        let cot_actions = self
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.cot_action as usize, i))
            .collect();
        let mut by_cot: BTreeMap<i64, Vec<(usize, usize)>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            by_cot
                .entry(s.cot_action)
                .or_default()
                .push((s.answer_action as usize, i));
        }
        let mut visits = vec![(PromptContext::solve_cot(&self.task), cot_actions)];
        visits.extend(
            by_cot
                .into_iter()
                .map(|(cot, actions)| (PromptContext::solve_answer(&self.task, cot), actions)),
        );
        visits
    }
}

/// `n` single-action samples for one judgment task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgmentGroup {
    pub task: JudgmentTask,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<Reward>,
}

impl ScoredGroup for JudgmentGroup {
    fn rewards(&self) -> &[Reward] {
        &self.rewards
    }

    fn visits(&self) -> Vec<(PromptContext<'_>, Vec<(usize, usize)>)> {
        vec![(
            self.task.prompt(),
            self.actions.iter().copied().zip(0..).collect(),
        )]
    }
}

pub fn sample_judgment_group<P, R>(policy: &P, task: &JudgmentTask, n: usize, rng: &mut R) -> Result<JudgmentGroup>
where
    P: Policy + ?Sized,
    R: Rng + ?Sized,
{
    if n < 2 {
        return Err(Error::Param(format!("group size {n} must be at least 2")));
    }
    let dist = policy.action_distribution(&task.prompt())?;
    let actions: Vec<usize> = (0..n).map(|_| dist.sample(rng)).collect();
    Ok(JudgmentGroup {
        task: task.clone(),
        log_probs: actions.iter().map(|a| dist.log_probs[*a]).collect(),
        rewards: actions.iter().map(|a| Reward::from_bool(*a == task.gold)).collect(),
        actions,
    })
}

/// Gradient of one group plus the KL it measured on the way.
#[derive(Debug, Clone)]
pub struct GroupGradient {
    pub gradient: GradientAccumulator,
    pub kl_sum: f64,
    pub visited: usize,
}

pub fn group_gradient_with_kl<P, Q, G>(
    group: &G,
    adv: &AdvantageSet,
    policy: &P,
    reference: &Q,
    lambda: f64,
) -> Result<GroupGradient>
where
    P: TrainablePolicy,
    Q: Policy + ?Sized,
    G: ScoredGroup + ?Sized,
{
    if adv.values.len() != group.rewards().len() {
        return Err(Error::Contract(format!(
            "{} advantages for a group of {}",
            adv.values.len(),
            group.rewards().len()
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Param(format!("kl coefficient {lambda} must be >= 0")));
    }
    let mut acc = policy.zero_gradient();
    let mut kl_sum = 0.0;
    let visits = group.visits();
    let visited = visits.len();
    for (prompt, taken) in visits {
        let p = policy.action_distribution(&prompt)?;
        let mut dlogits = vec![0.0; p.len()];
        for &(action, i) in &taken {
            let a = adv.values[i];
            if a == 0.0 {
                continue;
            }
            if action >= p.len() {
                return Err(Error::Contract(format!("action {action} outside vocabulary")));
            }
            for (d, pk) in dlogits.iter_mut().zip(&p.probabilities) {
                *d -= a * pk;
            }
            dlogits[action] += a;
        }
        let q = reference.action_distribution(&prompt)?;
        kl_sum += kl_divergence(&p, &q);
        if lambda > 0.0 {
            for (d, g) in dlogits.iter_mut().zip(kl_logit_gradient(&p, &q)) {
                *d -= lambda * g;
            }
        }
        if dlogits.iter().any(|d| *d != 0.0) {
            policy.backprop_logits(&prompt, &dlogits, &mut acc)?;
        }
        acc.sample_count += taken.len();
    }
    Ok(GroupGradient {
        gradient: acc,
        kl_sum,
        visited,
    })
}

/// `sum_i A_i grad log pi(o_i) - lambda * sum_prompts grad KL(pi || pi_ref)`.
pub fn group_gradient<P, Q, G>(group: &G, adv: &AdvantageSet, policy: &P, reference: &Q, lambda: f64) -> Result<GradientAccumulator>
where
    P: TrainablePolicy,
    Q: Policy + ?Sized,
    G: ScoredGroup + ?Sized,
{
    Ok(group_gradient_with_kl(group, adv, policy, reference, lambda)?.gradient)
}

/// How recycled judgment tasks enter the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecycleObjective {
    /// Sampled groups scored against the derived gold, like solve tasks.
    Grpo,
    /// Log-likelihood of the derived gold action.
    Supervised,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecycleConfig {
    pub sources: SourceSet,
    pub mix: MixConfig,
    pub max_pairs: usize,
    /// Judgment tasks drained from the queue per step.
    pub quota: usize,
    pub objective: RecycleObjective,
}

impl RecycleConfig {
    /// Equal thirds of a `2n` budget, both sources.
    pub fn default_for(group_size: usize) -> Self {
        RecycleConfig {
            sources: SourceSet::BOTH,
            mix: MixConfig::thirds(2 * group_size),
            max_pairs: 4,
            quota: 2 * group_size,
            objective: RecycleObjective::Grpo,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub group_size: usize,
    pub epsilon: f64,
    pub kl_coef: f64,
    pub step_size: f64,
    pub batch_size: usize,
    /// Re-snapshot the reference every this many steps; 0 keeps it fixed.
    pub ref_refresh: usize,
    /// `None` trains the solver only.
    pub recycle: Option<RecycleConfig>,
    pub workers: usize,
}

impl TrainConfig {
    pub fn new(seed: u64, step_size: f64) -> Self {
        TrainConfig {
            seed,
            group_size: DEFAULT_GROUP_SIZE,
            epsilon: DEFAULT_EPSILON,
            kl_coef: DEFAULT_KL_COEF,
            step_size,
            batch_size: 8,
            ref_refresh: 0,
            recycle: Some(RecycleConfig::default_for(DEFAULT_GROUP_SIZE)),
            workers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Param("group_size must be at least 2".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Param("epsilon must be positive".into()));
        }
        if !(self.kl_coef >= 0.0 && self.kl_coef.is_finite()) {
            return Err(Error::Param("kl_coef must be >= 0".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Param("step_size must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Param("batch_size must be at least 1".into()));
        }
        if let Some(r) = &self.recycle {
            r.mix.validate()?;
        }
        Ok(())
    }
}

/// Per-step telemetry, one JSONL line each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step_index: u64,
    pub mean_reward: f64,
    pub mean_advantage_abs: f64,
    pub kl_value: f64,
    pub objective_estimate: f64,
    /// Drained judgment tasks per kind: pointwise, pairwise, reflect.
    pub recycled_counts: [usize; 3],
    pub recycled_mean_reward: f64,
    pub queue_len: usize,
}

struct TaskOutcome {
    group: RolloutGroup,
    grad: GroupGradient,
    adv_abs: f64,
}

/// One update: solve groups for `batch`, recycle them, drain the queue
/// through the same group-relative pipeline, and take one ascent step.
pub fn train_step<P: TrainablePolicy>(
    policy: &mut P,
    reference: &ReferencePolicy<P>,
    batch: &[Task],
    queue: &mut RecycleQueue,
    config: &TrainConfig,
    step_index: u64,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::Param("training batch is empty".into()));
    }
    let n = config.group_size;
    let eps = config.epsilon;
    let lambda = config.kl_coef;
    let frozen: &P = policy;

    let outcomes: Vec<TaskOutcome> = par::map(batch, config.workers, |i, task| {
        let mut rng = stream_rng(config.seed, &[tag::ROLLOUT, step_index, i as u64]);
        let group = sample_group(frozen, task, n, &mut rng)?;
        let adv = compute_advantages(&group.rewards, eps)?;
        let grad = group_gradient_with_kl(&group, &adv, frozen, reference, lambda)?;
        let adv_abs = adv.values.iter().map(|a| a.abs()).sum::<f64>();
        Ok(TaskOutcome { group, grad, adv_abs })
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let mut drained = Vec::new();
    if let Some(rc) = &config.recycle {
        let groups: Vec<RolloutGroup> = outcomes.iter().map(|o| o.group.clone()).collect();
        let mut rng = stream_rng(config.seed, &[tag::RECYCLE, step_index]);
        let recycled = recycle_groups(&groups, rc.sources, rc.max_pairs, &rc.mix, step_index, &mut rng);
        queue.push(recycled_to_tasks(&recycled)?);
        drained = queue.drain(rc.quota);
    }
    let objective = config.recycle.map(|r| r.objective);

    let judged: Vec<(GradientAccumulator, f64)> = par::map(&drained, config.workers, |j, jt| {
        let mut rng = stream_rng(config.seed, &[tag::RECYCLED_ROLLOUT, step_index, j as u64]);
        match objective {
            Some(RecycleObjective::Supervised) => {
                let mut acc = frozen.zero_gradient();
                grad_log_prob(frozen, &jt.prompt(), jt.gold, 1.0, &mut acc)?;
                let p = frozen.action_distribution(&jt.prompt())?;
                Ok((acc, p.probabilities[jt.gold]))
            }
            _ => {
                let group = sample_judgment_group(frozen, jt, n, &mut rng)?;
                let adv = compute_advantages(&group.rewards, eps)?;
                let grad = group_gradient(&group, &adv, frozen, reference, lambda)?;
                let mean = group.rewards.iter().map(|r| r.value()).sum::<f64>() / n as f64;
                Ok((grad, mean))
            }
        }
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let mut total = policy.zero_gradient();
    let mut reward_sum = 0.0;
    let mut adv_abs_sum = 0.0;
    let mut kl_sum = 0.0;
    let mut visited = 0;
    let mut samples = 0;
    for o in &outcomes {
        total.merge(&o.grad.gradient)?;
        reward_sum += o.group.rewards.iter().map(|r| r.value()).sum::<f64>();
        adv_abs_sum += o.adv_abs;
        kl_sum += o.grad.kl_sum;
        visited += o.grad.visited;
        samples += o.group.len();
    }
    let mut recycled_counts = [0; 3];
    let mut recycled_reward = 0.0;
    for (jt, (grad, mean)) in drained.iter().zip(&judged) {
        total.merge(grad)?;
        recycled_counts[jt.kind.index()] += 1;
        recycled_reward += mean;
    }
    policy.apply_gradient(&total, config.step_size)?;

    let mean_reward = reward_sum / samples as f64;
    let kl_value = kl_sum / visited.max(1) as f64;
    Ok(StepReport {
        step_index,
        mean_reward,
        mean_advantage_abs: adv_abs_sum / samples as f64,
        kl_value,
        objective_estimate: mean_reward - lambda * kl_value,
        recycled_counts,
        recycled_mean_reward: if drained.is_empty() {
            0.0
        } else {
            recycled_reward / drained.len() as f64
        },
        queue_len: queue.len(),
    })
}

/// Batch for one step: distinct tasks drawn from the run seed and step.
pub fn select_batch(tasks: &TaskSet, batch_size: usize, seed: u64, step_index: u64) -> Vec<Task> {
    let size = batch_size.min(tasks.len());
    let mut rng = stream_rng(seed, &[tag::BATCH, step_index]);
    index::sample(&mut rng, tasks.len(), size)
        .into_iter()
        .map(|i| tasks.tasks()[i].clone())
        .collect()
}

/// Owns the policy, its reference, and the recycle queue across steps.
#[derive(Debug, Clone)]
pub struct Trainer<P> {
    pub policy: P,
    pub reference: ReferencePolicy<P>,
    pub queue: RecycleQueue,
    pub config: TrainConfig,
    step: u64,
}

impl<P: TrainablePolicy> Trainer<P> {
    pub fn new(policy: P, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let reference = snapshot_reference(&policy);
        Ok(Trainer {
            policy,
            reference,
            queue: RecycleQueue::default(),
            config,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, tasks: &TaskSet) -> Result<StepReport> {
        if tasks.is_empty() {
            return Err(Error::Param("no training tasks".into()));
        }
        let refresh = self.config.ref_refresh as u64;
        if refresh > 0 && self.step > 0 && self.step.is_multiple_of(refresh) {
            self.reference = snapshot_reference(&self.policy);
        }
        let batch = select_batch(tasks, self.config.batch_size, self.config.seed, self.step);
        let report = train_step(
            &mut self.policy,
            &self.reference,
            &batch,
            &mut self.queue,
            &self.config,
            self.step,
        )?;
        self.step += 1;
        Ok(report)
    }

    /// Runs `steps` updates, handing each report to `on_step`.
    pub fn run<F>(&mut self, tasks: &TaskSet, steps: usize, mut on_step: F) -> Result<()>
    where
        F: FnMut(&StepReport) -> Result<()>,
    {
        for _ in 0..steps {
            let report = self.step(tasks)?;
            on_step(&report)?;
        }
        Ok(())
    }
}
