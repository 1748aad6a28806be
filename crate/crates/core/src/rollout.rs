//! Answer groups: `n` two-stage (cot, answer) samples per task, scored by
//! the verifier.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{ActionDistribution, Policy, PromptContext};
use crate::rng::stable_hash;
use crate::tasks::{AnswerValue, CotValue, Task};
use crate::verifier::{verify_answer, verify_cot, Reward};

pub const DEFAULT_GROUP_SIZE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutSample {
    pub cot_action: CotValue,
    pub answer_action: AnswerValue,
    pub cot_log_prob: f64,
    pub answer_log_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub task: Task,
    pub samples: Vec<RolloutSample>,
    pub rewards: Vec<Reward>,
    pub cot_rewards: Vec<Reward>,
}

impl RolloutGroup {
    /// Scores `samples` against `task`.
    pub fn scored(task: Task, samples: Vec<RolloutSample>) -> Self {
        let rewards = samples
            .iter()
            .map(|s| verify_answer(s.answer_action, &task))
            .collect();
        let cot_rewards = samples
            .iter()
            .map(|s| verify_cot(s.cot_action, &task))
            .collect();
        RolloutGroup {
            task,
            samples,
            rewards,
            cot_rewards,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mean_reward(&self) -> f64 {
        self.rewards.iter().map(|r| r.value()).sum::<f64>() / self.rewards.len().max(1) as f64
    }

    /// Content digest used as provenance for recycled samples.
    pub fn group_hash(&self) -> u64 {
        let mut bytes = self.task.id.clone().into_bytes();
        for s in &self.samples {
            bytes.extend_from_slice(&s.cot_action.to_le_bytes());
            bytes.extend_from_slice(&s.answer_action.to_le_bytes());
        }
        stable_hash(&bytes)
    }
}

/// Samples one (cot, answer) pair. The cot is drawn first and the answer is
/// drawn from a prompt that embeds it.
pub fn solve_once<P, R>(policy: &P, task: &Task, rng: &mut R) -> Result<RolloutSample>
where
    P: Policy + ?Sized,
    R: Rng + ?Sized,
{
    let cot_dist = policy.action_distribution(&PromptContext::solve_cot(task))?;
    let cot = cot_dist.sample(rng);
    let answer_dist = policy.action_distribution(&PromptContext::solve_answer(task, cot as CotValue))?;
    let answer = answer_dist.sample(rng);
    Ok(RolloutSample {
        cot_action: cot as CotValue,
        answer_action: answer as AnswerValue,
        cot_log_prob: cot_dist.log_probs[cot],
        answer_log_prob: answer_dist.log_probs[answer],
    })
}

/// Samples an answer group of size `n` in sampling order.
pub fn sample_group<P, R>(policy: &P, task: &Task, n: usize, rng: &mut R) -> Result<RolloutGroup>
where
    P: Policy + ?Sized,
    R: Rng + ?Sized,
{
    if n < 2 {
        return Err(Error::Param(format!("group size {n} must be at least 2")));
    }
    let cot_dist = policy.action_distribution(&PromptContext::solve_cot(task))?;
    let mut answer_dists: BTreeMap<usize, ActionDistribution> = BTreeMap::new();
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let cot = cot_dist.sample(rng);
        let answer_dist = match answer_dists.entry(cot) {
            std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::btree_map::Entry::Vacant(e) => e.insert(
                policy.action_distribution(&PromptContext::solve_answer(task, cot as CotValue))?,
            ),
        };
        let answer = answer_dist.sample(rng);
        samples.push(RolloutSample {
            cot_action: cot as CotValue,
            answer_action: answer as AnswerValue,
            cot_log_prob: cot_dist.log_probs[cot],
            answer_log_prob: answer_dist.log_probs[answer],
        });
    }
    Ok(RolloutGroup::scored(task.clone(), samples))
}

/// Exact probability that one two-stage solve is correct:
/// `sum_c P(c) P(gold | c)`.
pub fn expected_solve_accuracy<P: Policy + ?Sized>(policy: &P, task: &Task) -> Result<f64> {
    let cot_dist = policy.action_distribution(&PromptContext::solve_cot(task))?;
    let gold = task.gold_answer;
    if !(0..policy.space().answer_vocab() as i64).contains(&gold) {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (cot, p) in cot_dist.probabilities.iter().enumerate() {
        if *p == 0.0 {
            continue;
        }
        let answer_dist = policy.action_distribution(&PromptContext::solve_answer(task, cot as CotValue))?;
        total += p * answer_dist.probabilities[gold as usize];
    }
    Ok(total)
}
