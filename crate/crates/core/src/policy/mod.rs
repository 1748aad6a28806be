//! The unified policy/judge model.
//!
//! One model answers five kinds of prompt about a task: produce a cot, produce
//! an answer given a cot, judge one candidate, pick the better of two
//! candidates, and revise a rejected answer. Each prompt kind has a finite
//! action vocabulary, so distributions, log-probabilities and KL divergences
//! are all exact.

mod features;
mod mlp;
mod tabular;

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::{AnswerValue, CotValue, Task, TaskSpace};

pub use features::FeatureLayout;
pub use mlp::{mlp_policy_new, MlpPolicy};
pub use tabular::{tabular_policy_new, ContextKey, TabularInit, TabularPolicy};

/// Judge-point actions.
pub const VERDICT_INCORRECT: usize = 0;
pub const VERDICT_CORRECT: usize = 1;
/// Judge-pair actions.
pub const PICK_FIRST: usize = 0;
pub const PICK_SECOND: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    SolveCot,
    SolveAnswer,
    JudgePoint,
    JudgePair,
    Reflect,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::SolveCot,
        Mode::SolveAnswer,
        Mode::JudgePoint,
        Mode::JudgePair,
        Mode::Reflect,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Size of the action vocabulary for this mode over `space`.
    pub fn vocab(self, space: &TaskSpace) -> usize {
        match self {
            Mode::SolveCot => space.cot_vocab(),
            Mode::SolveAnswer | Mode::Reflect => space.answer_vocab(),
            Mode::JudgePoint | Mode::JudgePair => 2,
        }
    }
}

/// Whether a judged candidate is a final answer or an intermediate cot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Answer,
    Cot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Candidate {
    pub source: Source,
    pub value: i64,
}

impl Candidate {
    pub fn answer(value: AnswerValue) -> Self {
        Candidate {
            source: Source::Answer,
            value,
        }
    }

    pub fn cot(value: CotValue) -> Self {
        Candidate {
            source: Source::Cot,
            value,
        }
    }

    fn in_range(&self, space: &TaskSpace) -> bool {
        let vocab = match self.source {
            Source::Answer => space.answer_vocab(),
            Source::Cot => space.cot_vocab(),
        };
        (0..vocab as i64).contains(&self.value)
    }
}

/// Mode plus the mode's embedded payload. The variant shapes fix the arity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PromptKind {
    SolveCot,
    SolveAnswer { cot: CotValue },
    JudgePoint { candidate: Candidate },
    JudgePair { first: Candidate, second: Candidate },
    Reflect { rejected: AnswerValue },
}

impl PromptKind {
    pub fn mode(&self) -> Mode {
        match self {
            PromptKind::SolveCot => Mode::SolveCot,
            PromptKind::SolveAnswer { .. } => Mode::SolveAnswer,
            PromptKind::JudgePoint { .. } => Mode::JudgePoint,
            PromptKind::JudgePair { .. } => Mode::JudgePair,
            PromptKind::Reflect { .. } => Mode::Reflect,
        }
    }
}

/// A structured prompt: the task being asked about and what is asked.
///
/// Only the question payload of `task` is visible to policies; gold fields
/// are never read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptContext<'a> {
    pub task: &'a Task,
    pub kind: PromptKind,
}

impl<'a> PromptContext<'a> {
    pub fn new(task: &'a Task, kind: PromptKind) -> Self {
        PromptContext { task, kind }
    }

    pub fn solve_cot(task: &'a Task) -> Self {
        Self::new(task, PromptKind::SolveCot)
    }

    pub fn solve_answer(task: &'a Task, cot: CotValue) -> Self {
        Self::new(task, PromptKind::SolveAnswer { cot })
    }

    pub fn judge_point(task: &'a Task, candidate: Candidate) -> Self {
        Self::new(task, PromptKind::JudgePoint { candidate })
    }

    pub fn judge_pair(task: &'a Task, first: Candidate, second: Candidate) -> Self {
        Self::new(task, PromptKind::JudgePair { first, second })
    }

    pub fn reflect(task: &'a Task, rejected: AnswerValue) -> Self {
        Self::new(task, PromptKind::Reflect { rejected })
    }

    pub fn mode(&self) -> Mode {
        self.kind.mode()
    }
}

/// Categorical distribution over one mode's actions.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    pub logits: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl ActionDistribution {
    pub fn from_logits(logits: Vec<f64>) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::Contract("empty action vocabulary".into()));
        }
        if let Some(bad) = logits.iter().find(|z| !z.is_finite()) {
            return Err(Error::Numeric(format!("non-finite logit {bad}")));
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_norm = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        let log_probs: Vec<f64> = logits.iter().map(|z| z - log_norm).collect();
        let probabilities = log_probs.iter().map(|lp| lp.exp()).collect();
        Ok(ActionDistribution {
            logits,
            log_probs,
            probabilities,
        })
    }

    pub fn len(&self) -> usize {
        self.probabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probabilities.is_empty()
    }

    /// Inverse-CDF draw using one uniform variate.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut cumulative = 0.0;
        let mut last_positive = 0;
        for (a, p) in self.probabilities.iter().enumerate() {
            if *p > 0.0 {
                last_positive = a;
            }
            cumulative += p;
            if u < cumulative {
                return a;
            }
        }
        // u landed in the rounding gap above the final cumulative sum
        last_positive
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (a, z) in self.logits.iter().enumerate() {
            if *z > self.logits[best] {
                best = a;
            }
        }
        best
    }
}

/// Exact `KL(p || q)` from log-probabilities.
pub fn kl_divergence(p: &ActionDistribution, q: &ActionDistribution) -> f64 {
    p.probabilities
        .iter()
        .zip(p.log_probs.iter().zip(&q.log_probs))
        .filter(|(pk, _)| **pk > 0.0)
        .map(|(pk, (lp, lq))| pk * (lp - lq))
        .sum()
}

/// Gradient of `KL(softmax(z) || q)` with respect to the logits `z`:
/// `p_k (log p_k - log q_k - KL)`.
pub fn kl_logit_gradient(p: &ActionDistribution, q: &ActionDistribution) -> Vec<f64> {
    let kl = kl_divergence(p, q);
    p.probabilities
        .iter()
        .zip(p.log_probs.iter().zip(&q.log_probs))
        .map(|(pk, (lp, lq))| if *pk > 0.0 { pk * (lp - lq - kl) } else { 0.0 })
        .collect()
}

/// Read-only view of a policy: prompt in, logits out.
pub trait Policy: Send + Sync {
    fn space(&self) -> &TaskSpace;

    fn supports(&self, mode: Mode) -> bool;

    /// Raw logits for an already-validated prompt.
    fn logits(&self, prompt: &PromptContext<'_>) -> Result<Vec<f64>>;

    fn action_distribution(&self, prompt: &PromptContext<'_>) -> Result<ActionDistribution> {
        check_prompt(self, prompt)?;
        ActionDistribution::from_logits(self.logits(prompt)?)
    }
}

/// Rejects prompts a policy cannot represent.
pub fn check_prompt<P: Policy + ?Sized>(policy: &P, prompt: &PromptContext<'_>) -> Result<()> {
    let mode = prompt.mode();
    if !policy.supports(mode) {
        return Err(Error::Contract(format!("mode {mode:?} not served by policy")));
    }
    let space = policy.space();
    if !space.admits(prompt.task) {
        return Err(Error::Contract(format!(
            "task {} does not fit policy task space",
            prompt.task.id
        )));
    }
    let ok = match prompt.kind {
        PromptKind::SolveCot => true,
        PromptKind::SolveAnswer { cot } => (0..space.cot_vocab() as i64).contains(&cot),
        PromptKind::JudgePoint { candidate } => candidate.in_range(space),
        PromptKind::JudgePair { first, second } => first.in_range(space) && second.in_range(space),
        PromptKind::Reflect { rejected } => (0..space.answer_vocab() as i64).contains(&rejected),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "embedded payload {:?} outside the task space",
            prompt.kind
        )))
    }
}

/// Draws an action and returns it with its log-probability.
pub fn sample_action<P, R>(policy: &P, prompt: &PromptContext<'_>, rng: &mut R) -> Result<(usize, f64)>
where
    P: Policy + ?Sized,
    R: Rng + ?Sized,
{
    let dist = policy.action_distribution(prompt)?;
    let a = dist.sample(rng);
    Ok((a, dist.log_probs[a]))
}

pub fn log_prob<P: Policy + ?Sized>(policy: &P, prompt: &PromptContext<'_>, action: usize) -> Result<f64> {
    let dist = policy.action_distribution(prompt)?;
    dist.log_probs
        .get(action)
        .copied()
        .ok_or_else(|| Error::Contract(format!("action {action} outside vocabulary of {}", dist.len())))
}

/// Additive gradient buffer matching one policy's parameterization.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientAccumulator {
    pub(crate) grad: Gradient,
    /// Number of score-function terms folded in.
    pub sample_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Gradient {
    Dense(Vec<f64>),
    Rows(std::collections::BTreeMap<ContextKey, Vec<f64>>),
}

impl GradientAccumulator {
    pub(crate) fn dense(len: usize) -> Self {
        GradientAccumulator {
            grad: Gradient::Dense(vec![0.0; len]),
            sample_count: 0,
        }
    }

    pub(crate) fn rows() -> Self {
        GradientAccumulator {
            grad: Gradient::Rows(Default::default()),
            sample_count: 0,
        }
    }

    /// Adds `other` entry-wise.
    pub fn merge(&mut self, other: &GradientAccumulator) -> Result<()> {
        match (&mut self.grad, &other.grad) {
            (Gradient::Dense(a), Gradient::Dense(b)) if a.len() == b.len() => {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
            (Gradient::Rows(a), Gradient::Rows(b)) => {
                for (key, row) in b {
                    let dst = a.entry(key.clone()).or_insert_with(|| vec![0.0; row.len()]);
                    for (x, y) in dst.iter_mut().zip(row) {
                        *x += y;
                    }
                }
            }
            _ => return Err(Error::Contract("merging incompatible gradients".into())),
        }
        self.sample_count += other.sample_count;
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.values().all(|v| v == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    pub fn max_abs(&self) -> f64 {
        self.values().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Flat parameter gradient, for dense parameterizations.
    pub fn as_dense(&self) -> Option<&[f64]> {
        match &self.grad {
            Gradient::Dense(v) => Some(v),
            Gradient::Rows(_) => None,
        }
    }

    pub fn as_dense_mut(&mut self) -> Option<&mut [f64]> {
        match &mut self.grad {
            Gradient::Dense(v) => Some(v),
            Gradient::Rows(_) => None,
        }
    }

    /// Per-context logit gradient, for tabular parameterizations.
    pub fn row(&self, key: &ContextKey) -> Option<&[f64]> {
        match &self.grad {
            Gradient::Rows(rows) => rows.get(key).map(Vec::as_slice),
            Gradient::Dense(_) => None,
        }
    }

    pub fn row_mut(&mut self, key: &ContextKey) -> Option<&mut Vec<f64>> {
        match &mut self.grad {
            Gradient::Rows(rows) => rows.get_mut(key),
            Gradient::Dense(_) => None,
        }
    }

    pub fn rows_iter(&self) -> impl Iterator<Item = (&ContextKey, &Vec<f64>)> {
        let rows = match &self.grad {
            Gradient::Rows(rows) => Some(rows.iter()),
            Gradient::Dense(_) => None,
        };
        rows.into_iter().flatten()
    }

    fn values(&self) -> Box<dyn Iterator<Item = f64> + '_> {
        match &self.grad {
            Gradient::Dense(v) => Box::new(v.iter().copied()),
            Gradient::Rows(rows) => Box::new(rows.values().flatten().copied()),
        }
    }
}

/// A policy whose parameters can be updated by gradient ascent.
pub trait TrainablePolicy: Policy + Clone + 'static {
    fn zero_gradient(&self) -> GradientAccumulator;

    /// Adds `J^T dlogits` to `acc`, where `J` is the Jacobian of the prompt's
    /// logits with respect to the parameters.
    fn backprop_logits(
        &self,
        prompt: &PromptContext<'_>,
        dlogits: &[f64],
        acc: &mut GradientAccumulator,
    ) -> Result<()>;

    /// `theta += step_size * acc`. Leaves parameters untouched on error.
    fn apply_gradient(&mut self, acc: &GradientAccumulator, step_size: f64) -> Result<()>;
}

pub(crate) fn check_step(acc: &GradientAccumulator, step_size: f64) -> Result<()> {
    if !(step_size > 0.0 && step_size.is_finite()) {
        return Err(Error::Param(format!("step size {step_size} must be positive")));
    }
    if !acc.is_finite() {
        return Err(Error::Numeric("non-finite gradient entry".into()));
    }
    Ok(())
}

/// Adds `scale * grad log pi(action | prompt)` to `acc`.
pub fn grad_log_prob<P: TrainablePolicy>(
    policy: &P,
    prompt: &PromptContext<'_>,
    action: usize,
    scale: f64,
    acc: &mut GradientAccumulator,
) -> Result<()> {
    let dist = policy.action_distribution(prompt)?;
    if action >= dist.len() {
        return Err(Error::Contract(format!(
            "action {action} outside vocabulary of {}",
            dist.len()
        )));
    }
    let mut dlogits: Vec<f64> = dist.probabilities.iter().map(|p| -scale * p).collect();
    dlogits[action] += scale;
    policy.backprop_logits(prompt, &dlogits, acc)?;
    acc.sample_count += 1;
    Ok(())
}

/// Frozen copy of a policy; never changes after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePolicy<P> {
    inner: Arc<P>,
}

impl<P> ReferencePolicy<P> {
    pub fn inner(&self) -> &P {
        &self.inner
    }
}

impl<P: Policy> Policy for ReferencePolicy<P> {
    fn space(&self) -> &TaskSpace {
        self.inner.space()
    }

    fn supports(&self, mode: Mode) -> bool {
        self.inner.supports(mode)
    }

    fn logits(&self, prompt: &PromptContext<'_>) -> Result<Vec<f64>> {
        self.inner.logits(prompt)
    }
}

pub fn snapshot_reference<P: Clone>(policy: &P) -> ReferencePolicy<P> {
    ReferencePolicy {
        inner: Arc::new(policy.clone()),
    }
}

/// Exact `KL(pi_theta(.|prompt) || pi_ref(.|prompt))`.
pub fn kl_to_reference<P, Q>(policy: &P, reference: &Q, prompt: &PromptContext<'_>) -> Result<f64>
where
    P: Policy + ?Sized,
    Q: Policy + ?Sized,
{
    let p = policy.action_distribution(prompt)?;
    let q = reference.action_distribution(prompt)?;
    if p.len() != q.len() {
        return Err(Error::Contract("policy and reference vocabularies differ".into()));
    }
    Ok(kl_divergence(&p, &q))
}

/// Either built-in policy; the unit stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyModel {
    Tabular(TabularPolicy),
    Mlp(MlpPolicy),
}

impl From<TabularPolicy> for PolicyModel {
    fn from(p: TabularPolicy) -> Self {
        PolicyModel::Tabular(p)
    }
}

impl From<MlpPolicy> for PolicyModel {
    fn from(p: MlpPolicy) -> Self {
        PolicyModel::Mlp(p)
    }
}

impl Policy for PolicyModel {
    fn space(&self) -> &TaskSpace {
        match self {
            PolicyModel::Tabular(p) => p.space(),
            PolicyModel::Mlp(p) => p.space(),
        }
    }

    fn supports(&self, mode: Mode) -> bool {
        match self {
            PolicyModel::Tabular(p) => p.supports(mode),
            PolicyModel::Mlp(p) => p.supports(mode),
        }
    }

    fn logits(&self, prompt: &PromptContext<'_>) -> Result<Vec<f64>> {
        match self {
            PolicyModel::Tabular(p) => p.logits(prompt),
            PolicyModel::Mlp(p) => p.logits(prompt),
        }
    }
}

impl TrainablePolicy for PolicyModel {
    fn zero_gradient(&self) -> GradientAccumulator {
        match self {
            PolicyModel::Tabular(p) => p.zero_gradient(),
            PolicyModel::Mlp(p) => p.zero_gradient(),
        }
    }

    fn backprop_logits(
        &self,
        prompt: &PromptContext<'_>,
        dlogits: &[f64],
        acc: &mut GradientAccumulator,
    ) -> Result<()> {
        match self {
            PolicyModel::Tabular(p) => p.backprop_logits(prompt, dlogits, acc),
            PolicyModel::Mlp(p) => p.backprop_logits(prompt, dlogits, acc),
        }
    }

    fn apply_gradient(&mut self, acc: &GradientAccumulator, step_size: f64) -> Result<()> {
        match self {
            PolicyModel::Tabular(p) => p.apply_gradient(acc, step_size),
            PolicyModel::Mlp(p) => p.apply_gradient(acc, step_size),
        }
    }
}

pub const CHECKPOINT_FORMAT: &str = "coevolve-policy";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    policy: PolicyModel,
}

impl PolicyModel {
    pub fn to_json(&self) -> Result<String> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            policy: self.clone(),
        };
        Ok(serde_json::to_string(&ckpt)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        ckpt.policy.validate()?;
        Ok(ckpt.policy)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    fn validate(&self) -> Result<()> {
        match self {
            PolicyModel::Tabular(p) => p.validate(),
            PolicyModel::Mlp(p) => p.validate(),
        }
    }
}
