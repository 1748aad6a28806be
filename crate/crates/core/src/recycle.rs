//! Turning scored rollout groups into judgment and revision training data.
//!
//! Three sample kinds come out of a group:
//!
//! * pointwise: one candidate and its verifier label;
//! * pairwise: one correct and one incorrect candidate from the same group,
//!   in random presentation order;
//! * reflect: an incorrect answer to be revised.
//!
//! Pointwise and pairwise candidates can be final answers or cot values.
//! Samples are re-expressed as [`JudgmentTask`]s whose gold action is derived
//! from the verifier labels, so they train through the same group-relative
//! pipeline as the solve tasks.

use std::collections::VecDeque;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{
    Candidate, PromptContext, PromptKind, Source, PICK_FIRST, PICK_SECOND, VERDICT_CORRECT,
    VERDICT_INCORRECT,
};
use crate::rollout::RolloutGroup;
use crate::tasks::Task;
use crate::verifier::{verify_answer, verify_cot, Reward};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Pointwise,
    Pairwise,
    Reflect,
}

impl SampleKind {
    pub const ALL: [SampleKind; 3] = [SampleKind::Pointwise, SampleKind::Pairwise, SampleKind::Reflect];

    pub fn index(self) -> usize {
        self as usize
    }

    fn label(self) -> &'static str {
        match self {
            SampleKind::Pointwise => "pointwise",
            SampleKind::Pairwise => "pairwise",
            SampleKind::Reflect => "reflect",
        }
    }
}

/// One judgment item derived from a scored group. `indices`, `candidates` and
/// `labels` are parallel: one entry for pointwise and reflect, two (in
/// presentation order) for pairwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecycledSample {
    pub kind: SampleKind,
    pub source: Source,
    pub task: Task,
    pub group_hash: u64,
    pub indices: Vec<usize>,
    pub candidates: Vec<i64>,
    pub labels: Vec<Reward>,
}

impl RecycledSample {
    pub fn candidate(&self, slot: usize) -> Candidate {
        Candidate {
            source: self.source,
            value: self.candidates[slot],
        }
    }

    /// Re-runs the verifier on every candidate.
    pub fn relabel(&self) -> Vec<Reward> {
        self.candidates
            .iter()
            .map(|c| match self.source {
                Source::Answer => verify_answer(*c, &self.task),
                Source::Cot => verify_cot(*c, &self.task),
            })
            .collect()
    }
}

fn source_values(group: &RolloutGroup, source: Source) -> (Vec<i64>, &[Reward]) {
    match source {
        Source::Answer => (
            group.samples.iter().map(|s| s.answer_action).collect(),
            &group.rewards,
        ),
        Source::Cot => (
            group.samples.iter().map(|s| s.cot_action).collect(),
            &group.cot_rewards,
        ),
    }
}

/// One labelled sample per group member.
pub fn build_pointwise(group: &RolloutGroup, source: Source) -> Vec<RecycledSample> {
    let hash = group.group_hash();
    let (values, labels) = source_values(group, source);
    values
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (v, r))| RecycledSample {
            kind: SampleKind::Pointwise,
            source,
            task: group.task.clone(),
            group_hash: hash,
            indices: vec![i],
            candidates: vec![*v],
            labels: vec![*r],
        })
        .collect()
}

/// Up to `max_pairs` (correct, incorrect) pairs, each presented in random
/// order. Ties carry no preference and are never emitted.
pub fn build_pairwise<R: Rng + ?Sized>(
    group: &RolloutGroup,
    source: Source,
    max_pairs: usize,
    rng: &mut R,
) -> Vec<RecycledSample> {
    let hash = group.group_hash();
    let (values, labels) = source_values(group, source);
    let mut mixed = Vec::new();
    for i in 0..values.len() {
        for j in i + 1..values.len() {
            if labels[i] != labels[j] {
                mixed.push((i, j));
            }
        }
    }
    if mixed.len() > max_pairs {
        let mut keep = index::sample(rng, mixed.len(), max_pairs).into_vec();
        keep.sort_unstable();
        mixed = keep.into_iter().map(|k| mixed[k]).collect();
    }
    mixed
        .into_iter()
        .map(|(i, j)| {
            let (a, b) = if rng.random::<bool>() { (j, i) } else { (i, j) };
            RecycledSample {
                kind: SampleKind::Pairwise,
                source,
                task: group.task.clone(),
                group_hash: hash,
                indices: vec![a, b],
                candidates: vec![values[a], values[b]],
                labels: vec![labels[a], labels[b]],
            }
        })
        .collect()
}

/// One revision sample per incorrect answer.
pub fn build_reflect(group: &RolloutGroup) -> Vec<RecycledSample> {
    let hash = group.group_hash();
    group
        .samples
        .iter()
        .zip(&group.rewards)
        .enumerate()
        .filter(|(_, (_, r))| !r.is_one())
        .map(|(i, (s, r))| RecycledSample {
            kind: SampleKind::Reflect,
            source: Source::Answer,
            task: group.task.clone(),
            group_hash: hash,
            indices: vec![i],
            candidates: vec![s.answer_action],
            labels: vec![*r],
        })
        .collect()
}

/// Relative weights of the three kinds within a per-step budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixConfig {
    pub pointwise: f64,
    pub pairwise: f64,
    pub reflect: f64,
    /// Maximum number of samples kept per step.
    pub budget: usize,
}

impl MixConfig {
    pub fn thirds(budget: usize) -> Self {
        MixConfig {
            pointwise: 1.0,
            pairwise: 1.0,
            reflect: 1.0,
            budget,
        }
    }

    fn weights(&self) -> [f64; 3] {
        [self.pointwise, self.pairwise, self.reflect]
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights().iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Param("mix weights must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Per-kind caps summing to the budget (largest-remainder rounding).
    pub fn caps(&self) -> [usize; 3] {
        let w = self.weights();
        let total: f64 = w.iter().sum();
        if total <= 0.0 || self.budget == 0 {
            return [0; 3];
        }
        let exact: Vec<f64> = w.iter().map(|x| x / total * self.budget as f64).collect();
        let mut caps = [0usize; 3];
        for k in 0..3 {
            caps[k] = exact[k].floor() as usize;
        }
        let mut left = self.budget - caps.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..3).filter(|k| w[*k] > 0.0).collect();
        order.sort_by(|a, b| {
            let fa = exact[*a] - exact[*a].floor();
            let fb = exact[*b] - exact[*b].floor();
            fb.total_cmp(&fa).then(a.cmp(b))
        });
        for k in order {
            if left == 0 {
                break;
            }
            caps[k] += 1;
            left -= 1;
        }
        caps
    }
}

/// The per-step on-policy judgment set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecycleBatch {
    pub step: u64,
    pub samples: Vec<RecycledSample>,
}

impl RecycleBatch {
    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for s in &self.samples {
            c[s.kind.index()] += 1;
        }
        c
    }
}

fn subsample<R: Rng + ?Sized>(mut items: Vec<RecycledSample>, cap: usize, rng: &mut R) -> Vec<RecycledSample> {
    if items.len() <= cap {
        return items;
    }
    let mut keep = index::sample(rng, items.len(), cap).into_vec();
    keep.sort_unstable();
    let mut slots: Vec<Option<RecycledSample>> = items.drain(..).map(Some).collect();
    keep.into_iter()
        .map(|k| slots[k].take().expect("indices are distinct"))
        .collect()
}

/// Union of the three sets, each subsampled to its cap, then shuffled.
pub fn assemble_on_policy<R: Rng + ?Sized>(
    pointwise: Vec<RecycledSample>,
    pairwise: Vec<RecycledSample>,
    reflect: Vec<RecycledSample>,
    mix: &MixConfig,
    step: u64,
    rng: &mut R,
) -> RecycleBatch {
    let caps = mix.caps();
    let mut samples = Vec::new();
    for (items, cap) in [pointwise, pairwise, reflect].into_iter().zip(caps) {
        samples.extend(subsample(items, cap, rng));
    }
    samples.shuffle(rng);
    RecycleBatch { step, samples }
}

/// Which candidate sources feed the pointwise and pairwise builders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSet {
    pub answer: bool,
    pub cot: bool,
}

impl SourceSet {
    pub const BOTH: SourceSet = SourceSet {
        answer: true,
        cot: true,
    };
    pub const ANSWER: SourceSet = SourceSet {
        answer: true,
        cot: false,
    };
    pub const COT: SourceSet = SourceSet {
        answer: false,
        cot: true,
    };

    pub fn sources(&self) -> Vec<Source> {
        let mut out = Vec::new();
        if self.answer {
            out.push(Source::Answer);
        }
        if self.cot {
            out.push(Source::Cot);
        }
        out
    }
}

/// Builds every enabled kind from `groups` and assembles one batch.
pub fn recycle_groups<R: Rng + ?Sized>(
    groups: &[RolloutGroup],
    sources: SourceSet,
    max_pairs: usize,
    mix: &MixConfig,
    step: u64,
    rng: &mut R,
) -> RecycleBatch {
    let mut point = Vec::new();
    let mut pair = Vec::new();
    let mut reflect = Vec::new();
    for group in groups {
        for source in sources.sources() {
            point.extend(build_pointwise(group, source));
            pair.extend(build_pairwise(group, source, max_pairs, rng));
        }
        reflect.extend(build_reflect(group));
    }
    assemble_on_policy(point, pair, reflect, mix, step, rng)
}

/// A recycled sample posed as a verifiable single-action task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgmentTask {
    pub id: String,
    pub kind: SampleKind,
    pub base: Task,
    pub prompt: PromptKind,
    /// The one rewarded action.
    pub gold: usize,
}

impl JudgmentTask {
    pub fn prompt(&self) -> PromptContext<'_> {
        PromptContext::new(&self.base, self.prompt)
    }
}

/// Re-expresses a batch as judgment tasks:
/// pointwise gold is the verdict matching the label, pairwise gold is the
/// position of the correct candidate, reflect gold is the task's gold answer.
pub fn recycled_to_tasks(batch: &RecycleBatch) -> Result<Vec<JudgmentTask>> {
    batch
        .samples
        .iter()
        .map(|s| {
            let arity = match s.kind {
                SampleKind::Pairwise => 2,
                _ => 1,
            };
            if s.candidates.len() != arity || s.labels.len() != arity || s.indices.len() != arity {
                return Err(Error::Contract(format!("{:?} sample has wrong arity", s.kind)));
            }
            let (prompt, gold) = match s.kind {
                SampleKind::Pointwise => (
                    PromptKind::JudgePoint {
                        candidate: s.candidate(0),
                    },
                    if s.labels[0].is_one() {
                        VERDICT_CORRECT
                    } else {
                        VERDICT_INCORRECT
                    },
                ),
                SampleKind::Pairwise => {
                    if s.labels[0] == s.labels[1] {
                        return Err(Error::Contract("pairwise sample with tied labels".into()));
                    }
                    (
                        PromptKind::JudgePair {
                            first: s.candidate(0),
                            second: s.candidate(1),
                        },
                        if s.labels[0].is_one() { PICK_FIRST } else { PICK_SECOND },
                    )
                }
                SampleKind::Reflect => {
                    if s.labels[0].is_one() || s.source != Source::Answer {
                        return Err(Error::Contract(
                            "reflect samples must carry an incorrect answer".into(),
                        ));
                    }
                    if s.task.gold_answer < 0 {
                        return Err(Error::Contract("reflect sample has no gold answer".into()));
                    }
                    (
                        PromptKind::Reflect {
                            rejected: s.candidates[0],
                        },
                        s.task.gold_answer as usize,
                    )
                }
            };
            let indices: Vec<String> = s.indices.iter().map(usize::to_string).collect();
            let source = match s.source {
                Source::Answer => "ans",
                Source::Cot => "cot",
            };
            Ok(JudgmentTask {
                id: format!(
                    "{}/{}/{}/{:016x}/{}/{}",
                    s.kind.label(),
                    source,
                    s.task.id,
                    s.group_hash,
                    batch.step,
                    indices.join("-")
                ),
                kind: s.kind,
                base: s.task.clone(),
                prompt,
                gold,
            })
        })
        .collect()
}

/// FIFO of judgment tasks waiting to be trained on.
#[derive(Debug, Clone, Default)]
pub struct RecycleQueue {
    pending: VecDeque<JudgmentTask>,
}

impl RecycleQueue {
    pub fn push(&mut self, tasks: Vec<JudgmentTask>) {
        self.pending.extend(tasks);
    }

    /// Removes and returns up to `quota` of the oldest tasks.
    pub fn drain(&mut self, quota: usize) -> Vec<JudgmentTask> {
        let take = quota.min(self.pending.len());
        self.pending.drain(..take).collect()
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }
}
