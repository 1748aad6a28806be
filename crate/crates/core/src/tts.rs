//! Test-time generate, self-judge, revise loop.
//!
//! Round 0 solves the task; every round's answer is judged by the same model.
//! An accepted answer ends the loop. A rejected one is passed back in a
//! revision prompt until the round budget runs out, in which case the last
//! answer stands. Ground truth is consulted only to score the final answer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::policy::{
    Candidate, Mode, Policy, PromptContext, PromptKind, Source, VERDICT_CORRECT,
};
use crate::rng::{stream_rng, tag};
use crate::rollout::solve_once;
use crate::tasks::{AnswerValue, CotValue, Task, TaskSet, TaskSpace};
use crate::verifier::{verify_answer, verify_cot, Reward};

pub const DEFAULT_MAX_ROUNDS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtsRound {
    pub round_index: usize,
    /// Only round 0 produces a cot; revisions emit an answer directly.
    pub cot: Option<CotValue>,
    pub answer: AnswerValue,
    /// Answer this round revised, for rounds after the first.
    pub revised_from: Option<AnswerValue>,
    pub verdict: Reward,
    pub accepted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    SelfAccept,
    Budget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtsTrace {
    pub task_id: String,
    pub rounds: Vec<TtsRound>,
    pub final_answer: AnswerValue,
    pub terminated_by: Termination,
    /// Scored against ground truth after the loop; never fed back.
    pub final_correct: Reward,
}

impl TtsTrace {
    /// Whether the first-round answer was correct.
    pub fn first_correct(&self, task: &Task) -> Reward {
        verify_answer(self.rounds[0].answer, task)
    }
}

fn judge<P, R>(policy: &P, task: &Task, answer: AnswerValue, rng: &mut R) -> Result<Reward>
where
    P: Policy + ?Sized,
    R: Rng + ?Sized,
{
    let dist = policy.action_distribution(&PromptContext::judge_point(task, Candidate::answer(answer)))?;
    Ok(Reward::from_bool(dist.sample(rng) == VERDICT_CORRECT))
}

pub fn tts_solve<P, R>(policy: &P, task: &Task, max_rounds: usize, rng: &mut R) -> Result<TtsTrace>
where
    P: Policy + ?Sized,
    R: Rng + ?Sized,
{
    if max_rounds == 0 {
        return Err(Error::Param("max_rounds must be at least 1".into()));
    }
    let first = solve_once(policy, task, rng)?;
    let mut rounds: Vec<TtsRound> = Vec::with_capacity(max_rounds);
    let mut cot = Some(first.cot_action);
    let mut answer = first.answer_action;
    let mut revised_from = None;
    loop {
        let verdict = judge(policy, task, answer, rng)?;
        let accepted = verdict.is_one();
        rounds.push(TtsRound {
            round_index: rounds.len(),
            cot,
            answer,
            revised_from,
            verdict,
            accepted,
        });
        if accepted || rounds.len() == max_rounds {
            break;
        }
        let dist = policy.action_distribution(&PromptContext::reflect(task, answer))?;
        revised_from = Some(answer);
        answer = dist.sample(rng) as AnswerValue;
        cot = None;
    }
    let last = rounds.last().expect("at least one round");
    Ok(TtsTrace {
        task_id: task.id.clone(),
        final_answer: last.answer,
        terminated_by: if last.accepted {
            Termination::SelfAccept
        } else {
            Termination::Budget
        },
        final_correct: verify_answer(last.answer, task),
        rounds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtsSummary {
    pub tasks: usize,
    pub max_rounds: usize,
    /// Accuracy of the loop's final answers.
    pub accuracy: f64,
    /// Accuracy of the round-0 answers of the same traces.
    pub single_pass_accuracy: f64,
    pub mean_rounds: f64,
    pub self_accept_rate: f64,
}

/// Runs the loop on every task. Task `i` draws from stream `(seed, i)`, the
/// same stream [`solve_eval`] uses, so round 0 reproduces single-pass solving.
pub fn tts_eval<P: Policy + ?Sized>(
    policy: &P,
    tasks: &TaskSet,
    max_rounds: usize,
    seed: u64,
    workers: usize,
) -> Result<(TtsSummary, Vec<TtsTrace>)> {
    if tasks.is_empty() {
        return Err(Error::Param("no tasks to evaluate".into()));
    }
    let traces: Vec<TtsTrace> = par::map(tasks.tasks(), workers, |i, task| {
        tts_solve(policy, task, max_rounds, &mut stream_rng(seed, &[tag::SOLVE, i as u64]))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let n = traces.len() as f64;
    let summary = TtsSummary {
        tasks: traces.len(),
        max_rounds,
        accuracy: traces.iter().map(|t| t.final_correct.value()).sum::<f64>() / n,
        single_pass_accuracy: traces
            .iter()
            .zip(tasks)
            .map(|(t, task)| t.first_correct(task).value())
            .sum::<f64>()
            / n,
        mean_rounds: traces.iter().map(|t| t.rounds.len() as f64).sum::<f64>() / n,
        self_accept_rate: traces
            .iter()
            .filter(|t| t.terminated_by == Termination::SelfAccept)
            .count() as f64
            / n,
    };
    Ok((summary, traces))
}

/// Single-pass solve accuracy with per-task streams `(seed, i)`.
pub fn solve_eval<P: Policy + ?Sized>(policy: &P, tasks: &TaskSet, seed: u64, workers: usize) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::Param("no tasks to evaluate".into()));
    }
    let correct: Vec<f64> = par::map(tasks.tasks(), workers, |i, task| {
        let s = solve_once(policy, task, &mut stream_rng(seed, &[tag::SOLVE, i as u64]))?;
        Ok(verify_answer(s.answer_action, task).value())
    })
    .into_iter()
    .collect::<Result<_>>()?;
    Ok(correct.iter().sum::<f64>() / correct.len() as f64)
}

/// Wraps a policy so that judge-point verdicts come from the verifier.
/// Evaluation tool only: it reads the gold fields.
#[derive(Debug, Clone)]
pub struct VerifierJudge<P> {
    pub inner: P,
}

const ORACLE_LOGIT: f64 = 60.0;

impl<P: Policy> Policy for VerifierJudge<P> {
    fn space(&self) -> &TaskSpace {
        self.inner.space()
    }

    fn supports(&self, mode: Mode) -> bool {
        self.inner.supports(mode)
    }

    fn logits(&self, prompt: &PromptContext<'_>) -> Result<Vec<f64>> {
        match prompt.kind {
            PromptKind::JudgePoint { candidate } => {
                let correct = match candidate.source {
                    Source::Answer => verify_answer(candidate.value, prompt.task),
                    Source::Cot => verify_cot(candidate.value, prompt.task),
                };
                Ok(if correct.is_one() {
                    vec![-ORACLE_LOGIT, ORACLE_LOGIT]
                } else {
                    vec![ORACLE_LOGIT, -ORACLE_LOGIT]
                })
            }
            _ => self.inner.logits(prompt),
        }
    }
}
