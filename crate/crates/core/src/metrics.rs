//! Self-judgment precision/recall/F1 and JSONL metric files.
//!
//! Positive class: the model's answer is actually correct. A true positive is
//! a correct answer the model accepts; a false positive is a wrong answer it
//! accepts.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::policy::{Candidate, Policy, PromptContext, VERDICT_CORRECT};
use crate::rng::{stream_rng, tag};
use crate::rollout::solve_once;
use crate::tasks::TaskSet;
use crate::verifier::verify_answer;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JudgeStats {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl JudgeStats {
    pub fn from_counts(true_pos: u64, false_pos: u64, false_neg: u64, true_neg: u64) -> Self {
        let precision = ratio(true_pos, true_pos + false_pos);
        let recall = ratio(true_pos, true_pos + false_neg);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        JudgeStats {
            true_pos,
            false_pos,
            false_neg,
            true_neg,
            recall,
            precision,
            f1,
        }
    }

    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }

    /// Fraction of judged answers that were actually correct.
    pub fn solve_accuracy(&self) -> f64 {
        ratio(self.true_pos + self.false_neg, self.total())
    }
}

/// Solves each task once and asks the model to judge its own answer.
///
/// Task `i` uses stream `(seed, i)`, so the solve step matches single-pass
/// evaluation and round 0 of the test-time loop.
pub fn judge_stats<P: Policy + ?Sized>(policy: &P, tasks: &TaskSet, seed: u64, workers: usize) -> Result<JudgeStats> {
    if tasks.is_empty() {
        return Err(Error::Param("no tasks to judge".into()));
    }
    let outcomes: Vec<(bool, bool)> = par::map(tasks.tasks(), workers, |i, task| {
        let mut rng = stream_rng(seed, &[tag::SOLVE, i as u64]);
        let s = solve_once(policy, task, &mut rng)?;
        let dist = policy.action_distribution(&PromptContext::judge_point(task, Candidate::answer(s.answer_action)))?;
        let accepted = dist.sample(&mut rng) == VERDICT_CORRECT;
        Ok((verify_answer(s.answer_action, task).is_one(), accepted))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let mut counts = [0u64; 4];
    for (correct, accepted) in outcomes {
        let slot = match (correct, accepted) {
            (true, true) => 0,
            (false, true) => 1,
            (true, false) => 2,
            (false, false) => 3,
        };
        counts[slot] += 1;
    }
    Ok(JudgeStats::from_counts(counts[0], counts[1], counts[2], counts[3]))
}

/// Append-only JSONL writer; every record is flushed as it is written.
pub struct MetricsSink {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsSink {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(MetricsSink {
            out: BufWriter::new(file),
            path,
        })
    }

    /// Opens `path` after truncating it.
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        File::create(path).map_err(|e| Error::io(path, e))?;
        Self::open(path)
    }

    pub fn append<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out
            .write_all(b"\n")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

pub fn write_metrics<T: Serialize>(records: &[T], path: impl AsRef<Path>) -> Result<()> {
    let mut sink = MetricsSink::open(path)?;
    records.iter().try_for_each(|r| sink.append(r))
}

/// Reads a JSONL file. A malformed final line (an interrupted write) is
/// dropped; a malformed line anywhere else is a parse error.
pub fn read_metrics<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(path, e))?;
    let last = lines.iter().rposition(|l| !l.trim().is_empty());
    let mut records = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => records.push(r),
            Err(_) if Some(i) == last => break,
            Err(e) => {
                return Err(Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(records)
}
