//! Verifiable task families, seeded generators and JSONL task files.
//!
//! Every task has a single integer answer and a single integer intermediate
//! value ("cot") so that both can be verified by exact comparison:
//!
//! * `mod_arith`: `(a op b) mod m`; the cot is the unreduced `a op b`.
//! * `max_of_list`: the maximum of a short list; the cot is the index of the
//!   first maximal element.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integer answer produced by a solve or reflect action.
pub type AnswerValue = i64;
/// Integer intermediate value produced by a solve-cot action.
pub type CotValue = i64;

pub const MAX_MODULUS: u32 = 1000;
/// Multiplication makes the cot range quadratic in the modulus.
pub const MAX_MUL_MODULUS: u32 = 64;
pub const MAX_LIST_LEN: usize = 16;
pub const MAX_LIST_VALUE: i64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    ModArith,
    MaxOfList,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArithOp {
    Add,
    Mul,
}

impl ArithOp {
    pub fn apply(self, a: i64, b: i64) -> i64 {
        match self {
            ArithOp::Add => a + b,
            ArithOp::Mul => a * b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Question {
    ModArith {
        a: i64,
        b: i64,
        op: ArithOp,
        modulus: u32,
    },
    MaxOfList {
        values: Vec<i64>,
    },
}

impl Question {
    pub fn family(&self) -> Family {
        match self {
            Question::ModArith { .. } => Family::ModArith,
            Question::MaxOfList { .. } => Family::MaxOfList,
        }
    }

    /// `(gold_answer, gold_cot)` under the family rule.
    pub fn solve(&self) -> (AnswerValue, CotValue) {
        match self {
            Question::ModArith { a, b, op, modulus } => {
                let cot = op.apply(*a, *b);
                (cot.rem_euclid(i64::from(*modulus)), cot)
            }
            Question::MaxOfList { values } => {
                let mut best = 0;
                for (i, v) in values.iter().enumerate() {
                    if *v > values[best] {
                        best = i;
                    }
                }
                (values[best], best as i64)
            }
        }
    }

    fn check(&self) -> std::result::Result<(), String> {
        match self {
            Question::ModArith { a, b, op, modulus } => {
                check_modulus(*modulus, *op)?;
                let m = i64::from(*modulus);
                if !(0..m).contains(a) || !(0..m).contains(b) {
                    return Err(format!("operands ({a}, {b}) outside [0, {m})"));
                }
                Ok(())
            }
            Question::MaxOfList { values } => {
                if !(2..=MAX_LIST_LEN).contains(&values.len()) {
                    return Err(format!(
                        "list length {} outside [2, {MAX_LIST_LEN}]",
                        values.len()
                    ));
                }
                if let Some(v) = values.iter().find(|v| !(0..=MAX_LIST_VALUE).contains(*v)) {
                    return Err(format!("list value {v} outside [0, {MAX_LIST_VALUE}]"));
                }
                Ok(())
            }
        }
    }
}

fn check_modulus(modulus: u32, op: ArithOp) -> std::result::Result<(), String> {
    if !(2..=MAX_MODULUS).contains(&modulus) {
        return Err(format!("modulus {modulus} outside [2, {MAX_MODULUS}]"));
    }
    if op == ArithOp::Mul && modulus > MAX_MUL_MODULUS {
        return Err(format!(
            "modulus {modulus} too large for mul (max {MAX_MUL_MODULUS})"
        ));
    }
    Ok(())
}

/// One verifiable problem.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub family: Family,
    pub question: Question,
    pub gold_answer: AnswerValue,
    pub gold_cot: CotValue,
}

impl Task {
    /// Builds a task whose gold fields follow the family rule.
    pub fn new(id: impl Into<String>, question: Question) -> Result<Self> {
        let id = id.into();
        question.check().map_err(|message| Error::Validation {
            id: id.clone(),
            message,
        })?;
        let (gold_answer, gold_cot) = question.solve();
        Ok(Task {
            id,
            family: question.family(),
            question,
            gold_answer,
            gold_cot,
        })
    }

    /// Re-checks every task invariant.
    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| Error::Validation {
            id: self.id.clone(),
            message,
        };
        if self.family != self.question.family() {
            return Err(fail(format!(
                "family {:?} does not match question payload",
                self.family
            )));
        }
        self.question.check().map_err(fail)?;
        match &self.question {
            Question::ModArith { modulus, .. } => {
                if !(0..i64::from(*modulus)).contains(&self.gold_answer) {
                    return Err(fail(format!(
                        "gold_answer {} outside [0, {modulus})",
                        self.gold_answer
                    )));
                }
            }
            Question::MaxOfList { values } => {
                if !values.contains(&self.gold_answer) {
                    return Err(fail(format!(
                        "gold_answer {} is not an element of the list",
                        self.gold_answer
                    )));
                }
            }
        }
        let (answer, cot) = self.question.solve();
        if self.gold_answer != answer {
            return Err(fail(format!(
                "gold_answer {} disagrees with the family rule ({answer})",
                self.gold_answer
            )));
        }
        if self.gold_cot != cot {
            return Err(fail(format!(
                "gold_cot {} disagrees with the family rule ({cot})",
                self.gold_cot
            )));
        }
        Ok(())
    }

    /// Copy with the gold fields overwritten; used to show nothing reads them.
    pub fn blinded(&self) -> Task {
        Task {
            gold_answer: -1,
            gold_cot: -1,
            ..self.clone()
        }
    }
}

/// Family plus generator parameters. Fixes the answer and cot vocabularies a
/// policy is built over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum TaskSpace {
    ModArith { modulus: u32, op: ArithOp },
    MaxOfList { len: usize, max_value: i64 },
}

impl TaskSpace {
    pub fn mod_arith(modulus: u32) -> Self {
        TaskSpace::ModArith {
            modulus,
            op: ArithOp::Add,
        }
    }

    pub fn max_of_list(len: usize, max_value: i64) -> Self {
        TaskSpace::MaxOfList { len, max_value }
    }

    pub fn family(&self) -> Family {
        match self {
            TaskSpace::ModArith { .. } => Family::ModArith,
            TaskSpace::MaxOfList { .. } => Family::MaxOfList,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            TaskSpace::ModArith { modulus, op } => check_modulus(modulus, op).map_err(Error::Param),
            TaskSpace::MaxOfList { len, max_value } => {
                if !(2..=MAX_LIST_LEN).contains(&len) {
                    return Err(Error::Param(format!(
                        "list length {len} outside [2, {MAX_LIST_LEN}]"
                    )));
                }
                if !(1..=MAX_LIST_VALUE).contains(&max_value) {
                    return Err(Error::Param(format!(
                        "max value {max_value} outside [1, {MAX_LIST_VALUE}]"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Number of distinct answers; answers are the integers `0..answer_vocab`.
    pub fn answer_vocab(&self) -> usize {
        match *self {
            TaskSpace::ModArith { modulus, .. } => modulus as usize,
            TaskSpace::MaxOfList { max_value, .. } => max_value as usize + 1,
        }
    }

    /// Number of distinct cot values; cots are the integers `0..cot_vocab`.
    pub fn cot_vocab(&self) -> usize {
        match *self {
            TaskSpace::ModArith { modulus, op } => {
                let top = i64::from(modulus) - 1;
                op.apply(top, top) as usize + 1
            }
            TaskSpace::MaxOfList { len, .. } => len,
        }
    }

    /// Whether a task can be posed to a policy built over this space.
    pub fn admits(&self, task: &Task) -> bool {
        match (*self, &task.question) {
            (
                TaskSpace::ModArith { modulus, op },
                Question::ModArith {
                    modulus: m, op: o, ..
                },
            ) => modulus == *m && op == *o,
            (TaskSpace::MaxOfList { len, max_value }, Question::MaxOfList { values }) => {
                values.len() == len && values.iter().all(|v| (0..=max_value).contains(v))
            }
            _ => false,
        }
    }

    pub fn check_task(&self, task: &Task) -> Result<()> {
        if self.admits(task) {
            Ok(())
        } else {
            Err(Error::Validation {
                id: task.id.clone(),
                message: format!("task does not fit task space {self:?}"),
            })
        }
    }
}

/// Ordered, immutable collection of tasks with unique ids.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TaskSet {
    tasks: Vec<Task>,
    /// Generator seed; 0 for sets read from disk.
    pub seed: u64,
}

impl TaskSet {
    pub fn new(tasks: Vec<Task>, seed: u64) -> Result<Self> {
        let mut seen = HashSet::with_capacity(tasks.len());
        for task in &tasks {
            if !seen.insert(task.id.as_str()) {
                return Err(Error::Validation {
                    id: task.id.clone(),
                    message: "duplicate task id".into(),
                });
            }
        }
        Ok(TaskSet { tasks, seed })
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Task> {
        self.tasks.iter()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for task in &self.tasks {
            serde_json::to_writer(&mut out, task)?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

impl<'a> IntoIterator for &'a TaskSet {
    type Item = &'a Task;
    type IntoIter = std::slice::Iter<'a, Task>;

    fn into_iter(self) -> Self::IntoIter {
        self.tasks.iter()
    }
}

/// Generates `count` tasks deterministically from `seed`.
pub fn gen_tasks(space: &TaskSpace, count: usize, seed: u64) -> Result<TaskSet> {
    if count == 0 {
        return Err(Error::Param("task count must be at least 1".into()));
    }
    space.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks = Vec::with_capacity(count);
    for i in 0..count {
        let question = match *space {
            TaskSpace::ModArith { modulus, op } => {
                let m = i64::from(modulus);
                Question::ModArith {
                    a: rng.random_range(0..m),
                    b: rng.random_range(0..m),
                    op,
                    modulus,
                }
            }
            TaskSpace::MaxOfList { len, max_value } => Question::MaxOfList {
                values: (0..len).map(|_| rng.random_range(0..=max_value)).collect(),
            },
        };
        let prefix = match space.family() {
            Family::ModArith => "mod_arith",
            Family::MaxOfList => "max_of_list",
        };
        tasks.push(Task::new(format!("{prefix}-{seed}-{i}"), question)?);
    }
    TaskSet::new(tasks, seed)
}

/// Reads a JSONL task file, re-validating every task. Blank lines are skipped.
pub fn load_tasks(path: impl AsRef<Path>) -> Result<TaskSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut tasks = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let task: Task = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        task.validate()?;
        tasks.push(task);
    }
    TaskSet::new(tasks, 0)
}
