//! Fixed sparse binary encoding of prompts for the MLP policy.

use super::{Candidate, Mode, PromptContext, PromptKind, Source};
use crate::tasks::{Question, TaskSpace};

/// Value ranges wider than this are bucketed evenly.
pub const MAX_BUCKETS: usize = 64;

fn buckets(range: usize) -> usize {
    range.min(MAX_BUCKETS)
}

fn bucket(value: i64, range: usize) -> usize {
    let v = value.clamp(0, range as i64 - 1) as usize;
    if range <= MAX_BUCKETS {
        v
    } else {
        v * MAX_BUCKETS / range
    }
}

/// Offsets of each one-hot block in the feature vector.
///
/// Two-operand questions over at most [`MAX_BUCKETS`] values get one joint
/// one-hot of the operand pair. Longer questions get one bucketed one-hot per
/// operand slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureLayout {
    answer_range: usize,
    cot_range: usize,
    question: usize,
    operand_slots: usize,
    operand_range: usize,
    joint: bool,
    cot_context: usize,
    slots: [usize; 2],
    dim: usize,
}

impl FeatureLayout {
    pub fn new(space: &TaskSpace) -> Self {
        let answer_range = space.answer_vocab();
        let cot_range = space.cot_vocab();
        let (operand_slots, operand_range) = match *space {
            TaskSpace::ModArith { modulus, .. } => (2, modulus as usize),
            TaskSpace::MaxOfList { len, max_value } => (len, max_value as usize + 1),
        };
        let joint = operand_slots == 2 && operand_range <= MAX_BUCKETS;
        let question = Mode::ALL.len();
        let question_width = if joint {
            operand_range * operand_range
        } else {
            operand_slots * buckets(operand_range)
        };
        let cot_context = question + question_width;
        let slot_width = 2 + buckets(answer_range) + buckets(cot_range);
        let slot0 = cot_context + buckets(cot_range);
        let slots = [slot0, slot0 + slot_width];
        FeatureLayout {
            answer_range,
            cot_range,
            question,
            operand_slots,
            operand_range,
            joint,
            cot_context,
            slots,
            dim: slots[1] + slot_width,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn candidate(&self, slot: usize, c: Candidate, out: &mut Vec<usize>) {
        let base = self.slots[slot];
        match c.source {
            Source::Answer => {
                out.push(base);
                out.push(base + 2 + bucket(c.value, self.answer_range));
            }
            Source::Cot => {
                out.push(base + 1);
                out.push(base + 2 + buckets(self.answer_range) + bucket(c.value, self.cot_range));
            }
        }
    }

    /// Indices of the active (value 1) features, in increasing block order.
    pub fn encode(&self, prompt: &PromptContext<'_>, out: &mut Vec<usize>) {
        out.clear();
        out.push(prompt.mode().index());
        let width = buckets(self.operand_range);
        let operands: &[i64] = match &prompt.task.question {
            Question::ModArith { a, b, .. } => &[*a, *b],
            Question::MaxOfList { values } => values,
        };
        if self.joint {
            let r = self.operand_range;
            out.push(self.question + bucket(operands[0], r) * r + bucket(operands[1], r));
        } else {
            for (slot, v) in operands.iter().take(self.operand_slots).enumerate() {
                out.push(self.question + slot * width + bucket(*v, self.operand_range));
            }
        }
        match prompt.kind {
            PromptKind::SolveCot => {}
            PromptKind::SolveAnswer { cot } => {
                out.push(self.cot_context + bucket(cot, self.cot_range))
            }
            PromptKind::JudgePoint { candidate } => self.candidate(0, candidate, out),
            PromptKind::JudgePair { first, second } => {
                self.candidate(0, first, out);
                self.candidate(1, second, out);
            }
            PromptKind::Reflect { rejected } => self.candidate(0, Candidate::answer(rejected), out),
        }
    }
}
