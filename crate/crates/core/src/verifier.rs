//! Rule-based binary rewards and `\box{}` answer extraction.

use serde::{Deserialize, Serialize};

use crate::tasks::{AnswerValue, CotValue, Task};

/// Binary verifiable reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Reward {
    Zero,
    One,
}

impl Reward {
    pub fn from_bool(correct: bool) -> Self {
        if correct {
            Reward::One
        } else {
            Reward::Zero
        }
    }

    pub fn is_one(self) -> bool {
        self == Reward::One
    }

    pub fn value(self) -> f64 {
        match self {
            Reward::Zero => 0.0,
            Reward::One => 1.0,
        }
    }
}

impl From<Reward> for u8 {
    fn from(r: Reward) -> u8 {
        r as u8
    }
}

impl TryFrom<u8> for Reward {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            0 => Ok(Reward::Zero),
            1 => Ok(Reward::One),
            other => Err(format!("reward must be 0 or 1, got {other}")),
        }
    }
}

pub fn verify_answer(predicted: AnswerValue, task: &Task) -> Reward {
    Reward::from_bool(predicted == task.gold_answer)
}

pub fn verify_cot(predicted: CotValue, task: &Task) -> Reward {
    Reward::from_bool(predicted == task.gold_cot)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExtractError {
    #[error("no \\box{{}} found")]
    Missing,
    #[error("box content {0:?} is not an integer")]
    NotInteger(String),
}

const BOX_OPEN: &str = "\\box{";

/// Integer inside the last `\box{...}` in `text`.
pub fn extract_boxed(text: &str) -> Result<AnswerValue, ExtractError> {
    let start = text.rfind(BOX_OPEN).ok_or(ExtractError::Missing)? + BOX_OPEN.len();
    let rest = &text[start..];
    let end = rest.find('}').ok_or(ExtractError::Missing)?;
    let inner = rest[..end].trim();
    inner
        .parse()
        .map_err(|_| ExtractError::NotInteger(inner.to_string()))
}

pub fn render_boxed(value: AnswerValue) -> String {
    format!("\\box{{{value}}}")
}

/// Reward for free text; extraction failure scores 0.
pub fn verify_text(text: &str, task: &Task) -> Reward {
    extract_boxed(text).map_or(Reward::Zero, |v| verify_answer(v, task))
}
