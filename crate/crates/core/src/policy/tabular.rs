//! One free logit row per distinct prompt.
//!
//! Rows are materialized lazily: a row that was never updated is regenerated
//! from the init rule (zeros, or seeded noise keyed by the prompt), so the
//! stored state stays proportional to what training actually touched.

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    check_step, Gradient, GradientAccumulator, Mode, Policy, PromptContext, PromptKind, Source,
    TrainablePolicy,
};
use crate::error::{Error, Result};
use crate::rng::{stable_hash, stream_rng, tag};
use crate::tasks::{Question, TaskSpace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TabularInit {
    Uniform,
    SeededNoise { scale: f64, seed: u64 },
}

/// Canonical identity of a prompt: mode, question operands, payload.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ContextKey {
    pub mode: Mode,
    pub question: Vec<i64>,
    pub payload: Vec<i64>,
}

fn source_code(s: Source) -> i64 {
    match s {
        Source::Answer => 0,
        Source::Cot => 1,
    }
}

impl ContextKey {
    pub fn of(prompt: &PromptContext<'_>) -> Self {
        let question = match &prompt.task.question {
            Question::ModArith { a, b, .. } => vec![*a, *b],
            Question::MaxOfList { values } => values.clone(),
        };
        let payload = match prompt.kind {
            PromptKind::SolveCot => vec![],
            PromptKind::SolveAnswer { cot } => vec![cot],
            PromptKind::JudgePoint { candidate } => {
                vec![source_code(candidate.source), candidate.value]
            }
            PromptKind::JudgePair { first, second } => vec![
                source_code(first.source),
                first.value,
                source_code(second.source),
                second.value,
            ],
            PromptKind::Reflect { rejected } => vec![rejected],
        };
        ContextKey {
            mode: prompt.mode(),
            question,
            payload,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    space: TaskSpace,
    modes: Vec<Mode>,
    init: TabularInit,
    #[serde(with = "row_list")]
    rows: BTreeMap<ContextKey, Vec<f64>>,
}

mod row_list {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::ContextKey;

    #[derive(Serialize, Deserialize)]
    struct Row {
        key: ContextKey,
        logits: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(
        rows: &BTreeMap<ContextKey, Vec<f64>>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        s.collect_seq(rows.iter().map(|(key, logits)| Row {
            key: key.clone(),
            logits: logits.clone(),
        }))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<ContextKey, Vec<f64>>, D::Error> {
        let rows = Vec::<Row>::deserialize(d)?;
        Ok(rows.into_iter().map(|r| (r.key, r.logits)).collect())
    }
}

pub fn tabular_policy_new(space: TaskSpace, modes: &[Mode], init: TabularInit) -> Result<TabularPolicy> {
    space.validate()?;
    if let TabularInit::SeededNoise { scale, .. } = init {
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(Error::Param(format!("noise scale {scale} must be >= 0")));
        }
    }
    let mut modes = modes.to_vec();
    modes.sort();
    modes.dedup();
    Ok(TabularPolicy {
        space,
        modes,
        init,
        rows: BTreeMap::new(),
    })
}

impl TabularPolicy {
    fn init_row(&self, key: &ContextKey) -> Vec<f64> {
        let vocab = key.mode.vocab(&self.space);
        match self.init {
            TabularInit::Uniform => vec![0.0; vocab],
            TabularInit::SeededNoise { scale, seed } => {
                let key_bytes = serde_json::to_vec(key).expect("context keys serialize");
                let mut rng = stream_rng(seed, &[tag::TABULAR_ROW, stable_hash(&key_bytes)]);
                (0..vocab)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        scale * z
                    })
                    .collect()
            }
        }
    }

    fn row(&self, key: &ContextKey) -> Vec<f64> {
        self.rows
            .get(key)
            .cloned()
            .unwrap_or_else(|| self.init_row(key))
    }

    /// Mutable logit row for `prompt`, materializing it if needed.
    pub fn logits_row_mut(&mut self, prompt: &PromptContext<'_>) -> &mut Vec<f64> {
        let key = ContextKey::of(prompt);
        let init = self.init_row(&key);
        self.rows.entry(key).or_insert(init)
    }

    /// Number of rows that differ from their init rule.
    pub fn stored_rows(&self) -> usize {
        self.rows.len()
    }

    pub(super) fn validate(&self) -> Result<()> {
        self.space.validate()?;
        for (key, row) in &self.rows {
            if row.len() != key.mode.vocab(&self.space) {
                return Err(Error::Config(format!("row {key:?} has wrong width")));
            }
        }
        Ok(())
    }
}

impl Policy for TabularPolicy {
    fn space(&self) -> &TaskSpace {
        &self.space
    }

    fn supports(&self, mode: Mode) -> bool {
        self.modes.contains(&mode)
    }

    fn logits(&self, prompt: &PromptContext<'_>) -> Result<Vec<f64>> {
        Ok(self.row(&ContextKey::of(prompt)))
    }
}

impl TrainablePolicy for TabularPolicy {
    fn zero_gradient(&self) -> GradientAccumulator {
        GradientAccumulator::rows()
    }

    fn backprop_logits(
        &self,
        prompt: &PromptContext<'_>,
        dlogits: &[f64],
        acc: &mut GradientAccumulator,
    ) -> Result<()> {
        let Gradient::Rows(rows) = &mut acc.grad else {
            return Err(Error::Contract("tabular policy needs a row gradient".into()));
        };
        let key = ContextKey::of(prompt);
        let width = key.mode.vocab(&self.space);
        if dlogits.len() != width {
            return Err(Error::Contract(format!(
                "logit gradient has {} entries, expected {width}",
                dlogits.len()
            )));
        }
        let row = rows.entry(key).or_insert_with(|| vec![0.0; width]);
        for (g, d) in row.iter_mut().zip(dlogits) {
            *g += d;
        }
        Ok(())
    }

    fn apply_gradient(&mut self, acc: &GradientAccumulator, step_size: f64) -> Result<()> {
        check_step(acc, step_size)?;
        let Gradient::Rows(grad) = &acc.grad else {
            return Err(Error::Contract("tabular policy needs a row gradient".into()));
        };
        for (key, g) in grad {
            if g.len() != key.mode.vocab(&self.space) {
                return Err(Error::Contract(format!("gradient row {key:?} has wrong width")));
            }
        }
        for (key, g) in grad {
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            let init = self.init_row(key);
            let row = self.rows.entry(key.clone()).or_insert(init);
            for (theta, d) in row.iter_mut().zip(g) {
                *theta += step_size * d;
            }
        }
        Ok(())
    }
}
