//! Single-hidden-layer tanh network shared by every mode.
//!
//! The hidden layer is common to all prompts. Output heads are shared by modes
//! with the same vocabulary meaning: solve-answer and reflect both emit
//! answers through one head, so revision reuses the solver's answer readout.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::features::FeatureLayout;
use super::{
    check_step, Gradient, GradientAccumulator, Mode, Policy, PromptContext, TrainablePolicy,
};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, tag};
use crate::tasks::TaskSpace;

const HEADS: usize = 4;
const INPUT_INIT_STD: f64 = 0.5;
const OUTPUT_INIT_STD: f64 = 0.05;

fn head_of(mode: Mode) -> usize {
    match mode {
        Mode::SolveCot => 0,
        Mode::SolveAnswer | Mode::Reflect => 1,
        Mode::JudgePoint => 2,
        Mode::JudgePair => 3,
    }
}

fn head_vocab(space: &TaskSpace, head: usize) -> usize {
    match head {
        0 => space.cot_vocab(),
        1 => space.answer_vocab(),
        _ => 2,
    }
}

/// Parameter offsets. Input weights are stored feature-major
/// (`[feature][hidden]`) so a sparse input touches contiguous slices.
#[derive(Debug, Clone, Copy)]
struct Layout {
    hidden: usize,
    input_bias: usize,
    heads: [(usize, usize, usize); HEADS],
    total: usize,
}

impl Layout {
    fn new(features: usize, hidden: usize, space: &TaskSpace) -> Self {
        let input_bias = features * hidden;
        let mut offset = input_bias + hidden;
        let mut heads = [(0, 0, 0); HEADS];
        for (h, slot) in heads.iter_mut().enumerate() {
            let vocab = head_vocab(space, h);
            *slot = (offset, offset + vocab * hidden, vocab);
            offset += vocab * (hidden + 1);
        }
        Layout {
            hidden,
            input_bias,
            heads,
            total: offset,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpPolicy {
    space: TaskSpace,
    modes: Vec<Mode>,
    hidden_dim: usize,
    seed: u64,
    params: Vec<f64>,
}

pub fn mlp_policy_new(space: TaskSpace, hidden_dim: usize, modes: &[Mode], seed: u64) -> Result<MlpPolicy> {
    space.validate()?;
    if hidden_dim == 0 {
        return Err(Error::Param("hidden_dim must be at least 1".into()));
    }
    let features = FeatureLayout::new(&space).dim();
    let layout = Layout::new(features, hidden_dim, &space);
    let mut rng = stream_rng(seed, &[tag::INIT]);
    let input = Normal::new(0.0, INPUT_INIT_STD).expect("valid std");
    let output = Normal::new(0.0, OUTPUT_INIT_STD).expect("valid std");
    let mut params = vec![0.0; layout.total];
    for w in &mut params[..layout.input_bias] {
        *w = input.sample(&mut rng);
    }
    for (w_start, b_start, _) in layout.heads {
        for w in &mut params[w_start..b_start] {
            *w = output.sample(&mut rng);
        }
    }
    let mut modes = modes.to_vec();
    modes.sort();
    modes.dedup();
    Ok(MlpPolicy {
        space,
        modes,
        hidden_dim,
        seed,
        params,
    })
}

impl MlpPolicy {
    fn layout(&self) -> Layout {
        Layout::new(self.feature_dim(), self.hidden_dim, &self.space)
    }

    pub fn feature_dim(&self) -> usize {
        FeatureLayout::new(&self.space).dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn hidden(&self, layout: &Layout, active: &[usize]) -> Vec<f64> {
        let h = layout.hidden;
        let mut pre = self.params[layout.input_bias..layout.input_bias + h].to_vec();
        for &j in active {
            for (p, w) in pre.iter_mut().zip(&self.params[j * h..(j + 1) * h]) {
                *p += w;
            }
        }
        pre.iter_mut().for_each(|p| *p = p.tanh());
        pre
    }

    fn forward(&self, prompt: &PromptContext<'_>) -> (Layout, Vec<usize>, Vec<f64>, Vec<f64>) {
        let layout = self.layout();
        let mut active = Vec::with_capacity(24);
        FeatureLayout::new(&self.space).encode(prompt, &mut active);
        let hidden = self.hidden(&layout, &active);
        let (w_start, b_start, vocab) = layout.heads[head_of(prompt.mode())];
        let h = layout.hidden;
        let logits = (0..vocab)
            .map(|v| {
                let row = &self.params[w_start + v * h..w_start + (v + 1) * h];
                self.params[b_start + v] + row.iter().zip(&hidden).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect();
        (layout, active, hidden, logits)
    }

    pub(super) fn validate(&self) -> Result<()> {
        self.space.validate()?;
        if self.hidden_dim == 0 || self.params.len() != self.layout().total {
            return Err(Error::Config("mlp parameter vector does not match its layout".into()));
        }
        Ok(())
    }
}

impl Policy for MlpPolicy {
    fn space(&self) -> &TaskSpace {
        &self.space
    }

    fn supports(&self, mode: Mode) -> bool {
        self.modes.contains(&mode)
    }

    fn logits(&self, prompt: &PromptContext<'_>) -> Result<Vec<f64>> {
        Ok(self.forward(prompt).3)
    }
}

impl TrainablePolicy for MlpPolicy {
    fn zero_gradient(&self) -> GradientAccumulator {
        GradientAccumulator::dense(self.params.len())
    }

    fn backprop_logits(
        &self,
        prompt: &PromptContext<'_>,
        dlogits: &[f64],
        acc: &mut GradientAccumulator,
    ) -> Result<()> {
        let (layout, active, hidden, logits) = self.forward(prompt);
        let Gradient::Dense(grad) = &mut acc.grad else {
            return Err(Error::Contract("mlp policy needs a dense gradient".into()));
        };
        if grad.len() != self.params.len() || dlogits.len() != logits.len() {
            return Err(Error::Contract("gradient shape does not match mlp policy".into()));
        }
        let h = layout.hidden;
        let (w_start, b_start, _) = layout.heads[head_of(prompt.mode())];
        let mut dhidden = vec![0.0; h];
        for (v, &d) in dlogits.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let w = w_start + v * h;
            grad[b_start + v] += d;
            for k in 0..h {
                grad[w + k] += d * hidden[k];
                dhidden[k] += d * self.params[w + k];
            }
        }
        for (dh, x) in dhidden.iter_mut().zip(&hidden) {
            *dh *= 1.0 - x * x;
        }
        for (g, d) in grad[layout.input_bias..layout.input_bias + h].iter_mut().zip(&dhidden) {
            *g += d;
        }
        for &j in &active {
            for (g, d) in grad[j * h..(j + 1) * h].iter_mut().zip(&dhidden) {
                *g += d;
            }
        }
        Ok(())
    }

    fn apply_gradient(&mut self, acc: &GradientAccumulator, step_size: f64) -> Result<()> {
        check_step(acc, step_size)?;
        let Gradient::Dense(grad) = &acc.grad else {
            return Err(Error::Contract("mlp policy needs a dense gradient".into()));
        };
        if grad.len() != self.params.len() {
            return Err(Error::Contract("gradient shape does not match mlp policy".into()));
        }
        for (theta, g) in self.params.iter_mut().zip(grad) {
            *theta += step_size * g;
        }
        Ok(())
    }
}
