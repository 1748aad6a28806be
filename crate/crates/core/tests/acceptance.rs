//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line per criterion, and exits non-zero if any failed.
//!
//! Runs with `harness = false` so the lines are visible under plain
//! `cargo test`.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use coevolve::grpo::{compute_advantages, group_gradient, ScoredGroup, TrainConfig, Trainer};
use coevolve::metrics::{judge_stats, JudgeStats};
use coevolve::policy::{
    grad_log_prob, kl_to_reference, log_prob, mlp_policy_new, snapshot_reference, tabular_policy_new, Candidate,
    ContextKey, MlpPolicy, Mode, Policy, PromptContext, PromptKind, Source, TabularInit, TabularPolicy,
    TrainablePolicy, VERDICT_CORRECT, VERDICT_INCORRECT,
};
use coevolve::recycle::{
    build_pairwise, build_pointwise, build_reflect, recycle_groups, recycled_to_tasks, MixConfig, SampleKind,
    SourceSet,
};
use coevolve::rollout::{RolloutGroup, RolloutSample};
use coevolve::tasks::{gen_tasks, ArithOp, Question, Task, TaskSet, TaskSpace};
use coevolve::tts::{tts_eval, VerifierJudge};
use coevolve::verifier::{verify_answer, verify_cot, Reward};
use coevolve::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed.as_secs_f64() < limit_secs as f64
}

fn rewards_of(bits: &[u8]) -> Vec<Reward> {
    bits.iter().map(|b| Reward::from_bool(*b == 1)).collect()
}

// ---------------------------------------------------------------------------
// 1. Advantages against a hand-written evaluation.

fn hand_advantages(bits: &[u8], eps: f64) -> Vec<f64> {
    let n = bits.len() as f64;
    let mut sum = 0.0;
    for b in bits {
        sum += *b as f64;
    }
    let mean = sum / n;
    let mut ss = 0.0;
    for b in bits {
        let d = *b as f64 - mean;
        ss += d * d;
    }
    let s = (ss / n + eps).sqrt();
    bits.iter().map(|b| (*b as f64 - mean) / s).collect()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    let mut degenerate_ok = true;
    let mut degenerate_seen = 0;
    for _ in 0..1000 {
        let n = rng.random_range(2..=16);
        let bits: Vec<u8> = (0..n).map(|_| rng.random_range(0..=1)).collect();
        let adv = compute_advantages(&rewards_of(&bits), eps).expect("valid rewards");
        for (a, h) in adv.values.iter().zip(hand_advantages(&bits, eps)) {
            worst = worst.max((a - h).abs());
        }
        if bits.iter().all(|b| *b == bits[0]) {
            degenerate_seen += 1;
            degenerate_ok &= adv.values.iter().all(|a| *a == 0.0);
        }
    }
    for bits in [[0u8; 5], [1u8; 5]] {
        let adv = compute_advantages(&rewards_of(&bits), eps).unwrap();
        degenerate_ok &= adv.values.iter().all(|a| *a == 0.0);
    }
    let example = compute_advantages(&rewards_of(&[1, 0, 0, 1]), eps).unwrap();
    let example_ok = example
        .values
        .iter()
        .zip([1.0, -1.0, -1.0, 1.0])
        .all(|(a, e)| (a - e).abs() < 1e-5);
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-9 && degenerate_ok && example_ok && within(elapsed, 1),
        format!(
            "max |A - hand| {worst:.2e} over 1000 vectors, degenerate all-zero {degenerate_ok} ({degenerate_seen} random), [1,0,0,1] ok {example_ok}, {:.3}s",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. Gradients against central finite differences.

const FD_STEP: f64 = 1e-5;

/// Relative error with a small absolute floor for entries that are zero.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

fn random_kind(space: &TaskSpace, rng: &mut ChaCha8Rng) -> PromptKind {
    let answer = space.answer_vocab() as i64;
    let cot = space.cot_vocab() as i64;
    let candidate = |rng: &mut ChaCha8Rng| {
        if rng.random::<bool>() {
            Candidate::answer(rng.random_range(0..answer))
        } else {
            Candidate::cot(rng.random_range(0..cot))
        }
    };
    match rng.random_range(0..5) {
        0 => PromptKind::SolveCot,
        1 => PromptKind::SolveAnswer {
            cot: rng.random_range(0..cot),
        },
        2 => PromptKind::JudgePoint {
            candidate: candidate(rng),
        },
        3 => {
            let first = candidate(rng);
            let second = candidate(rng);
            PromptKind::JudgePair { first, second }
        }
        _ => PromptKind::Reflect {
            rejected: rng.random_range(0..answer),
        },
    }
}

struct FdReport {
    triples: usize,
    checked: usize,
    worst: f64,
    worst_zero_sum: f64,
}

fn fd_tabular(tasks: &TaskSet, space: &TaskSpace) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut policy = tabular_policy_new(*space, &Mode::ALL, TabularInit::SeededNoise { scale: 1.5, seed: 3 }).unwrap();
    let mut report = FdReport {
        triples: 0,
        checked: 0,
        worst: 0.0,
        worst_zero_sum: 0.0,
    };
    for _ in 0..120 {
        let task = &tasks.tasks()[rng.random_range(0..tasks.len())];
        let kind = random_kind(space, &mut rng);
        let prompt = PromptContext::new(task, kind);
        let vocab = prompt.mode().vocab(space);
        let action = rng.random_range(0..vocab);
        let mut acc = policy.zero_gradient();
        grad_log_prob(&policy, &prompt, action, 1.0, &mut acc).unwrap();
        let analytic = acc.row(&ContextKey::of(&prompt)).expect("touched row").to_vec();
        report.worst_zero_sum = report.worst_zero_sum.max(analytic.iter().sum::<f64>().abs());
        for k in 0..vocab {
            let base = policy.logits_row_mut(&prompt)[k];
            policy.logits_row_mut(&prompt)[k] = base + FD_STEP;
            let up = log_prob(&policy, &prompt, action).unwrap();
            policy.logits_row_mut(&prompt)[k] = base - FD_STEP;
            let down = log_prob(&policy, &prompt, action).unwrap();
            policy.logits_row_mut(&prompt)[k] = base;
            let fd = (up - down) / (2.0 * FD_STEP);
            report.worst = report.worst.max(rel_err(analytic[k], fd));
            report.checked += 1;
        }
        report.triples += 1;
    }
    report
}

fn fd_mlp(tasks: &TaskSet, space: &TaskSpace) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut policy: MlpPolicy = mlp_policy_new(*space, 16, &Mode::ALL, 5).unwrap();
    let mut report = FdReport {
        triples: 0,
        checked: 0,
        worst: 0.0,
        worst_zero_sum: 0.0,
    };
    for _ in 0..120 {
        let task = &tasks.tasks()[rng.random_range(0..tasks.len())];
        let kind = random_kind(space, &mut rng);
        let prompt = PromptContext::new(task, kind);
        let action = rng.random_range(0..prompt.mode().vocab(space));
        let mut acc = policy.zero_gradient();
        grad_log_prob(&policy, &prompt, action, 1.0, &mut acc).unwrap();
        let analytic = acc.as_dense().expect("dense gradient").to_vec();
        // The 12 largest entries plus 12 random ones.
        let mut order: Vec<usize> = (0..analytic.len()).collect();
        order.sort_by(|a, b| analytic[*b].abs().total_cmp(&analytic[*a].abs()));
        let mut probe: Vec<usize> = order[..12].to_vec();
        probe.extend((0..12).map(|_| rng.random_range(0..analytic.len())));
        for j in probe {
            let base = policy.params()[j];
            policy.params_mut()[j] = base + FD_STEP;
            let up = log_prob(&policy, &prompt, action).unwrap();
            policy.params_mut()[j] = base - FD_STEP;
            let down = log_prob(&policy, &prompt, action).unwrap();
            policy.params_mut()[j] = base;
            let fd = (up - down) / (2.0 * FD_STEP);
            report.worst = report.worst.max(rel_err(analytic[j], fd));
            report.checked += 1;
        }
        report.triples += 1;
    }
    report
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let space = TaskSpace::mod_arith(10);
    let tasks = gen_tasks(&space, 50, 9).unwrap();
    let tab = fd_tabular(&tasks, &space);
    let mlp = fd_mlp(&tasks, &space);
    let elapsed = start.elapsed();
    let pass = tab.triples >= 100
        && mlp.triples >= 100
        && tab.worst < 1e-4
        && mlp.worst < 1e-4
        && tab.worst_zero_sum < 1e-9
        && within(elapsed, 10);
    outcome(
        pass,
        format!(
            "tabular {} triples / {} entries max rel err {:.2e}, row sums <= {:.1e}; mlp {} triples / {} entries max rel err {:.2e}; {:.2}s",
            tab.triples,
            tab.checked,
            tab.worst,
            tab.worst_zero_sum,
            mlp.triples,
            mlp.checked,
            mlp.worst,
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. KL against the closed-form sum.

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let space = TaskSpace::mod_arith(10);
    let tasks = gen_tasks(&space, 20, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    let mut worst_snapshot: f64 = 0.0;
    for trial in 0..500 {
        let task = &tasks.tasks()[trial % tasks.len()];
        let kind = random_kind(&space, &mut rng);
        let prompt = PromptContext::new(task, kind);
        let vocab = prompt.mode().vocab(&space);
        let scale = rng.random_range(0.1..4.0);
        let zp: Vec<f64> = (0..vocab).map(|_| rng.random_range(-scale..scale)).collect();
        let zq: Vec<f64> = (0..vocab).map(|_| rng.random_range(-scale..scale)).collect();
        let mut reference = tabular_policy_new(space, &Mode::ALL, TabularInit::Uniform).unwrap();
        *reference.logits_row_mut(&prompt) = zq.clone();
        let frozen = snapshot_reference(&reference);
        let mut policy: TabularPolicy = reference.clone();
        worst_snapshot = worst_snapshot.max(kl_to_reference(&policy, &frozen, &prompt).unwrap().abs());
        *policy.logits_row_mut(&prompt) = zp.clone();
        let got = kl_to_reference(&policy, &frozen, &prompt).unwrap();
        let (p, q) = (softmax(&zp), softmax(&zq));
        let want: f64 = p.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum();
        worst = worst.max((got - want).abs());
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-9 && worst_snapshot == 0.0 && within(elapsed, 1),
        format!(
            "max |KL - closed form| {worst:.2e} over 500 pairs, KL at snapshot {worst_snapshot:.1e}, {:.3}s",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. Expected group gradient by exhaustive enumeration.

/// Single-prompt group over the revision head of one task.
struct ToyGroup<'a> {
    task: &'a Task,
    rejected: i64,
    actions: Vec<usize>,
    rewards: Vec<Reward>,
}

impl ScoredGroup for ToyGroup<'_> {
    fn rewards(&self) -> &[Reward] {
        &self.rewards
    }

    fn visits(&self) -> Vec<(PromptContext<'_>, Vec<(usize, usize)>)> {
        vec![(
            PromptContext::reflect(self.task, self.rejected),
            self.actions.iter().copied().zip(0..).collect(),
        )]
    }
}

fn binomial_pmf(n: usize, k: usize, p: f64) -> f64 {
    let mut c = 1.0;
    for i in 0..k {
        c = c * (n - i) as f64 / (i + 1) as f64;
    }
    c * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32)
}

/// Analytic expectation: by symmetry `E[sum_i A_i grad log pi(o_i)]` is
/// `n sum_a pi(a) E[A_1 | o_1 = a] (e_a - pi)`, where the other `n - 1`
/// rewards are Binomial(n - 1, P(correct)).
fn analytic_expected(pi: &[f64], correct: &[bool], n: usize, eps: f64) -> Vec<f64> {
    let pc: f64 = pi.iter().zip(correct).filter(|(_, c)| **c).map(|(p, _)| p).sum();
    let mut g = vec![0.0; pi.len()];
    for a in 0..pi.len() {
        let r = correct[a] as u8;
        let mut cond = 0.0;
        for k in 0..n {
            let mut bits = vec![r];
            bits.extend(std::iter::repeat_n(1, k));
            bits.extend(std::iter::repeat_n(0, n - 1 - k));
            cond += binomial_pmf(n - 1, k, pc) * hand_advantages(&bits, eps)[0];
        }
        for (j, gj) in g.iter_mut().enumerate() {
            let score = if j == a { 1.0 - pi[j] } else { -pi[j] };
            *gj += n as f64 * pi[a] * cond * score;
        }
    }
    g
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let space = TaskSpace::mod_arith(8);
    let task = Task::new(
        "toy",
        Question::ModArith {
            a: 3,
            b: 6,
            op: ArithOp::Add,
            modulus: 8,
        },
    )
    .unwrap();
    let rejected = 2;
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for (case, correct_set) in [vec![1usize], vec![0, 3, 5], vec![2, 6]].into_iter().enumerate() {
        let correct: Vec<bool> = (0..8).map(|a| correct_set.contains(&a)).collect();
        let policy = tabular_policy_new(space, &Mode::ALL, TabularInit::SeededNoise { scale: 1.0, seed: case as u64 }).unwrap();
        let prompt = PromptContext::reflect(&task, rejected);
        let key = ContextKey::of(&prompt);
        let pi = policy.action_distribution(&prompt).unwrap().probabilities;
        for n in 2..=4usize {
            let mut expected = [0.0; 8];
            let mut tuple = vec![0usize; n];
            for code in 0..8usize.pow(n as u32) {
                let mut c = code;
                let mut weight = 1.0;
                for slot in tuple.iter_mut() {
                    *slot = c % 8;
                    c /= 8;
                    weight *= pi[*slot];
                }
                let rewards: Vec<Reward> = tuple.iter().map(|a| Reward::from_bool(correct[*a])).collect();
                let adv = compute_advantages(&rewards, eps).unwrap();
                let group = ToyGroup {
                    task: &task,
                    rejected,
                    actions: tuple.clone(),
                    rewards,
                };
                let acc = group_gradient(&group, &adv, &policy, &policy, 0.0).unwrap();
                if let Some(row) = acc.row(&key) {
                    for (e, g) in expected.iter_mut().zip(row) {
                        *e += weight * g;
                    }
                }
            }
            let analytic = analytic_expected(&pi, &correct, n, eps);
            for (e, a) in expected.iter().zip(&analytic) {
                worst = worst.max((e - a).abs());
            }
            cases += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-6 && within(elapsed, 30),
        format!(
            "{cases} (reward set, n) cases over 8 actions, max |enumerated - analytic| {worst:.2e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. Recycled sample soundness.

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let space = TaskSpace::mod_arith(10);
    let tasks = gen_tasks(&space, 200, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut counts = [0usize; 3];
    let mut violations = Vec::new();
    for g in 0..10_000 {
        let task = tasks.tasks()[g % tasks.len()].clone();
        let n = rng.random_range(2..=10);
        let p_gold = rng.random_range(0.0..1.0);
        let samples: Vec<RolloutSample> = (0..n)
            .map(|_| {
                let cot = if rng.random_bool(p_gold) {
                    task.gold_cot
                } else {
                    rng.random_range(0..space.cot_vocab() as i64)
                };
                let answer = if rng.random_bool(p_gold) {
                    task.gold_answer
                } else {
                    rng.random_range(0..space.answer_vocab() as i64)
                };
                RolloutSample {
                    cot_action: cot,
                    answer_action: answer,
                    cot_log_prob: -1.0,
                    answer_log_prob: -1.0,
                }
            })
            .collect();
        let group = RolloutGroup::scored(task, samples);
        let mut all = Vec::new();
        for source in [Source::Answer, Source::Cot] {
            all.extend(build_pointwise(&group, source));
            all.extend(build_pairwise(&group, source, rng.random_range(0..20), &mut rng));
        }
        all.extend(build_reflect(&group));
        let mix = MixConfig::thirds(rng.random_range(0..24));
        all.extend(recycle_groups(std::slice::from_ref(&group), SourceSet::BOTH, 4, &mix, g as u64, &mut rng).samples);
        for s in &all {
            counts[s.kind.index()] += 1;
            let truth: Vec<Reward> = s
                .candidates
                .iter()
                .map(|c| match s.source {
                    Source::Answer => verify_answer(*c, &group.task),
                    Source::Cot => verify_cot(*c, &group.task),
                })
                .collect();
            if truth != s.labels || s.relabel() != s.labels {
                violations.push(format!("group {g}: label mismatch in {:?}", s.kind));
            }
            for (slot, i) in s.indices.iter().enumerate() {
                let member = &group.samples[*i];
                let value = match s.source {
                    Source::Answer => member.answer_action,
                    Source::Cot => member.cot_action,
                };
                if value != s.candidates[slot] || s.group_hash != group.group_hash() {
                    violations.push(format!("group {g}: candidate not from group"));
                }
            }
            match s.kind {
                SampleKind::Pairwise => {
                    let mixed = s.labels.len() == 2 && s.labels[0] != s.labels[1];
                    if !mixed || s.indices[0] == s.indices[1] {
                        violations.push(format!("group {g}: pair not mixed"));
                    }
                }
                SampleKind::Reflect => {
                    if s.source != Source::Answer || group.rewards[s.indices[0]].is_one() {
                        violations.push(format!("group {g}: reflect from a reward-1 member"));
                    }
                }
                SampleKind::Pointwise => {}
            }
        }
        let batch = recycle_groups(std::slice::from_ref(&group), SourceSet::BOTH, 4, &MixConfig::thirds(30), 0, &mut rng);
        for (s, jt) in batch.samples.iter().zip(recycled_to_tasks(&batch).unwrap()) {
            let ok = match s.kind {
                SampleKind::Pointwise => {
                    jt.gold == if s.labels[0].is_one() { VERDICT_CORRECT } else { VERDICT_INCORRECT }
                }
                SampleKind::Pairwise => s.labels[jt.gold].is_one(),
                SampleKind::Reflect => jt.gold as i64 == group.task.gold_answer,
            };
            if !ok {
                violations.push(format!("group {g}: judgment task gold mismatch"));
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        violations.is_empty() && within(elapsed, 10),
        format!(
            "10000 groups, {} pointwise / {} pairwise / {} reflect samples, {} violations{}, {:.2}s",
            counts[0],
            counts[1],
            counts[2],
            violations.len(),
            violations.first().map(|v| format!(" (first: {v})")).unwrap_or_default(),
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// 6-8. Co-training runs on ModArith M=20 with the MLP policy.

const SEEDS: u64 = 5;
const STEPS: usize = 2000;
const HIDDEN: usize = 64;
const STEP_SIZE: f64 = 0.01;
const KL_COEF: f64 = 0.5;
const BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Variant {
    PolicyOnly,
    AnsCot,
    Ans,
    Cot,
}

impl Variant {
    fn name(self) -> &'static str {
        match self {
            Variant::PolicyOnly => "policy-only",
            Variant::AnsCot => "ans+cot",
            Variant::Ans => "ans",
            Variant::Cot => "cot",
        }
    }

    fn config(self, seed: u64) -> TrainConfig {
        let mut c = TrainConfig::new(seed, STEP_SIZE);
        c.kl_coef = KL_COEF;
        c.batch_size = BATCH;
        match self {
            Variant::PolicyOnly => c.recycle = None,
            Variant::AnsCot => {}
            Variant::Ans => c.recycle.as_mut().unwrap().sources = SourceSet::ANSWER,
            Variant::Cot => c.recycle.as_mut().unwrap().sources = SourceSet::COT,
        }
        c
    }
}

struct Run {
    policy: MlpPolicy,
    stats: JudgeStats,
    seconds: f64,
}

impl Run {
    fn accuracy(&self) -> f64 {
        self.stats.solve_accuracy()
    }

    fn combined(&self) -> f64 {
        (self.accuracy() + self.stats.f1) / 2.0
    }
}

struct Lab {
    space: TaskSpace,
    train: TaskSet,
    eval: TaskSet,
    runs: BTreeMap<(Variant, u64), Run>,
}

impl Lab {
    fn new() -> Self {
        let space = TaskSpace::mod_arith(20);
        Lab {
            train: gen_tasks(&space, 2000, 11).unwrap(),
            eval: gen_tasks(&space, 4000, 12).unwrap(),
            space,
            runs: BTreeMap::new(),
        }
    }

    fn ensure(&mut self, variant: Variant) -> Result<()> {
        for seed in 0..SEEDS {
            if self.runs.contains_key(&(variant, seed)) {
                continue;
            }
            let start = Instant::now();
            let policy = mlp_policy_new(self.space, HIDDEN, &Mode::ALL, seed)?;
            let mut trainer = Trainer::new(policy, variant.config(seed))?;
            trainer.run(&self.train, STEPS, |_| Ok(()))?;
            let stats = judge_stats(&trainer.policy, &self.eval, 1000 + seed, 1)?;
            let run = Run {
                policy: trainer.policy,
                stats,
                seconds: start.elapsed().as_secs_f64(),
            };
            println!(
                "    {:<11} seed {seed}: solve acc {:.4}  judge P {:.4} R {:.4} F1 {:.4}  ({:.1}s)",
                variant.name(),
                run.accuracy(),
                run.stats.precision,
                run.stats.recall,
                run.stats.f1,
                run.seconds
            );
            self.runs.insert((variant, seed), run);
        }
        Ok(())
    }

    fn run(&self, variant: Variant, seed: u64) -> &Run {
        &self.runs[&(variant, seed)]
    }

    fn cost(&self, variants: &[Variant]) -> f64 {
        variants
            .iter()
            .flat_map(|v| (0..SEEDS).map(move |s| (*v, s)))
            .map(|k| self.runs[&k].seconds)
            .sum()
    }
}

fn criterion_6(lab: &mut Lab) -> Result<Outcome> {
    let start = Instant::now();
    lab.ensure(Variant::PolicyOnly)?;
    lab.ensure(Variant::AnsCot)?;
    let mut f1_wins = 0;
    let mut no_regression = 0;
    let mut rows = Vec::new();
    for seed in 0..SEEDS {
        let po = lab.run(Variant::PolicyOnly, seed);
        let co = lab.run(Variant::AnsCot, seed);
        f1_wins += (co.stats.f1 > po.stats.f1) as usize;
        no_regression += (co.accuracy() >= po.accuracy() - 0.02) as usize;
        rows.push(format!(
            "s{seed} F1 {:.3}/{:.3} acc {:.3}/{:.3}",
            co.stats.f1,
            po.stats.f1,
            co.accuracy(),
            po.accuracy()
        ));
    }
    let seconds = lab.cost(&[Variant::PolicyOnly, Variant::AnsCot]).max(start.elapsed().as_secs_f64());
    Ok(outcome(
        f1_wins >= 4 && no_regression >= 4 && seconds < 600.0,
        format!(
            "(a) co-trained F1 > policy-only in {f1_wins}/5, (b) acc >= policy-only - 2pp in {no_regression}/5 [co/po: {}], {seconds:.0}s",
            rows.join("; ")
        ),
    ))
}

fn criterion_7(lab: &mut Lab) -> Result<Outcome> {
    let start = Instant::now();
    lab.ensure(Variant::AnsCot)?;
    lab.ensure(Variant::Ans)?;
    lab.ensure(Variant::Cot)?;
    let mut ok = 0;
    let mut rows = Vec::new();
    for seed in 0..SEEDS {
        let both = lab.run(Variant::AnsCot, seed).combined();
        let ans = lab.run(Variant::Ans, seed).combined();
        let cot = lab.run(Variant::Cot, seed).combined();
        ok += (both >= ans.max(cot) - 0.01) as usize;
        rows.push(format!("s{seed} {both:.3}/{ans:.3}/{cot:.3}"));
    }
    let seconds = lab
        .cost(&[Variant::AnsCot, Variant::Ans, Variant::Cot])
        .max(start.elapsed().as_secs_f64());
    Ok(outcome(
        ok >= 4 && seconds < 900.0,
        format!(
            "ans+cot combined >= max(ans, cot) - 1pp in {ok}/5 [ans+cot/ans/cot: {}], {seconds:.0}s",
            rows.join("; ")
        ),
    ))
}

fn criterion_8(lab: &mut Lab) -> Result<Outcome> {
    let start = Instant::now();
    lab.ensure(Variant::AnsCot)?;
    lab.ensure(Variant::PolicyOnly)?;
    let tasks = gen_tasks(&lab.space, 1000, 13)?;
    let max_rounds = 4;

    let mut bounded = true;
    let mut oracle_ok = 0;
    let mut oracle_rows = Vec::new();
    let mut trained_ok = 0;
    let mut trained_rows = Vec::new();
    let mut baseline_rows = Vec::new();
    for seed in 0..SEEDS {
        let co = &lab.run(Variant::AnsCot, seed).policy;
        let untrained = mlp_policy_new(lab.space, HIDDEN, &Mode::ALL, seed)?;

        let (summary, traces) = tts_eval(co, &tasks, max_rounds, 2000 + seed, 1)?;
        bounded &= traces.iter().all(|t| !t.rounds.is_empty() && t.rounds.len() <= max_rounds);
        trained_ok += (summary.accuracy >= summary.single_pass_accuracy - 0.005) as usize;
        trained_rows.push(format!("s{seed} {:.3}/{:.3}", summary.accuracy, summary.single_pass_accuracy));

        for base in [untrained.clone(), co.clone()] {
            let oracle = VerifierJudge { inner: base };
            let (s, traces) = tts_eval(&oracle, &tasks, max_rounds, 3000 + seed, 1)?;
            bounded &= traces.iter().all(|t| !t.rounds.is_empty() && t.rounds.len() <= max_rounds);
            oracle_ok += (s.accuracy >= s.single_pass_accuracy) as usize;
            oracle_rows.push(format!("{:.3}/{:.3}", s.accuracy, s.single_pass_accuracy));
        }

        let po = &lab.run(Variant::PolicyOnly, seed).policy;
        let (s, traces) = tts_eval(po, &tasks, max_rounds, 2000 + seed, 1)?;
        bounded &= traces.iter().all(|t| !t.rounds.is_empty() && t.rounds.len() <= max_rounds);
        baseline_rows.push(format!("{:+.1}pp", 100.0 * (s.accuracy - s.single_pass_accuracy)));
    }
    let seconds = lab.cost(&[Variant::AnsCot]) + start.elapsed().as_secs_f64();
    Ok(outcome(
        bounded && oracle_ok == 2 * SEEDS as usize && trained_ok >= 4 && seconds < 300.0,
        format!(
            "(a) all traces within {max_rounds} rounds: {bounded}; (b) oracle-judge tts >= single-pass in {oracle_ok}/10 [{}]; (c) co-trained tts >= single - 0.5pp in {trained_ok}/5 [{}]; untrained-judge (policy-only) tts - single: [{}]; {seconds:.0}s",
            oracle_rows.join(" "),
            trained_rows.join("; "),
            baseline_rows.join(" ")
        ),
    ))
}

// ---------------------------------------------------------------------------
// 9. Judge statistics on constructed confusion scenarios.

/// Deterministic test policy: solves a task correctly iff `solve(task)`,
/// and accepts a candidate iff `accept(task, answer)`.
struct Scripted {
    space: TaskSpace,
    solve: fn(&Task) -> bool,
    accept: fn(&Task, i64) -> bool,
}

const SURE: f64 = 1e3;

impl Policy for Scripted {
    fn space(&self) -> &TaskSpace {
        &self.space
    }

    fn supports(&self, _: Mode) -> bool {
        true
    }

    fn logits(&self, prompt: &PromptContext<'_>) -> Result<Vec<f64>> {
        let task = prompt.task;
        let mut z = vec![0.0; prompt.mode().vocab(&self.space)];
        let m = self.space.answer_vocab() as i64;
        match prompt.kind {
            PromptKind::SolveCot => z[task.gold_cot as usize] = SURE,
            PromptKind::SolveAnswer { .. } => {
                let answer = if (self.solve)(task) {
                    task.gold_answer
                } else {
                    (task.gold_answer + 1) % m
                };
                z[answer as usize] = SURE;
            }
            PromptKind::JudgePoint { candidate } => {
                let verdict = if (self.accept)(task, candidate.value) {
                    VERDICT_CORRECT
                } else {
                    VERDICT_INCORRECT
                };
                z[verdict] = SURE;
            }
            _ => {}
        }
        Ok(z)
    }
}

fn criterion_9() -> Outcome {
    let start = Instant::now();
    let space = TaskSpace::mod_arith(10);
    // a = 0..8, b = 1: gold answers 1..=8.
    let tasks: Vec<Task> = (0..8)
        .map(|a| {
            Task::new(
                format!("t{a}"),
                Question::ModArith {
                    a,
                    b: 1,
                    op: ArithOp::Add,
                    modulus: 10,
                },
            )
            .unwrap()
        })
        .collect();
    let tasks = TaskSet::new(tasks, 0).unwrap();
    fn a_of(t: &Task) -> i64 {
        match t.question {
            Question::ModArith { a, .. } => a,
            _ => unreachable!(),
        }
    }
    // Each scenario: policy, then hand-derived (tp, fp, fn, tn, precision, recall, f1).
    type Hand = (u64, u64, u64, u64, f64, f64, f64);
    let scenarios: Vec<(&str, Scripted, Hand)> = vec![
        (
            "all correct, always accept",
            Scripted { space, solve: |_| true, accept: |_, _| true },
            (8, 0, 0, 0, 1.0, 1.0, 1.0),
        ),
        (
            "half correct, always accept",
            Scripted { space, solve: |t| a_of(t) % 2 == 0, accept: |_, _| true },
            (4, 4, 0, 0, 0.5, 1.0, 2.0 / 3.0),
        ),
        (
            "always reject",
            Scripted { space, solve: |t| a_of(t) < 3, accept: |_, _| false },
            (0, 0, 3, 5, 0.0, 0.0, 0.0),
        ),
        (
            "no correct answers, always accept",
            Scripted { space, solve: |_| false, accept: |_, _| true },
            (0, 8, 0, 0, 0.0, 0.0, 0.0),
        ),
        (
            "mixed: correct iff a < 4, accept iff answer odd",
            // correct answers 1,2,3,4 -> accepted 1,3 (tp 2), rejected 2,4 (fn 2);
            // wrong answers for a=4..7 are 6,7,8,9 -> accepted 7,9 (fp 2), rejected 6,8 (tn 2).
            Scripted { space, solve: |t| a_of(t) < 4, accept: |_, v| v % 2 == 1 },
            (2, 2, 2, 2, 0.5, 0.5, 0.5),
        ),
        (
            "mixed: correct iff a < 6, accept iff a < 2",
            // tp: a=0,1 (2); fn: a=2..5 (4); fp: none; tn: a=6,7 (2).
            Scripted { space, solve: |t| a_of(t) < 6, accept: |t, _| a_of(t) < 2 },
            (2, 0, 4, 2, 1.0, 2.0 / 6.0, 2.0 * (2.0 / 6.0) / (1.0 + 2.0 / 6.0)),
        ),
    ];
    let mut failures = Vec::new();
    for (name, policy, hand) in &scenarios {
        let s = judge_stats(policy, &tasks, 0, 1).unwrap();
        let got = (s.true_pos, s.false_pos, s.false_neg, s.true_neg, s.precision, s.recall, s.f1);
        if got != *hand {
            failures.push(format!("{name}: got {got:?}, want {hand:?}"));
        }
    }
    let zero = JudgeStats::from_counts(0, 0, 0, 0);
    if (zero.precision, zero.recall, zero.f1) != (0.0, 0.0, 0.0) {
        failures.push("empty confusion matrix".into());
    }
    let elapsed = start.elapsed();
    outcome(
        failures.is_empty() && within(elapsed, 1),
        format!(
            "{} constructed scenarios exact{}, {:.3}s",
            scenarios.len(),
            failures.first().map(|f| format!("; FAILED {f}")).unwrap_or_default(),
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// 10. Determinism of the train -> eval pipeline.

fn pipeline(dir: &std::path::Path) -> Result<Vec<(String, Vec<u8>)>> {
    use coevolve::cli::{cmd_eval, cmd_judge_stats, cmd_train, cmd_tts, RunConfig};
    let config = RunConfig {
        seed: 42,
        workers: 1,
        steps: 150,
        batch_size: 8,
        num_tasks: 300,
        checkpoint: dir.join("checkpoint.json"),
        metrics: dir.join("metrics.jsonl"),
        ..RunConfig::default()
    };
    cmd_train(&config)?;
    let eval_config = RunConfig {
        metrics: dir.join("eval.jsonl"),
        ..config.clone()
    };
    cmd_eval(&eval_config)?;
    cmd_tts(&eval_config, Some(&dir.join("traces.jsonl")))?;
    cmd_judge_stats(&eval_config)?;
    let mut files = Vec::new();
    for name in ["checkpoint.json", "metrics.jsonl", "eval.jsonl", "traces.jsonl"] {
        let bytes = std::fs::read(dir.join(name)).map_err(|e| coevolve::Error::Io {
            path: dir.join(name),
            source: e,
        })?;
        files.push((name.to_string(), bytes));
    }
    Ok(files)
}

fn criterion_10() -> Result<Outcome> {
    let start = Instant::now();
    let a = tempfile::tempdir().expect("tempdir");
    let b = tempfile::tempdir().expect("tempdir");
    let first = pipeline(a.path())?;
    let second = pipeline(b.path())?;
    let mut differing = Vec::new();
    let mut sizes = Vec::new();
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        sizes.push(format!("{name} {}B", x.len()));
        if x != y || x.is_empty() {
            differing.push(name.clone());
        }
    }
    let elapsed = start.elapsed();
    Ok(outcome(
        differing.is_empty() && within(elapsed, 120),
        format!(
            "two runs byte-identical: {} [{}]{}, {:.1}s",
            differing.is_empty(),
            sizes.join(", "),
            if differing.is_empty() {
                String::new()
            } else {
                format!("; differing: {}", differing.join(", "))
            },
            elapsed.as_secs_f64()
        ),
    ))
}

// ---------------------------------------------------------------------------

fn main() {
    let mut lab = Lab::new();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, o: Result<Outcome>| {
        let o = o.unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        println!("criterion {n:>2} [{name}]: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    record(1, "advantage exactness", Ok(criterion_1()));
    record(2, "gradient correctness", Ok(criterion_2()));
    record(3, "kl exactness", Ok(criterion_3()));
    record(4, "enumeration oracle", Ok(criterion_4()));
    record(5, "recycle soundness", Ok(criterion_5()));
    record(6, "co-training ordering", criterion_6(&mut lab));
    record(7, "recycle source ordering", criterion_7(&mut lab));
    record(8, "test-time loop", criterion_8(&mut lab));
    record(9, "judge metric identities", Ok(criterion_9()));
    record(10, "determinism", criterion_10());

    println!();
    println!("acceptance summary:");
    for (n, name, o) in &results {
        println!("  {n:>2} {:<24} {}", name, if o.pass { "PASS" } else { "FAIL" });
    }
    let failed = results.iter().filter(|(_, _, o)| !o.pass).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
