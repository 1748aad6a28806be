//! Command-line front end: config loading and the five subcommands.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::grpo::{
    select_batch, RecycleConfig, RecycleObjective, TrainConfig, Trainer, DEFAULT_EPSILON,
    DEFAULT_KL_COEF, DEFAULT_MLP_STEP, DEFAULT_TABULAR_STEP,
};
use crate::metrics::{judge_stats, MetricsSink};
use crate::par;
use crate::policy::{mlp_policy_new, tabular_policy_new, Mode, PolicyModel, TabularInit};
use crate::recycle::{recycle_groups, MixConfig, SourceSet};
use crate::rng::{stream_rng, tag};
use crate::rollout::{expected_solve_accuracy, sample_group};
use crate::tasks::{gen_tasks, load_tasks, ArithOp, TaskSet, TaskSpace};
use crate::tts::{solve_eval, tts_eval, DEFAULT_MAX_ROUNDS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Tabular,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    ModArith,
    MaxOfList,
}

/// Flat run configuration. Every key is optional in the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,

    pub policy: PolicyKind,
    pub hidden_dim: usize,
    /// Tabular only: scale of the seeded logit noise; 0 means uniform.
    pub init_noise: f64,

    pub family: FamilyKind,
    pub modulus: u32,
    pub op: ArithOp,
    pub list_len: usize,
    pub max_value: i64,
    /// Generated task count when `tasks` is unset.
    pub num_tasks: usize,
    pub task_seed: u64,

    pub group_size: usize,
    pub epsilon: f64,
    pub kl_coef: f64,
    /// Defaults to 0.1 for tabular and 0.01 for mlp.
    pub step_size: Option<f64>,
    pub batch_size: usize,
    pub steps: usize,
    pub ref_refresh: usize,

    pub recycle: bool,
    pub recycle_answer: bool,
    pub recycle_cot: bool,
    pub mix_pointwise: f64,
    pub mix_pairwise: f64,
    pub mix_reflect: f64,
    /// Defaults to twice the group size.
    pub recycle_budget: Option<usize>,
    /// Defaults to the budget.
    pub recycle_quota: Option<usize>,
    pub max_pairs: usize,
    pub recycle_objective: RecycleObjective,

    pub max_rounds: usize,

    pub tasks: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: 1,
            policy: PolicyKind::Mlp,
            hidden_dim: 64,
            init_noise: 0.0,
            family: FamilyKind::ModArith,
            modulus: 20,
            op: ArithOp::Add,
            list_len: 4,
            max_value: 20,
            num_tasks: 2000,
            task_seed: 0,
            group_size: 8,
            epsilon: DEFAULT_EPSILON,
            kl_coef: DEFAULT_KL_COEF,
            step_size: None,
            batch_size: 8,
            steps: 1000,
            ref_refresh: 0,
            recycle: true,
            recycle_answer: true,
            recycle_cot: true,
            mix_pointwise: 1.0,
            mix_pairwise: 1.0,
            mix_reflect: 1.0,
            recycle_budget: None,
            recycle_quota: None,
            max_pairs: 4,
            recycle_objective: RecycleObjective::Grpo,
            max_rounds: DEFAULT_MAX_ROUNDS,
            tasks: None,
            checkpoint: PathBuf::from("checkpoint.json"),
            metrics: PathBuf::from("metrics.jsonl"),
        }
    }
}

impl RunConfig {
    /// Parses TOML text. Unknown keys and mistyped values are config errors.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        if self.hidden_dim == 0 {
            return bad("hidden_dim must be at least 1");
        }
        if !(self.init_noise >= 0.0 && self.init_noise.is_finite()) {
            return bad("init_noise must be >= 0");
        }
        if self.num_tasks == 0 {
            return bad("num_tasks must be at least 1");
        }
        if self.max_rounds == 0 {
            return bad("max_rounds must be at least 1");
        }
        self.space().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train_config()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn space(&self) -> TaskSpace {
        match self.family {
            FamilyKind::ModArith => TaskSpace::ModArith {
                modulus: self.modulus,
                op: self.op,
            },
            FamilyKind::MaxOfList => TaskSpace::MaxOfList {
                len: self.list_len,
                max_value: self.max_value,
            },
        }
    }

    pub fn step_size(&self) -> f64 {
        self.step_size.unwrap_or(match self.policy {
            PolicyKind::Tabular => DEFAULT_TABULAR_STEP,
            PolicyKind::Mlp => DEFAULT_MLP_STEP,
        })
    }

    pub fn recycle_config(&self) -> Option<RecycleConfig> {
        if !self.recycle {
            return None;
        }
        let budget = self.recycle_budget.unwrap_or(2 * self.group_size);
        Some(RecycleConfig {
            sources: SourceSet {
                answer: self.recycle_answer,
                cot: self.recycle_cot,
            },
            mix: MixConfig {
                pointwise: self.mix_pointwise,
                pairwise: self.mix_pairwise,
                reflect: self.mix_reflect,
                budget,
            },
            max_pairs: self.max_pairs,
            quota: self.recycle_quota.unwrap_or(budget),
            objective: self.recycle_objective,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            group_size: self.group_size,
            epsilon: self.epsilon,
            kl_coef: self.kl_coef,
            step_size: self.step_size(),
            batch_size: self.batch_size,
            ref_refresh: self.ref_refresh,
            recycle: self.recycle_config(),
            workers: self.workers,
        }
    }

    pub fn new_policy(&self) -> Result<PolicyModel> {
        Ok(match self.policy {
            PolicyKind::Tabular => {
                let init = if self.init_noise > 0.0 {
                    TabularInit::SeededNoise {
                        scale: self.init_noise,
                        seed: self.seed,
                    }
                } else {
                    TabularInit::Uniform
                };
                tabular_policy_new(self.space(), &Mode::ALL, init)?.into()
            }
            PolicyKind::Mlp => mlp_policy_new(self.space(), self.hidden_dim, &Mode::ALL, self.seed)?.into(),
        })
    }

    /// Tasks from `tasks` if set, else `num_tasks` generated from `task_seed`.
    pub fn load_tasks(&self) -> Result<TaskSet> {
        let tasks = match &self.tasks {
            Some(path) => load_tasks(path)?,
            None => gen_tasks(&self.space(), self.num_tasks, self.task_seed)?,
        };
        if tasks.is_empty() {
            return Err(Error::Param("task set is empty".into()));
        }
        for task in &tasks {
            if !self.space().admits(task) {
                return Err(Error::Validation {
                    id: task.id.clone(),
                    message: "question outside the configured task space".into(),
                });
            }
        }
        Ok(tasks)
    }

    fn load_checkpoint(&self) -> Result<PolicyModel> {
        let policy = PolicyModel::load(&self.checkpoint)?;
        if *crate::policy::Policy::space(&policy) != self.space() {
            return Err(Error::Config(format!(
                "checkpoint {} was trained on a different task space",
                self.checkpoint.display()
            )));
        }
        Ok(policy)
    }
}

#[derive(Debug, Parser)]
#[command(name = "coevolve", version, about = "Policy and self-judge co-training on verifiable tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and write a checkpoint plus per-step metrics.
    Train(Common),
    /// Single-pass solve accuracy of a checkpoint.
    Eval(Common),
    /// Generate, self-judge, revise loop.
    Tts {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        max_rounds: Option<usize>,
        /// Write every trace as JSONL.
        #[arg(long)]
        dump_traces: Option<PathBuf>,
    },
    /// Precision, recall and F1 of the model judging its own answers.
    JudgeStats(Common),
    /// Write the recycled samples built from fresh rollouts as JSONL.
    RecycleDump {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set kl_coef=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
}

fn parse_override(raw: &str) -> Result<(String, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{raw}` is not KEY=VALUE")))?;
    let key = key.trim().to_string();
    let value = value.trim();
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((key, parsed))
}

impl Common {
    /// Config file, then `--set` overrides, then dedicated flags.
    pub fn resolve(&self, extra: &[(&str, toml::Value)]) -> Result<RunConfig> {
        let mut table = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        for raw in &self.overrides {
            let (k, v) = parse_override(raw)?;
            table.insert(k, v);
        }
        let path = |p: &PathBuf| toml::Value::String(p.to_string_lossy().into_owned());
        let int = |n: u64| -> Result<toml::Value> {
            i64::try_from(n)
                .map(toml::Value::Integer)
                .map_err(|_| Error::Config(format!("{n} is out of range")))
        };
        if let Some(p) = &self.tasks {
            table.insert("tasks".into(), path(p));
        }
        if let Some(p) = &self.checkpoint {
            table.insert("checkpoint".into(), path(p));
        }
        if let Some(p) = &self.metrics {
            table.insert("metrics".into(), path(p));
        }
        if let Some(s) = self.seed {
            table.insert("seed".into(), int(s)?);
        }
        if let Some(s) = self.steps {
            table.insert("steps".into(), int(s as u64)?);
        }
        if let Some(w) = self.workers {
            table.insert("workers".into(), int(w as u64)?);
        }
        for (k, v) in extra {
            table.insert(k.to_string(), v.clone());
        }
        RunConfig::from_table(table)
    }
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn cmd_train(config: &RunConfig) -> Result<String> {
    let tasks = config.load_tasks()?;
    let policy = config.new_policy()?;
    let mut trainer = Trainer::new(policy, config.train_config())?;
    let mut sink = MetricsSink::create(&config.metrics)?;
    let mut last = None;
    trainer.run(&tasks, config.steps, |report| {
        sink.append(report)?;
        last = Some(report.clone());
        Ok(())
    })?;
    trainer.policy.save(&config.checkpoint)?;
    Ok(match last {
        Some(r) => format!(
            "train: {} steps, final mean_reward {:.4}, kl {:.4}, checkpoint {}",
            config.steps,
            r.mean_reward,
            r.kl_value,
            config.checkpoint.display()
        ),
        None => format!("train: 0 steps, initial checkpoint {}", config.checkpoint.display()),
    })
}

pub fn cmd_eval(config: &RunConfig) -> Result<String> {
    let policy = config.load_checkpoint()?;
    let tasks = config.load_tasks()?;
    let accuracy = solve_eval(&policy, &tasks, config.seed, config.workers)?;
    let expected: Vec<f64> = par::map(tasks.tasks(), config.workers, |_, t| expected_solve_accuracy(&policy, t))
        .into_iter()
        .collect::<Result<_>>()?;
    let expected = expected.iter().sum::<f64>() / expected.len() as f64;
    MetricsSink::open(&config.metrics)?.append(&json!({
        "command": "eval",
        "seed": config.seed,
        "tasks": tasks.len(),
        "accuracy": accuracy,
        "expected_accuracy": expected,
    }))?;
    Ok(format!(
        "eval: accuracy {accuracy:.4} (expected {expected:.4}) over {} tasks",
        tasks.len()
    ))
}

pub fn cmd_tts(config: &RunConfig, dump_traces: Option<&Path>) -> Result<String> {
    let policy = config.load_checkpoint()?;
    let tasks = config.load_tasks()?;
    let (summary, traces) = tts_eval(&policy, &tasks, config.max_rounds, config.seed, config.workers)?;
    if let Some(path) = dump_traces {
        write_jsonl(path, &traces)?;
    }
    let mut record = serde_json::to_value(&summary)?;
    record["command"] = json!("tts");
    record["seed"] = json!(config.seed);
    MetricsSink::open(&config.metrics)?.append(&record)?;
    Ok(format!(
        "tts: accuracy {:.4} vs single-pass {:.4}, mean rounds {:.3}, self-accepted {:.4}",
        summary.accuracy, summary.single_pass_accuracy, summary.mean_rounds, summary.self_accept_rate
    ))
}

pub fn cmd_judge_stats(config: &RunConfig) -> Result<String> {
    let policy = config.load_checkpoint()?;
    let tasks = config.load_tasks()?;
    let stats = judge_stats(&policy, &tasks, config.seed, config.workers)?;
    let mut record = serde_json::to_value(stats)?;
    record["command"] = json!("judge_stats");
    record["seed"] = json!(config.seed);
    record["tasks"] = json!(tasks.len());
    MetricsSink::open(&config.metrics)?.append(&record)?;
    Ok(format!(
        "judge-stats: precision {:.4} recall {:.4} f1 {:.4} (tp {} fp {} fn {} tn {})",
        stats.precision, stats.recall, stats.f1, stats.true_pos, stats.false_pos, stats.false_neg, stats.true_neg
    ))
}

/// Builds `steps` recycle batches (at least one) from fresh rollouts of the
/// checkpoint and writes them as JSONL.
pub fn cmd_recycle_dump(config: &RunConfig, out: &Path) -> Result<String> {
    let policy = config.load_checkpoint()?;
    let tasks = config.load_tasks()?;
    let rc = config
        .recycle_config()
        .ok_or_else(|| Error::Config("recycle-dump needs recycle = true".into()))?;
    let train = config.train_config();
    let mut batches = Vec::new();
    let mut totals = [0usize; 3];
    for step in 0..config.steps.max(1) as u64 {
        let batch = select_batch(&tasks, train.batch_size, config.seed, step);
        let groups = par::map(&batch, config.workers, |i, task| {
            let mut rng = stream_rng(config.seed, &[tag::ROLLOUT, step, i as u64]);
            sample_group(&policy, task, config.group_size, &mut rng)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let mut rng = stream_rng(config.seed, &[tag::RECYCLE, step]);
        let recycled = recycle_groups(&groups, rc.sources, rc.max_pairs, &rc.mix, step, &mut rng);
        for (t, c) in totals.iter_mut().zip(recycled.counts()) {
            *t += c;
        }
        batches.push(recycled);
    }
    write_jsonl(out, &batches)?;
    Ok(format!(
        "recycle-dump: {} batches, pointwise {} pairwise {} reflect {} (caps per batch {:?})",
        batches.len(),
        totals[0],
        totals[1],
        totals[2],
        rc.mix.caps()
    ))
}

/// Runs one parsed command and returns its summary line.
pub fn run(cli: Cli) -> Result<String> {
    let summary = match cli.command {
        Command::Train(c) => {
            let config = c.resolve(&[])?;
            par::init_workers(config.workers);
            cmd_train(&config)?
        }
        Command::Eval(c) => {
            let config = c.resolve(&[])?;
            par::init_workers(config.workers);
            cmd_eval(&config)?
        }
        Command::Tts {
            common,
            max_rounds,
            dump_traces,
        } => {
            let extra: Vec<(&str, toml::Value)> = max_rounds
                .map(|r| ("max_rounds", toml::Value::Integer(r as i64)))
                .into_iter()
                .collect();
            let config = common.resolve(&extra)?;
            par::init_workers(config.workers);
            cmd_tts(&config, dump_traces.as_deref())?
        }
        Command::JudgeStats(c) => {
            let config = c.resolve(&[])?;
            par::init_workers(config.workers);
            cmd_judge_stats(&config)?
        }
        Command::RecycleDump { common, out } => {
            let config = common.resolve(&[])?;
            par::init_workers(config.workers);
            cmd_recycle_dump(&config, &out)?
        }
    };
    Ok(summary)
}
