//! Run configuration: a JSON file merged with command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use nmn::curriculum::{PlanConfig, Strategy, Weighting};
use nmn::trainer::TrainConfig;

use crate::CliError;

/// Everything one training run needs. Field defaults mirror the library
/// defaults, so an empty JSON object is a valid config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub strategy: Strategy,
    pub weighting: Weighting,
    pub pretrain: usize,
    pub repeats: usize,
    pub length_split: bool,
    pub sample_size: usize,
    pub replay_fraction: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub average_intermediate: bool,
    pub seed: u64,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let plan = PlanConfig::default();
        let train = TrainConfig::default();
        RunConfig {
            strategy: plan.strategy,
            weighting: plan.weighting,
            pretrain: plan.pretrain,
            repeats: plan.repeats,
            length_split: plan.length_split,
            sample_size: plan.sample_size,
            replay_fraction: plan.replay_fraction,
            iterations: plan.iterations,
            learning_rate: train.learning_rate,
            batch_size: train.batch_size,
            lambda: train.lambda,
            average_intermediate: train.average_intermediate,
            seed: train.seed,
            threads: train.threads,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
    }

    pub fn plan_config(&self) -> PlanConfig {
        PlanConfig {
            strategy: self.strategy,
            weighting: self.weighting,
            pretrain: self.pretrain,
            repeats: self.repeats,
            length_split: self.length_split,
            sample_size: self.sample_size,
            replay_fraction: self.replay_fraction,
            iterations: self.iterations,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            lambda: self.lambda,
            average_intermediate: self.average_intermediate,
            seed: self.seed,
            threads: self.threads,
        }
    }

    pub fn to_pretty_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        text
    }
}

pub fn parse_strategy(s: &str) -> Result<Strategy, String> {
    match s {
        "curriculum" => Ok(Strategy::Curriculum),
        "random" => Ok(Strategy::Random),
        "unbalanced" => Ok(Strategy::Unbalanced),
        "balanced" => Ok(Strategy::Balanced),
        other => Err(format!(
            "unknown strategy `{other}`; expected curriculum, random, unbalanced or balanced"
        )),
    }
}

pub fn parse_weighting(s: &str) -> Result<Weighting, String> {
    match s {
        "uniform" => Ok(Weighting::Uniform),
        "answer_balanced" => Ok(Weighting::AnswerBalanced),
        "module_loss" => Ok(Weighting::ModuleLoss),
        other => Err(format!(
            "unknown weighting `{other}`; expected uniform, answer_balanced or module_loss"
        )),
    }
}

pub fn strategy_name(s: Strategy) -> &'static str {
    match s {
        Strategy::Curriculum => "curriculum",
        Strategy::Random => "random",
        Strategy::Unbalanced => "unbalanced",
        Strategy::Balanced => "balanced",
    }
}

pub fn weighting_name(w: Weighting) -> &'static str {
    match w {
        Weighting::Uniform => "uniform",
        Weighting::AnswerBalanced => "answer_balanced",
        Weighting::ModuleLoss => "module_loss",
    }
}

/// `--config` plus per-field overrides, shared by `plan` and `train`.
#[derive(Debug, clap::Args)]
pub struct ConfigArgs {
    /// JSON config file; flag overrides apply on top of it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// curriculum, random, unbalanced or balanced.
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<Strategy>,
    /// uniform, answer_balanced or module_loss.
    #[arg(long, value_parser = parse_weighting)]
    pub weighting: Option<Weighting>,
    /// Uniform warm-up iterations before the curriculum stages.
    #[arg(long)]
    pub pretrain: Option<usize>,
    /// Times each curriculum stage repeats.
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Split each level into short/medium/long buckets (true or false).
    #[arg(long)]
    pub length_split: Option<bool>,
    /// Presentations per sampled iteration.
    #[arg(long)]
    pub sample_size: Option<usize>,
    /// Fraction of each iteration redrawn from the previous one.
    #[arg(long)]
    pub replay_fraction: Option<f64>,
    /// Iteration count for the random baseline.
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Weight of the intermediate supervision term.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Average step losses instead of summing them (true or false).
    #[arg(long)]
    pub average_intermediate: Option<bool>,
    /// Seed for parameter initialization and sampling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; one keeps the run fully sequential.
    #[arg(long)]
    pub threads: Option<usize>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.strategy {
            cfg.strategy = v;
        }
        if let Some(v) = self.weighting {
            cfg.weighting = v;
        }
        if let Some(v) = self.pretrain {
            cfg.pretrain = v;
        }
        if let Some(v) = self.repeats {
            cfg.repeats = v;
        }
        if let Some(v) = self.length_split {
            cfg.length_split = v;
        }
        if let Some(v) = self.sample_size {
            cfg.sample_size = v;
        }
        if let Some(v) = self.replay_fraction {
            cfg.replay_fraction = v;
        }
        if let Some(v) = self.iterations {
            cfg.iterations = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.average_intermediate {
            cfg.average_intermediate = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.threads {
            cfg.threads = v;
        }
        if cfg.batch_size == 0 {
            return Err(CliError::Config("batch size must be positive".into()));
        }
        if cfg.threads == 0 {
            return Err(CliError::Config("thread count must be positive".into()));
        }
        Ok(cfg)
    }
}
