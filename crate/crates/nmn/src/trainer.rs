//! Minibatch SGD over a curriculum plan, with metrics and checkpoints.
//!
//! Each iteration draws its presentation order from the plan, folds the
//! examples into batches, and applies plain SGD with the batch-mean
//! gradient: w <- w - lr * (sum of per-example gradients) / batch_len.
//! Gradients inside a batch may be computed on worker threads, but they
//! are always reduced in presentation order, so a run's outputs are a
//! pure function of its inputs and seed no matter how many threads it
//! uses.
//!
//! After every iteration the model is scored on the held-out set
//! (argmax over the answer distribution, ties to the lowest index) and
//! one metrics row is appended. The registry snapshot with the highest
//! accuracy so far is kept as the best checkpoint; the first iteration
//! to reach the peak wins ties.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::rc::Rc;

use rayon::prelude::*;
use thiserror::Error;

use crate::curriculum::{draw_iteration, IterationPlan, ModuleLossTracker};
use crate::dsl::ModuleKind;
use crate::executor::{execute, execute_with_losses, ExecError, ExecInput, LossConfig};
use crate::modules::AnswerSlots;
use crate::registry::ParameterRegistry;
use crate::synth::{Dataset, SceneExample};
use crate::tape::{GradStore, TapeError};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Weight of the intermediate supervision term in the total loss.
    pub lambda: f64,
    /// Average the per-step losses instead of summing them.
    pub average_intermediate: bool,
    pub seed: u64,
    /// Worker threads for the forward/backward passes. One means fully
    /// sequential.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            batch_size: 64,
            lambda: 1.0,
            average_intermediate: false,
            seed: 0,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub difficulty_key: String,
    /// Cumulative presentations, including repeats of one example.
    pub presentations: usize,
    /// Cumulative count of distinct examples seen so far.
    pub distinct: usize,
    /// Mean total loss per presentation over this iteration.
    pub train_loss: f64,
    pub eval_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("iteration,difficulty_key,presentations,distinct,train_loss,eval_accuracy\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.iteration,
                r.difficulty_key,
                r.presentations,
                r.distinct,
                r.train_loss,
                r.eval_accuracy
            )
            .expect("writing to a string cannot fail");
        }
        out
    }
}

/// A registry snapshot taken when evaluation peaked.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub registry: ParameterRegistry,
    pub accuracy: f64,
    pub iteration: usize,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub metrics: MetricsLog,
    pub best: Option<Checkpoint>,
    /// The registry after the final iteration.
    pub registry: ParameterRegistry,
    pub warnings: Vec<String>,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("example {example_id}: loss is not finite")]
    NonFiniteLoss { example_id: String },
    #[error("evaluation requires at least one example")]
    EmptyEval,
    #[error("batch size must be positive")]
    ZeroBatch,
    #[error("example {example_id}: {source}")]
    Exec {
        example_id: String,
        source: ExecError,
    },
    #[error("example {example_id}: {source}")]
    Tape {
        example_id: String,
        source: TapeError,
    },
}

/// Mean loss and per-module-kind mean losses of one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub loss_sum: f64,
    pub kind_means: BTreeMap<ModuleKind, f64>,
}

struct ExamplePass {
    total: f64,
    grads: GradStore,
    /// (module kind, loss value) for the answer loss and every
    /// supervised step.
    kind_losses: Vec<(ModuleKind, f64)>,
}

fn example_pass(
    registry: &ParameterRegistry,
    slots: AnswerSlots,
    example: &SceneExample,
    loss_cfg: &LossConfig,
) -> Result<ExamplePass, TrainError> {
    let input = ExecInput {
        program: &example.program,
        features: Rc::new(example.features.clone()),
        embeddings: &example.args,
        answers: slots,
    };
    let (tape, _nodes, losses) =
        execute_with_losses(registry, &input, &example.targets, example.gold, *loss_cfg).map_err(
            |source| TrainError::Exec {
                example_id: example.id.clone(),
                source,
            },
        )?;
    let total = tape.value(losses.total)[0];
    if !total.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            example_id: example.id.clone(),
        });
    }
    let backward = tape
        .backward(registry, losses.total)
        .map_err(|source| TrainError::Tape {
            example_id: example.id.clone(),
            source,
        })?;

    let answer_kind = example
        .program
        .steps()
        .last()
        .expect("programs are nonempty")
        .kind;
    let mut kind_losses = vec![(answer_kind, tape.value(losses.answer)[0])];
    for (&step, &node) in &losses.per_step {
        kind_losses.push((example.program.steps()[step].kind, tape.value(node)[0]));
    }
    Ok(ExamplePass {
        total,
        grads: backward.grads,
        kind_losses,
    })
}

fn batch_passes(
    registry: &ParameterRegistry,
    slots: AnswerSlots,
    batch: &[&SceneExample],
    loss_cfg: &LossConfig,
    pool: Option<&rayon::ThreadPool>,
) -> Result<Vec<ExamplePass>, TrainError> {
    match pool {
        Some(pool) => pool.install(|| {
            batch
                .par_iter()
                .map(|ex| example_pass(registry, slots, ex, loss_cfg))
                .collect()
        }),
        None => batch
            .iter()
            .map(|ex| example_pass(registry, slots, ex, loss_cfg))
            .collect(),
    }
}

/// Runs one SGD step on a batch and reports its losses.
pub fn train_batch(
    registry: &mut ParameterRegistry,
    slots: AnswerSlots,
    batch: &[&SceneExample],
    loss_cfg: &LossConfig,
    learning_rate: f64,
    pool: Option<&rayon::ThreadPool>,
) -> Result<BatchStats, TrainError> {
    assert!(!batch.is_empty(), "batches hold at least one example");
    let passes = batch_passes(registry, slots, batch, loss_cfg, pool)?;

    let mut grads = GradStore::new();
    let mut loss_sum = 0.0;
    let mut kind_sums: BTreeMap<ModuleKind, (f64, usize)> = BTreeMap::new();
    for pass in &passes {
        loss_sum += pass.total;
        grads
            .accumulate(&pass.grads)
            .expect("all gradients come from one registry layout");
        for &(kind, value) in &pass.kind_losses {
            let entry = kind_sums.entry(kind).or_insert((0.0, 0));
            entry.0 += value;
            entry.1 += 1;
        }
    }
    grads.scale(1.0 / batch.len() as f64);
    registry.apply_sgd(&grads, learning_rate);

    let kind_means = kind_sums
        .into_iter()
        .map(|(kind, (sum, count))| (kind, sum / count as f64))
        .collect();
    Ok(BatchStats {
        loss_sum,
        kind_means,
    })
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn eval_example(
    registry: &ParameterRegistry,
    slots: AnswerSlots,
    example: &SceneExample,
) -> Result<bool, TrainError> {
    let input = ExecInput {
        program: &example.program,
        features: Rc::new(example.features.clone()),
        embeddings: &example.args,
        answers: slots,
    };
    let trace = execute(registry, &input).map_err(|source| TrainError::Exec {
        example_id: example.id.clone(),
        source,
    })?;
    Ok(argmax(trace.answer()) == example.gold)
}

fn evaluate_with(
    registry: &ParameterRegistry,
    data: &Dataset,
    pool: Option<&rayon::ThreadPool>,
) -> Result<f64, TrainError> {
    if data.examples.is_empty() {
        return Err(TrainError::EmptyEval);
    }
    let slots = data.answer_slots();
    let verdicts: Vec<bool> = match pool {
        Some(pool) => pool.install(|| {
            data.examples
                .par_iter()
                .map(|ex| eval_example(registry, slots, ex))
                .collect::<Result<_, _>>()
        })?,
        None => data
            .examples
            .iter()
            .map(|ex| eval_example(registry, slots, ex))
            .collect::<Result<_, _>>()?,
    };
    let correct = verdicts.iter().filter(|&&v| v).count();
    Ok(correct as f64 / data.examples.len() as f64)
}

/// Accuracy of the registry on a dataset: fraction of examples whose
/// highest-probability answer is the gold one.
pub fn evaluate(
    registry: &ParameterRegistry,
    data: &Dataset,
    threads: usize,
) -> Result<f64, TrainError> {
    let pool = build_pool(threads);
    evaluate_with(registry, data, pool.as_ref())
}

fn build_pool(threads: usize) -> Option<rayon::ThreadPool> {
    (threads > 1).then(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("worker pool construction succeeds")
    })
}

/// splitmix64 finalizer for deriving per-iteration seeds.
fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const DRAW_SALT: u64 = 0x6472_6177; // "draw"

pub fn run(
    mut registry: ParameterRegistry,
    plan: &[IterationPlan],
    train: &Dataset,
    eval: &Dataset,
    cfg: &TrainConfig,
) -> Result<RunOutcome, TrainError> {
    if cfg.batch_size == 0 {
        return Err(TrainError::ZeroBatch);
    }
    let pool = build_pool(cfg.threads);
    let slots = train.answer_slots();
    let loss_cfg = LossConfig {
        lambda: cfg.lambda,
        average_intermediate: cfg.average_intermediate,
    };

    let mut tracker = ModuleLossTracker::default();
    let mut metrics = MetricsLog::default();
    let mut warnings = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut previous_distinct: Vec<usize> = Vec::new();
    let mut all_distinct: BTreeSet<usize> = BTreeSet::new();
    let mut presentations = 0usize;

    for iteration in plan {
        let seed = mix(cfg.seed, DRAW_SALT ^ ((iteration.index as u64) << 16));
        let order = draw_iteration(
            &train.examples,
            iteration,
            &tracker,
            &previous_distinct,
            seed,
        );
        if order.is_empty() {
            warnings.push(format!(
                "iteration {} ({}) drew an empty pool and was skipped",
                iteration.index, iteration.difficulty_key
            ));
            continue;
        }

        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SceneExample> = chunk.iter().map(|&i| &train.examples[i]).collect();
            let stats = train_batch(
                &mut registry,
                slots,
                &batch,
                &loss_cfg,
                cfg.learning_rate,
                pool.as_ref(),
            )?;
            loss_sum += stats.loss_sum;
            tracker.observe(&stats.kind_means);
        }

        presentations += order.len();
        let distinct: BTreeSet<usize> = order.iter().copied().collect();
        all_distinct.extend(distinct.iter().copied());
        previous_distinct = distinct.into_iter().collect();

        let accuracy = evaluate_with(&registry, eval, pool.as_ref())?;
        metrics.rows.push(MetricsRow {
            iteration: iteration.index,
            difficulty_key: iteration.difficulty_key.clone(),
            presentations,
            distinct: all_distinct.len(),
            train_loss: loss_sum / order.len() as f64,
            eval_accuracy: accuracy,
        });
        if best.as_ref().is_none_or(|b| accuracy > b.accuracy) {
            best = Some(Checkpoint {
                registry: registry.clone(),
                accuracy,
                iteration: iteration.index,
            });
        }
    }

    Ok(RunOutcome {
        metrics,
        best,
        registry,
        warnings,
    })
}
