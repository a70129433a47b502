//! Training schedules: curricula, sampling weights, and replay.
//!
//! A plan is a list of iterations. Each iteration names a pool of
//! training examples (everything, one difficulty level, or one program
//! length bucket inside a level), a weighting for drawing from that
//! pool, and whether a replay slice of the previous iteration's examples
//! is mixed in. Difficulty is the number of `select` steps in a
//! program: each select grounds one more referent that later steps must
//! combine.
//!
//! Three weightings are available. `Uniform` draws every pool member
//! with equal probability. `AnswerBalanced` weights each example by the
//! reciprocal of how many pool examples share its answer module kind, so
//! no answer family dominates. `ModuleLoss` weights an example by the
//! summed running-average training loss of the module kinds its program
//! uses, pushing sampling toward the modules that are currently hardest.
//! Replay redraws a fixed fraction of each iteration uniformly from the
//! distinct examples of the immediately previous iteration.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::ModuleKind;
use crate::synth::SceneExample;

/// How the training stream is organized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Easy-to-hard level schedule with optional pretraining, repeats,
    /// and length splits.
    Curriculum,
    /// Uniform draws from the full pool every iteration.
    Random,
    /// Full passes over the pool in its natural (unbalanced) answer
    /// distribution.
    Unbalanced,
    /// Full passes over a pool downsampled so every answer kind appears
    /// equally often.
    Balanced,
}

/// How examples are weighted when an iteration samples its pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Uniform,
    AnswerBalanced,
    ModuleLoss,
}

/// Which slice of the training set an iteration draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolFilter {
    All,
    Level(usize),
    /// A program-length tercile (0 short, 1 medium, 2 long) within a
    /// level, computed per object-count stratum when the pool resolves.
    LevelBucket { level: usize, bucket: usize },
}

/// How many presentations an iteration schedules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DrawMode {
    /// Weighted sample of a fixed size, with replacement.
    Sample { size: usize },
    /// Every pool example exactly once, shuffled.
    FullPass,
    /// Every answer kind downsampled to the rarest kind's count, then
    /// shuffled.
    BalancedPass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationPlan {
    pub index: usize,
    /// Label for logs and metrics, e.g. `pretrain`, `level2`,
    /// `level3-short`, `all`.
    pub difficulty_key: String,
    pub filter: PoolFilter,
    pub weighting: Weighting,
    /// Fraction of this iteration's sample redrawn uniformly from the
    /// previous iteration's distinct examples. Zero disables replay.
    pub replay_fraction: f64,
    pub mode: DrawMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanConfig {
    pub strategy: Strategy,
    pub weighting: Weighting,
    /// Pretraining iterations drawn uniformly from the full pool before
    /// the level schedule starts. Curriculum only.
    pub pretrain: usize,
    /// Times each curriculum stage is repeated. Curriculum only.
    pub repeats: usize,
    /// Split each level into short/medium/long program length buckets.
    /// Curriculum only.
    pub length_split: bool,
    /// Presentations per sampled iteration.
    pub sample_size: usize,
    /// Fraction of each sampled iteration redrawn from the previous
    /// iteration's distinct examples.
    pub replay_fraction: f64,
    /// Iteration count for the non-curriculum strategies.
    pub iterations: usize,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            strategy: Strategy::Curriculum,
            weighting: Weighting::Uniform,
            pretrain: 0,
            repeats: 1,
            length_split: false,
            sample_size: 4000,
            replay_fraction: 0.2,
            iterations: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("sample size must be positive")]
    ZeroSample,
    #[error("repeat count must be at least 1")]
    ZeroRepeats,
    #[error("replay fraction must lie in [0, 1), got {0}")]
    BadReplay(f64),
}

/// Levels covered by the curriculum, in teaching order.
pub const LEVELS: [usize; 4] = [1, 2, 3, 4];

const BUCKET_NAMES: [&str; 3] = ["short", "medium", "long"];

pub fn build_plan(cfg: &PlanConfig) -> Result<Vec<IterationPlan>, PlanError> {
    if !(0.0..1.0).contains(&cfg.replay_fraction) {
        return Err(PlanError::BadReplay(cfg.replay_fraction));
    }
    let mut plan = Vec::new();
    match cfg.strategy {
        Strategy::Curriculum => {
            if cfg.sample_size == 0 {
                return Err(PlanError::ZeroSample);
            }
            if cfg.repeats == 0 {
                return Err(PlanError::ZeroRepeats);
            }
            for _ in 0..cfg.pretrain {
                plan.push(IterationPlan {
                    index: plan.len(),
                    difficulty_key: "pretrain".to_string(),
                    filter: PoolFilter::All,
                    weighting: Weighting::Uniform,
                    replay_fraction: 0.0,
                    mode: DrawMode::Sample {
                        size: cfg.sample_size,
                    },
                });
            }
            let mut first_stage = true;
            for level in LEVELS {
                let buckets: &[Option<usize>] = if cfg.length_split {
                    &[Some(0), Some(1), Some(2)]
                } else {
                    &[None]
                };
                for bucket in buckets {
                    for _ in 0..cfg.repeats {
                        let (filter, difficulty_key) = match bucket {
                            Some(b) => (
                                PoolFilter::LevelBucket { level, bucket: *b },
                                format!("level{level}-{}", BUCKET_NAMES[*b]),
                            ),
                            None => (PoolFilter::Level(level), format!("level{level}")),
                        };
                        plan.push(IterationPlan {
                            index: plan.len(),
                            difficulty_key,
                            filter,
                            weighting: cfg.weighting,
                            replay_fraction: if first_stage {
                                0.0
                            } else {
                                cfg.replay_fraction
                            },
                            mode: DrawMode::Sample {
                                size: cfg.sample_size,
                            },
                        });
                        first_stage = false;
                    }
                }
            }
        }
        Strategy::Random => {
            if cfg.sample_size == 0 && cfg.iterations > 0 {
                return Err(PlanError::ZeroSample);
            }
            for _ in 0..cfg.iterations {
                plan.push(IterationPlan {
                    index: plan.len(),
                    difficulty_key: "all".to_string(),
                    filter: PoolFilter::All,
                    weighting: Weighting::Uniform,
                    replay_fraction: 0.0,
                    mode: DrawMode::Sample {
                        size: cfg.sample_size,
                    },
                });
            }
        }
        Strategy::Unbalanced | Strategy::Balanced => {
            let (key, mode) = if cfg.strategy == Strategy::Unbalanced {
                ("epoch", DrawMode::FullPass)
            } else {
                ("balanced", DrawMode::BalancedPass)
            };
            for _ in 0..cfg.iterations {
                plan.push(IterationPlan {
                    index: plan.len(),
                    difficulty_key: key.to_string(),
                    filter: PoolFilter::All,
                    weighting: Weighting::Uniform,
                    replay_fraction: 0.0,
                    mode,
                });
            }
        }
    }
    Ok(plan)
}

/// Difficulty level of an example: how many selects its program makes.
pub fn example_level(example: &SceneExample) -> usize {
    example
        .program
        .steps()
        .iter()
        .filter(|c| c.kind == ModuleKind::Select)
        .count()
}

/// Tercile boundary values of a sorted, nonempty slice.
fn tercile_bounds(sorted: &[usize]) -> (usize, usize) {
    let n = sorted.len();
    let t1 = sorted[n.div_ceil(3) - 1];
    let t2 = sorted[(2 * n).div_ceil(3) - 1];
    (t1, t2)
}

/// Resolves a filter to dataset indices. Length buckets are computed
/// per object-count stratum: within each stratum the program lengths are
/// sorted and split at the tercile boundaries, and an example lands in
/// the lowest bucket whose boundary its length does not exceed.
pub fn resolve_pool(examples: &[SceneExample], filter: PoolFilter) -> Vec<usize> {
    match filter {
        PoolFilter::All => (0..examples.len()).collect(),
        PoolFilter::Level(level) => (0..examples.len())
            .filter(|&i| example_level(&examples[i]) == level)
            .collect(),
        PoolFilter::LevelBucket { level, bucket } => {
            let members: Vec<usize> = (0..examples.len())
                .filter(|&i| example_level(&examples[i]) == level)
                .collect();
            let mut strata: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for &i in &members {
                strata.entry(examples[i].objects).or_default().push(i);
            }
            let mut kept = Vec::new();
            for stratum in strata.values() {
                let mut lengths: Vec<usize> = stratum.iter().map(|&i| examples[i].length).collect();
                lengths.sort_unstable();
                let (t1, t2) = tercile_bounds(&lengths);
                for &i in stratum {
                    let len = examples[i].length;
                    let b = if len <= t1 {
                        0
                    } else if len <= t2 {
                        1
                    } else {
                        2
                    };
                    if b == bucket {
                        kept.push(i);
                    }
                }
            }
            kept.sort_unstable();
            kept
        }
    }
}

/// Running average training loss per module kind, updated once per
/// batch with exponential decay.
#[derive(Debug, Clone)]
pub struct ModuleLossTracker {
    decay: f64,
    ema: BTreeMap<ModuleKind, f64>,
}

impl Default for ModuleLossTracker {
    fn default() -> Self {
        ModuleLossTracker::new(0.99)
    }
}

impl ModuleLossTracker {
    pub fn new(decay: f64) -> Self {
        assert!(
            (0.0..1.0).contains(&decay),
            "decay must lie in [0, 1), got {decay}"
        );
        ModuleLossTracker {
            decay,
            ema: BTreeMap::new(),
        }
    }

    /// Folds one batch's mean loss per module kind into the running
    /// averages. Kinds absent from the batch keep their values.
    pub fn observe(&mut self, batch_means: &BTreeMap<ModuleKind, f64>) {
        for (&kind, &mean) in batch_means {
            let entry = self.ema.entry(kind).or_insert(mean);
            *entry = self.decay * *entry + (1.0 - self.decay) * mean;
        }
    }

    pub fn value(&self, kind: ModuleKind) -> Option<f64> {
        self.ema.get(&kind).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.ema.is_empty()
    }

    fn mean_value(&self) -> f64 {
        if self.ema.is_empty() {
            return 0.0;
        }
        self.ema.values().sum::<f64>() / self.ema.len() as f64
    }
}

/// Normalizes weights to sum to one; a degenerate total falls back to
/// uniform.
fn normalize(mut weights: Vec<f64>) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        let n = weights.len().max(1);
        return vec![1.0 / n as f64; weights.len()];
    }
    for w in &mut weights {
        *w /= total;
    }
    weights
}

/// Weight for each answer kind: the reciprocal of its frequency in the
/// list, so every kind gets equal total mass.
pub fn answer_weights(kinds: &[ModuleKind]) -> Vec<f64> {
    let mut counts: BTreeMap<ModuleKind, usize> = BTreeMap::new();
    for &k in kinds {
        *counts.entry(k).or_insert(0) += 1;
    }
    normalize(
        kinds
            .iter()
            .map(|k| 1.0 / counts[k] as f64)
            .collect(),
    )
}

/// Sampling weights for `pool` (indices into `examples`).
pub fn pool_weights(
    examples: &[SceneExample],
    pool: &[usize],
    weighting: Weighting,
    tracker: &ModuleLossTracker,
) -> Vec<f64> {
    match weighting {
        Weighting::Uniform => normalize(vec![1.0; pool.len()]),
        Weighting::AnswerBalanced => {
            let kinds: Vec<ModuleKind> = pool.iter().map(|&i| examples[i].answer_kind).collect();
            answer_weights(&kinds)
        }
        Weighting::ModuleLoss => {
            if tracker.is_empty() {
                return normalize(vec![1.0; pool.len()]);
            }
            let fallback = tracker.mean_value();
            normalize(
                pool.iter()
                    .map(|&i| {
                        examples[i]
                            .program
                            .steps()
                            .iter()
                            .map(|c| tracker.value(c.kind).unwrap_or(fallback))
                            .sum::<f64>()
                    })
                    .collect(),
            )
        }
    }
}

/// Draws by inverse transform over the cumulative weight sums.
fn weighted_draw(pool: &[usize], cumulative: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total = *cumulative.last().expect("pool is nonempty");
    let x = rng.gen_range(0.0..total);
    let idx = cumulative.partition_point(|&c| c <= x);
    pool[idx.min(pool.len() - 1)]
}

/// Samples `size` presentations with replacement: first the replay
/// slice, floor(replay_fraction * size) uniform draws from `seen`, then
/// the remainder weighted from `pool`. An empty `seen` folds the replay
/// slice into fresh draws.
pub fn draw_sample(
    pool: &[usize],
    weights: &[f64],
    size: usize,
    replay_fraction: f64,
    seen: &[usize],
    seed: u64,
) -> Vec<usize> {
    assert_eq!(
        pool.len(),
        weights.len(),
        "each pool entry needs exactly one weight"
    );
    if pool.is_empty() || size == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let replay_count = if seen.is_empty() {
        0
    } else {
        (replay_fraction * size as f64).floor() as usize
    };
    let mut drawn = Vec::with_capacity(size);
    for _ in 0..replay_count {
        drawn.push(seen[rng.gen_range(0..seen.len())]);
    }
    let mut cumulative = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in weights {
        acc += w.max(0.0);
        cumulative.push(acc);
    }
    for _ in replay_count..size {
        drawn.push(weighted_draw(pool, &cumulative, &mut rng));
    }
    drawn
}

/// Materializes one iteration into a presentation order.
pub fn draw_iteration(
    examples: &[SceneExample],
    iteration: &IterationPlan,
    tracker: &ModuleLossTracker,
    seen: &[usize],
    seed: u64,
) -> Vec<usize> {
    let pool = resolve_pool(examples, iteration.filter);
    if pool.is_empty() {
        return Vec::new();
    }
    match iteration.mode {
        DrawMode::Sample { size } => {
            let weights = pool_weights(examples, &pool, iteration.weighting, tracker);
            draw_sample(&pool, &weights, size, iteration.replay_fraction, seen, seed)
        }
        DrawMode::FullPass => {
            let mut order = pool;
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            order
        }
        DrawMode::BalancedPass => {
            let mut groups: BTreeMap<ModuleKind, Vec<usize>> = BTreeMap::new();
            for &i in &pool {
                groups.entry(examples[i].answer_kind).or_default().push(i);
            }
            let m = groups
                .values()
                .map(Vec::len)
                .min()
                .expect("pool is nonempty");
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut order = Vec::with_capacity(m * groups.len());
            for group in groups.values_mut() {
                group.shuffle(&mut rng);
                order.extend_from_slice(&group[..m]);
            }
            order.shuffle(&mut rng);
            order
        }
    }
}

/// Total presentations the plan will schedule against this dataset.
pub fn scheduled_presentations(plan: &[IterationPlan], examples: &[SceneExample]) -> usize {
    plan.iter()
        .map(|it| {
            let pool = resolve_pool(examples, it.filter);
            if pool.is_empty() {
                return 0;
            }
            match it.mode {
                DrawMode::Sample { size } => size,
                DrawMode::FullPass => pool.len(),
                DrawMode::BalancedPass => {
                    let mut counts: BTreeMap<ModuleKind, usize> = BTreeMap::new();
                    for &i in &pool {
                        *counts.entry(examples[i].answer_kind).or_insert(0) += 1;
                    }
                    let m = *counts.values().min().expect("pool is nonempty");
                    m * counts.len()
                }
            }
        })
        .sum()
}
