//! Command line front end: dataset generation, schedule inspection,
//! training, evaluation, single-example traces and gradient checks.
//!
//! Exit codes: 0 on success, 2 for configuration problems, 3 for data
//! problems (unreadable or mismatched files), 4 for numerical failures.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::rc::Rc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use nmn::curriculum::{build_plan, scheduled_presentations, DrawMode, IterationPlan, PlanError};
use nmn::executor::{execute, ExecInput, StepValue};
use nmn::gradcheck::{self, GradcheckConfig};
use nmn::registry::{Dims, ParameterRegistry};
use nmn::synth::{export, generate, load, DataIoError, Dataset, GenConfig, SceneExample};
use nmn::trainer::{self, RunOutcome, TrainError};

use config::{strategy_name, weighting_name, ConfigArgs, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<PlanError> for CliError {
    fn from(e: PlanError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DataIoError> for CliError {
    fn from(e: DataIoError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "nmn",
    about = "Neural module networks over synthetic scenes",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write it as JSONL.
    GenData(GenDataArgs),
    /// Print the iteration schedule a config produces.
    Plan(PlanArgs),
    /// Train a model, writing metrics and checkpoints to a directory.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run one example through the model and print every step.
    Exec(ExecArgs),
    /// Compare analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Output JSONL path.
    #[arg(long)]
    out: PathBuf,
    /// Feature dimension.
    #[arg(long, default_value_t = 32)]
    d: usize,
    /// Objects per scene.
    #[arg(long, default_value_t = 8)]
    k: usize,
    /// Standard deviation of the feature noise.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Examples per difficulty level: one count or four comma-separated.
    #[arg(long, default_value = "5000", value_parser = parse_per_level)]
    per_level: [usize; 4],
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct PlanArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset used to size full and balanced passes exactly.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Training dataset (JSONL).
    #[arg(long)]
    train: PathBuf,
    /// Held-out dataset scored after every iteration.
    #[arg(long)]
    eval: PathBuf,
    /// Output directory for metrics, checkpoints and the resolved config.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint produced by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset to score (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// Worker threads; one keeps the run fully sequential.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Debug, Args)]
struct ExecArgs {
    /// Dataset holding the example (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// Example id; defaults to the first example.
    #[arg(long)]
    id: Option<String>,
    /// Checkpoint to run; a freshly seeded model when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Initialization seed used when no checkpoint is given.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Number of seeds to check, starting at zero.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Feature dimension of the probe model.
    #[arg(long, default_value_t = 6)]
    d: usize,
    /// Objects per probe scene.
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Answer vocabulary size of the probe model.
    #[arg(long, default_value_t = 7)]
    answers: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    /// Maximum accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

fn parse_per_level(s: &str) -> Result<[usize; 4], String> {
    let counts: Vec<usize> = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| format!("`{p}` is not a count"))
        })
        .collect::<Result<_, _>>()?;
    match counts.as_slice() {
        [n] => Ok([*n; 4]),
        [a, b, c, d] => Ok([*a, *b, *c, *d]),
        _ => Err("expected one count or four comma-separated counts".into()),
    }
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> Result<ParameterRegistry, CliError> {
    ParameterRegistry::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn dataset_dims(data: &Dataset) -> Dims {
    Dims {
        d: data.d,
        k: data.k,
        answers: data.vocab.len(),
    }
}

fn check_dims(registry: &ParameterRegistry, data: &Dataset) -> Result<(), CliError> {
    let want = dataset_dims(data);
    let got = registry.dims();
    if got != want {
        return Err(CliError::Data(format!(
            "checkpoint dimensions (d={}, k={}, answers={}) do not match the dataset \
             (d={}, k={}, answers={})",
            got.d, got.k, got.answers, want.d, want.k, want.answers
        )));
    }
    Ok(())
}

fn gen_data(args: &GenDataArgs) -> Result<(), CliError> {
    let cfg = GenConfig {
        d: args.d,
        k: args.k,
        noise: args.noise,
        per_level: args.per_level,
        seed: args.seed,
    };
    let dataset = generate(&cfg).map_err(|e| CliError::Data(e.to_string()))?;
    export(&dataset, &args.out)?;
    println!(
        "wrote {} examples (d={}, k={}, {} answers) to {}",
        dataset.examples.len(),
        dataset.d,
        dataset.k,
        dataset.vocab.len(),
        args.out.display()
    );
    Ok(())
}

fn mode_name(mode: DrawMode) -> &'static str {
    match mode {
        DrawMode::Sample { .. } => "sample",
        DrawMode::FullPass => "full",
        DrawMode::BalancedPass => "balanced",
    }
}

fn iteration_cost(iteration: &IterationPlan, data: Option<&Dataset>) -> Option<usize> {
    match (iteration.mode, data) {
        (_, Some(data)) => Some(scheduled_presentations(
            std::slice::from_ref(iteration),
            &data.examples,
        )),
        (DrawMode::Sample { size }, None) => Some(size),
        (_, None) => None,
    }
}

fn plan_cmd(args: &PlanArgs) -> Result<(), CliError> {
    let cfg = args.config.resolve()?;
    let plan = build_plan(&cfg.plan_config())?;
    let data = args.data.as_deref().map(load_dataset).transpose()?;

    println!(
        "strategy {} with {} weighting, {} iterations",
        strategy_name(cfg.strategy),
        weighting_name(cfg.weighting),
        plan.len()
    );
    println!(
        "{:>4}  {:<16}  {:<8}  {:<15}  {:>6}  {:>13}",
        "iter", "difficulty", "mode", "weighting", "replay", "presentations"
    );
    let mut total = 0usize;
    let mut exact = true;
    for iteration in &plan {
        let cost = iteration_cost(iteration, data.as_ref());
        match cost {
            Some(c) => total += c,
            None => exact = false,
        }
        println!(
            "{:>4}  {:<16}  {:<8}  {:<15}  {:>6}  {:>13}",
            iteration.index,
            iteration.difficulty_key,
            mode_name(iteration.mode),
            weighting_name(iteration.weighting),
            format!("{:.2}", iteration.replay_fraction),
            cost.map_or_else(|| "pool".to_string(), |c| c.to_string()),
        );
    }
    if exact {
        println!("total scheduled presentations: {total}");
    } else {
        println!(
            "total scheduled presentations: {total} plus full or balanced passes \
             (pass --data to size them)"
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct Summary<'a> {
    iterations_run: usize,
    presentations: usize,
    distinct: usize,
    final_accuracy: Option<f64>,
    best_accuracy: Option<f64>,
    best_iteration: Option<usize>,
    warnings: &'a [String],
}

fn write_outputs(out: &Path, cfg: &RunConfig, outcome: &RunOutcome) -> Result<(), CliError> {
    let io_err =
        |path: &Path, e: std::io::Error| CliError::Data(format!("{}: {e}", path.display()));
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;

    let config_path = out.join("resolved_config.json");
    fs::write(&config_path, cfg.to_pretty_json()).map_err(|e| io_err(&config_path, e))?;

    let metrics_path = out.join("metrics.csv");
    fs::write(&metrics_path, outcome.metrics.to_csv()).map_err(|e| io_err(&metrics_path, e))?;

    let last = outcome.metrics.rows.last();
    let summary = Summary {
        iterations_run: outcome.metrics.rows.len(),
        presentations: last.map_or(0, |r| r.presentations),
        distinct: last.map_or(0, |r| r.distinct),
        final_accuracy: last.map(|r| r.eval_accuracy),
        best_accuracy: outcome.best.as_ref().map(|b| b.accuracy),
        best_iteration: outcome.best.as_ref().map(|b| b.iteration),
        warnings: &outcome.warnings,
    };
    let summary_path = out.join("summary.json");
    let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    text.push('\n');
    fs::write(&summary_path, text).map_err(|e| io_err(&summary_path, e))?;

    let final_path = out.join("final.ckpt");
    outcome
        .registry
        .save(&final_path)
        .map_err(|e| CliError::Data(format!("{}: {e}", final_path.display())))?;
    if let Some(best) = &outcome.best {
        let best_path = out.join("best.ckpt");
        best.registry
            .save(&best_path)
            .map_err(|e| CliError::Data(format!("{}: {e}", best_path.display())))?;
    }
    Ok(())
}

fn train_cmd(args: &TrainArgs) -> Result<(), CliError> {
    let cfg = args.config.resolve()?;
    let train_data = load_dataset(&args.train)?;
    let eval_data = load_dataset(&args.eval)?;
    if train_data.d != eval_data.d || train_data.k != eval_data.k {
        return Err(CliError::Data(format!(
            "train data is d={}, k={} but eval data is d={}, k={}",
            train_data.d, train_data.k, eval_data.d, eval_data.k
        )));
    }
    if train_data.vocab.words() != eval_data.vocab.words() {
        return Err(CliError::Data(
            "train and eval datasets use different answer vocabularies".into(),
        ));
    }

    let plan = build_plan(&cfg.plan_config())?;
    let registry = ParameterRegistry::init(cfg.seed, dataset_dims(&train_data))
        .map_err(|e| CliError::Config(e.to_string()))?;
    println!(
        "training on {} examples, evaluating on {}, {} planned iterations",
        train_data.examples.len(),
        eval_data.examples.len(),
        plan.len()
    );

    let outcome = trainer::run(registry, &plan, &train_data, &eval_data, &cfg.train_config())?;

    for row in &outcome.metrics.rows {
        println!(
            "iteration {:>3} {:<16} loss {:<8.4} accuracy {:.4}",
            row.iteration, row.difficulty_key, row.train_loss, row.eval_accuracy
        );
    }
    for warning in &outcome.warnings {
        eprintln!("warning: {warning}");
    }
    write_outputs(&args.out, &cfg, &outcome)?;
    match &outcome.best {
        Some(best) => println!(
            "best accuracy {:.4} at iteration {}; outputs in {}",
            best.accuracy,
            best.iteration,
            args.out.display()
        ),
        None => println!("no iterations ran; outputs in {}", args.out.display()),
    }
    Ok(())
}

fn eval_cmd(args: &EvalArgs) -> Result<(), CliError> {
    if args.threads == 0 {
        return Err(CliError::Config("thread count must be positive".into()));
    }
    let data = load_dataset(&args.data)?;
    let registry = load_checkpoint(&args.checkpoint)?;
    check_dims(&registry, &data)?;
    let accuracy = trainer::evaluate(&registry, &data, args.threads)?;
    println!("accuracy {:.4} on {} examples", accuracy, data.examples.len());
    Ok(())
}

fn top_answers<'v>(dist: &[f64], data: &'v Dataset, take: usize) -> Vec<(&'v str, f64)> {
    let mut indexed: Vec<(usize, f64)> = dist.iter().copied().enumerate().collect();
    indexed.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    indexed
        .into_iter()
        .take(take)
        .map(|(i, p)| (data.vocab.word(i).unwrap_or("?"), p))
        .collect()
}

fn format_attention(values: &[f64]) -> String {
    let cells: Vec<String> = values.iter().map(|v| format!("{v:.4}")).collect();
    format!("[{}]", cells.join(", "))
}

fn exec_cmd(args: &ExecArgs) -> Result<(), CliError> {
    let data = load_dataset(&args.data)?;
    let example: &SceneExample = match &args.id {
        Some(id) => data
            .examples
            .iter()
            .find(|ex| &ex.id == id)
            .ok_or_else(|| CliError::Data(format!("no example with id `{id}`")))?,
        None => data
            .examples
            .first()
            .ok_or_else(|| CliError::Data("dataset holds no examples".into()))?,
    };

    let registry = match &args.checkpoint {
        Some(path) => {
            let registry = load_checkpoint(path)?;
            check_dims(&registry, &data)?;
            registry
        }
        None => ParameterRegistry::init(args.seed, dataset_dims(&data))
            .map_err(|e| CliError::Config(e.to_string()))?,
    };

    let input = ExecInput {
        program: &example.program,
        features: Rc::new(example.features.clone()),
        embeddings: &example.args,
        answers: data.answer_slots(),
    };
    let trace = execute(&registry, &input).map_err(|e| {
        CliError::Data(format!("example {}: {e}", example.id))
    })?;

    println!("example {} ({} objects)", example.id, example.objects);
    println!("program:");
    for line in example.program.to_text().lines() {
        println!("  {line}");
    }
    println!("steps:");
    for (i, step) in trace.steps.iter().enumerate() {
        let rendered = match &step.value {
            StepValue::Attention(a) => format!("attention {}", format_attention(a)),
            StepValue::Boolean(b) => format!("boolean {b:.4}"),
            StepValue::Answer(dist) => {
                let top: Vec<String> = top_answers(dist, &data, 3)
                    .into_iter()
                    .map(|(w, p)| format!("{w}={p:.4}"))
                    .collect();
                format!("answer {}", top.join(" "))
            }
        };
        println!("  {i:>2} {:<16} {rendered}", step.kind.to_string());
    }
    let (predicted, p) = top_answers(trace.answer(), &data, 1)[0];
    println!("predicted: {predicted} (p={p:.4})");
    println!("gold: {}", example.gold_word);
    println!(
        "verdict: {}",
        if predicted == example.gold_word {
            "correct"
        } else {
            "incorrect"
        }
    );
    Ok(())
}

fn gradcheck_cmd(args: &GradcheckArgs) -> Result<(), CliError> {
    let mut failures = 0usize;
    for seed in 0..args.seeds {
        let report = gradcheck::run(&GradcheckConfig {
            seed,
            d: args.d,
            k: args.k,
            answers: args.answers,
            h: args.h,
            tol: args.tol,
        })
        .map_err(|e| CliError::Numerical(e.to_string()))?;
        println!(
            "seed {seed}: {} checks, max rel {:.3e}{}",
            report.checks.len(),
            report.max_rel(),
            if report.pass() { "" } else { " FAIL" }
        );
        for check in report.checks.iter().filter(|c| !c.pass) {
            println!(
                "  {}: rel {:.3e} over {} entries",
                check.label, check.max_rel, check.entries
            );
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(CliError::Numerical(format!(
            "{failures} gradient checks exceeded the tolerance"
        )));
    }
    println!("all gradient checks pass");
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(args) => gen_data(&args),
        Command::Plan(args) => plan_cmd(&args),
        Command::Train(args) => train_cmd(&args),
        Command::Eval(args) => eval_cmd(&args),
        Command::Exec(args) => exec_cmd(&args),
        Command::Gradcheck(args) => gradcheck_cmd(&args),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
