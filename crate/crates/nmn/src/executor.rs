//! Runs validated programs step by step and assembles training losses.
//!
//! Execution walks the program in order, feeds each step's text embedding
//! (the mean of its argument embeddings, held constant) and dependency
//! outputs into [`crate::modules::forward`], and keeps every step's output
//! node so intermediate supervision can attach to it.
//!
//! Losses, with ε the shared log floor:
//!
//! * answer: -ln(p[gold] + ε)
//! * attention step with target g: -Σ_j g̃_j ln(o_j + ε) where g̃ = g / Σ g
//! * boolean step with target g: -(g ln(b + ε) + (1 - g) ln(1 - b + ε))
//! * total: answer + λ · (sum of step losses, optionally averaged)

use std::collections::BTreeMap;
use std::rc::Rc;

use thiserror::Error;

use crate::dsl::{ModuleKind, Program, TypeError, ValueType};
use crate::modules::{forward, AnswerSlots, ModuleError, SceneContext};
use crate::registry::ParameterRegistry;
use crate::tape::{NodeId, Tape, TapeError};
use crate::tensor::{Matrix, ShapeError, Vector};

/// Floor added inside every logarithm so losses stay finite at 0.
pub const LOG_FLOOR: f64 = 1e-12;

/// Everything a single execution needs besides the parameters.
pub struct ExecInput<'a> {
    pub program: &'a Program,
    /// d×k object features, one column per object.
    pub features: Rc<Matrix>,
    /// Embedding per argument phrase; multi-word phrases are single keys.
    pub embeddings: &'a BTreeMap<String, Vector>,
    pub answers: AnswerSlots,
}

/// Output node per step; `answer` is the final step's node.
#[derive(Debug)]
pub struct ExecNodes {
    pub steps: Vec<NodeId>,
    pub answer: NodeId,
}

/// A step output copied out of the tape.
#[derive(Debug, Clone, PartialEq)]
pub enum StepValue {
    Attention(Vec<f64>),
    Boolean(f64),
    Answer(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub kind: ModuleKind,
    pub value: StepValue,
}

/// Concrete values of one full execution.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionTrace {
    pub steps: Vec<StepRecord>,
}

impl ExecutionTrace {
    /// Distribution produced by the final step.
    pub fn answer(&self) -> &[f64] {
        match &self.steps.last().expect("trace of validated program").value {
            StepValue::Answer(dist) => dist,
            other => unreachable!("final step of a validated program is an answer, got {other:?}"),
        }
    }
}

/// Supervision attached to intermediate steps, keyed by step index.
/// Attention targets are unnormalized multi-hot masks over objects;
/// boolean targets are scalars in [0, 1].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IntermediateTargets {
    pub attention: BTreeMap<usize, Vec<f64>>,
    pub boolean: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    /// Weight of the intermediate term in the total loss.
    pub lambda: f64,
    /// Average step losses instead of summing them.
    pub average_intermediate: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            average_intermediate: false,
        }
    }
}

/// Loss nodes on the tape; `per_step` is keyed like the targets.
#[derive(Debug)]
pub struct LossNodes {
    pub answer: NodeId,
    pub per_step: BTreeMap<usize, NodeId>,
    pub total: NodeId,
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("invalid program: {0}")]
    Type(#[from] TypeError),
    #[error("step {step}: no embedding for `{word}`")]
    MissingEmbedding { step: usize, word: String },
    #[error("embedding for `{word}` has dimension {got}, expected {want}")]
    EmbeddingDim {
        word: String,
        got: usize,
        want: usize,
    },
    #[error("step {step}: {source}")]
    Module { step: usize, source: ModuleError },
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("target step {step} is out of range for a {len}-step program")]
    TargetIndex { step: usize, len: usize },
    #[error("step {step} does not produce {expected} output")]
    TargetType { step: usize, expected: &'static str },
    #[error("attention target at step {step} has length {got}, expected {want}")]
    TargetLen {
        step: usize,
        got: usize,
        want: usize,
    },
    #[error("attention target at step {step} has no positive entries")]
    EmptyTarget { step: usize },
    #[error("gold answer index {index} exceeds vocabulary of {len}")]
    GoldIndex { index: usize, len: usize },
}

/// Runs the program on an existing tape, returning the step output nodes.
pub fn execute_on_tape(
    tape: &mut Tape,
    reg: &ParameterRegistry,
    input: &ExecInput<'_>,
) -> Result<ExecNodes, ExecError> {
    input.program.validate()?;
    let scene = SceneContext {
        features: Rc::clone(&input.features),
        answers: input.answers,
    };
    let d = input.features.rows();

    let mut nodes: Vec<NodeId> = Vec::with_capacity(input.program.len());
    for (index, step) in input.program.steps().iter().enumerate() {
        let text = if step.kind.uses_text_embedding() {
            Some(mean_embedding(tape, input, index, &step.args, d)?)
        } else {
            None
        };
        let deps: Vec<NodeId> = step.deps.iter().map(|&i| nodes[i]).collect();
        let out = forward(tape, reg, &scene, step.kind, text, &deps)
            .map_err(|source| ExecError::Module { step: index, source })?;
        nodes.push(out);
    }
    let answer = *nodes.last().expect("validated programs are nonempty");
    Ok(ExecNodes {
        steps: nodes,
        answer,
    })
}

/// Runs the program and copies every step output out of the tape.
pub fn execute(
    reg: &ParameterRegistry,
    input: &ExecInput<'_>,
) -> Result<ExecutionTrace, ExecError> {
    let mut tape = Tape::new();
    let nodes = execute_on_tape(&mut tape, reg, input)?;
    let steps = input
        .program
        .steps()
        .iter()
        .zip(&nodes.steps)
        .map(|(step, &node)| {
            let raw = tape.value(node);
            let value = match step.kind.output_type() {
                ValueType::Attention => StepValue::Attention(raw.to_vec()),
                ValueType::Boolean => StepValue::Boolean(raw[0]),
                ValueType::Answer => StepValue::Answer(raw.to_vec()),
            };
            StepRecord {
                kind: step.kind,
                value,
            }
        })
        .collect();
    Ok(ExecutionTrace { steps })
}

/// Runs the program and builds the full loss graph on a fresh tape.
pub fn execute_with_losses(
    reg: &ParameterRegistry,
    input: &ExecInput<'_>,
    targets: &IntermediateTargets,
    gold: usize,
    cfg: LossConfig,
) -> Result<(Tape, ExecNodes, LossNodes), ExecError> {
    if gold >= input.answers.len {
        return Err(ExecError::GoldIndex {
            index: gold,
            len: input.answers.len,
        });
    }
    let mut tape = Tape::new();
    let nodes = execute_on_tape(&mut tape, reg, input)?;
    let steps = input.program.steps();
    let k = input.features.cols();

    let answer = answer_loss_node(&mut tape, nodes.answer, gold)?;

    let mut per_step: BTreeMap<usize, NodeId> = BTreeMap::new();
    for (&step, target) in &targets.attention {
        let out = check_target_step(steps, step, ValueType::Attention, "attention")?;
        if target.len() != k {
            return Err(ExecError::TargetLen {
                step,
                got: target.len(),
                want: k,
            });
        }
        if target.iter().sum::<f64>() <= 0.0 {
            return Err(ExecError::EmptyTarget { step });
        }
        let loss = attention_loss_node(&mut tape, nodes.steps[out], target)?;
        per_step.insert(step, loss);
    }
    for (&step, &g) in &targets.boolean {
        let out = check_target_step(steps, step, ValueType::Boolean, "boolean")?;
        let loss = boolean_loss_node(&mut tape, nodes.steps[out], g)?;
        per_step.insert(step, loss);
    }

    let total = if per_step.is_empty() {
        answer
    } else {
        let mut acc: Option<NodeId> = None;
        for &node in per_step.values() {
            acc = Some(match acc {
                Some(prev) => tape.add(prev, node)?,
                None => node,
            });
        }
        let mut intermediate = acc.expect("per_step is nonempty");
        let mut scale = cfg.lambda;
        if cfg.average_intermediate {
            scale /= per_step.len() as f64;
        }
        intermediate = tape.affine_const(scale, 0.0, intermediate);
        tape.add(answer, intermediate)?
    };

    Ok((
        tape,
        nodes,
        LossNodes {
            answer,
            per_step,
            total,
        },
    ))
}

fn check_target_step(
    steps: &[crate::dsl::ModuleCall],
    step: usize,
    want: ValueType,
    label: &'static str,
) -> Result<usize, ExecError> {
    if step >= steps.len() {
        return Err(ExecError::TargetIndex {
            step,
            len: steps.len(),
        });
    }
    if steps[step].kind.output_type() != want {
        return Err(ExecError::TargetType {
            step,
            expected: label,
        });
    }
    Ok(step)
}

/// -ln(dist[gold] + ε) as a tape node.
pub fn answer_loss_node(
    tape: &mut Tape,
    dist: NodeId,
    gold: usize,
) -> Result<NodeId, ShapeError> {
    let picked = tape.pick(dist, gold)?;
    let shifted = tape.affine_const(1.0, LOG_FLOOR, picked);
    let log = tape.ln(shifted)?;
    Ok(tape.affine_const(-1.0, 0.0, log))
}

/// Cross entropy of an attention node against an unnormalized mask with
/// positive total mass.
pub fn attention_loss_node(
    tape: &mut Tape,
    output: NodeId,
    target: &[f64],
) -> Result<NodeId, ShapeError> {
    let mass: f64 = target.iter().sum();
    if mass <= 0.0 {
        return Err(ShapeError::Empty {
            op: "attention target",
        });
    }
    let weights: Vec<f64> = target.iter().map(|g| -g / mass).collect();
    let shifted = tape.affine_const(1.0, LOG_FLOOR, output);
    let logs = tape.ln(shifted)?;
    tape.dot_const(weights, logs)
}

/// Binary cross entropy of a scalar belief node against target `g`.
pub fn boolean_loss_node(tape: &mut Tape, b: NodeId, g: f64) -> Result<NodeId, ShapeError> {
    let pos = tape.affine_const(1.0, LOG_FLOOR, b);
    let pos = tape.ln(pos)?;
    let pos = tape.affine_const(-g, 0.0, pos);
    let neg = tape.affine_const(-1.0, 1.0 + LOG_FLOOR, b);
    let neg = tape.ln(neg)?;
    let neg = tape.affine_const(-(1.0 - g), 0.0, neg);
    tape.add(pos, neg)
}

fn mean_embedding(
    tape: &mut Tape,
    input: &ExecInput<'_>,
    step: usize,
    args: &[String],
    d: usize,
) -> Result<NodeId, ExecError> {
    let mut mean = vec![0.0; d];
    for arg in args {
        let emb = input
            .embeddings
            .get(arg)
            .ok_or_else(|| ExecError::MissingEmbedding {
                step,
                word: arg.clone(),
            })?;
        if emb.len() != d {
            return Err(ExecError::EmbeddingDim {
                word: arg.clone(),
                got: emb.len(),
                want: d,
            });
        }
        for (m, v) in mean.iter_mut().zip(emb.as_slice()) {
            *m += v;
        }
    }
    // Validation guarantees at least one argument for these kinds.
    for m in &mut mean {
        *m /= args.len() as f64;
    }
    Ok(tape.leaf(&mean))
}

// Scalar counterparts of the tape losses, used to cross-check values and to
// score traces without building a graph.

/// -ln(dist[gold] + ε).
pub fn answer_loss(dist: &[f64], gold: usize) -> f64 {
    -(dist[gold] + LOG_FLOOR).ln()
}

/// Cross entropy against the normalized target mask.
pub fn attention_loss(output: &[f64], target: &[f64]) -> f64 {
    let mass: f64 = target.iter().sum();
    output
        .iter()
        .zip(target)
        .map(|(o, g)| -(g / mass) * (o + LOG_FLOOR).ln())
        .sum()
}

/// Binary cross entropy of belief `b` against target `g`.
pub fn boolean_loss(b: f64, g: f64) -> f64 {
    -(g * (b + LOG_FLOOR).ln() + (1.0 - g) * (1.0 - b + LOG_FLOOR).ln())
}

/// Total loss of a finished trace under the same formulas as the tape.
pub fn total_loss(
    trace: &ExecutionTrace,
    targets: &IntermediateTargets,
    gold: usize,
    cfg: LossConfig,
) -> f64 {
    let mut intermediate = 0.0;
    let mut count = 0usize;
    for (&step, target) in &targets.attention {
        if let StepValue::Attention(o) = &trace.steps[step].value {
            intermediate += attention_loss(o, target);
            count += 1;
        }
    }
    for (&step, &g) in &targets.boolean {
        if let StepValue::Boolean(b) = trace.steps[step].value {
            intermediate += boolean_loss(b, g);
            count += 1;
        }
    }
    if cfg.average_intermediate && count > 0 {
        intermediate /= count as f64;
    }
    answer_loss(trace.answer(), gold) + cfg.lambda * intermediate
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::Dims;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const D: usize = 5;
    const K: usize = 3;
    const A: usize = 7;

    fn slots() -> AnswerSlots {
        AnswerSlots {
            len: A,
            yes: 5,
            no: 6,
        }
    }

    fn fixture(seed: u64, k: usize) -> (ParameterRegistry, Rc<Matrix>, BTreeMap<String, Vector>) {
        let reg = ParameterRegistry::init(seed, Dims { d: D, k, answers: A }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(7));
        let feats: Vec<f64> = (0..D * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let features = Rc::new(Matrix::new(D, k, feats).unwrap());
        let mut embeddings = BTreeMap::new();
        for word in ["cat", "dog", "red", "blue", "left", "left of", "color", "larger"] {
            let v: Vec<f64> = (0..D).map(|_| rng.gen_range(-1.0..1.0)).collect();
            embeddings.insert(word.to_string(), Vector::new(v).unwrap());
        }
        (reg, features, embeddings)
    }

    fn program(text: &str) -> Program {
        Program::parse(text).unwrap()
    }

    #[test]
    fn single_object_select_attends_fully() {
        let (reg, features, embeddings) = fixture(1, 1);
        let prog = program("select[cat] -> a1\nquery_name(a1)");
        let input = ExecInput {
            program: &prog,
            features,
            embeddings: &embeddings,
            answers: slots(),
        };
        let trace = execute(&reg, &input).unwrap();
        assert_eq!(
            trace.steps[0].value,
            StepValue::Attention(vec![1.0]),
            "softmax over one object is exactly one"
        );
        let answer = trace.answer();
        assert_eq!(answer.len(), A);
        let sum: f64 = answer.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn execution_is_deterministic() {
        let (reg, features, embeddings) = fixture(2, K);
        let prog = program(
            "select[cat] -> a1\nrelate_sub[left of](a1) -> a2\nexist(a2) -> b1\nanswer_logic(b1)",
        );
        let input = ExecInput {
            program: &prog,
            features,
            embeddings: &embeddings,
            answers: slots(),
        };
        let t1 = execute(&reg, &input).unwrap();
        let t2 = execute(&reg, &input).unwrap();
        assert_eq!(t1, t2);
    }

    #[test]
    fn choose_candidates_average_their_embeddings() {
        let (reg, features, mut embeddings) = fixture(3, K);
        // With identical candidate embeddings the mean equals either one,
        // so a degenerate pair must reproduce the single-word feature.
        embeddings.insert("dog".into(), embeddings["cat"].clone());
        let two = program("select[cat] -> a1\nchoose_name[cat, dog](a1)");
        let input = ExecInput {
            program: &two,
            features: Rc::clone(&features),
            embeddings: &embeddings,
            answers: slots(),
        };
        let avg = execute(&reg, &input).unwrap();

        embeddings.insert("dog".into(), {
            let mut v = embeddings["cat"].as_slice().to_vec();
            v[0] += 1.0;
            Vector::new(v).unwrap()
        });
        let moved = execute(
            &reg,
            &ExecInput {
                program: &two,
                features,
                embeddings: &embeddings,
                answers: slots(),
            },
        )
        .unwrap();
        assert_ne!(
            avg.answer(),
            moved.answer(),
            "changing one candidate embedding must move the mean"
        );
    }

    fn demo_case(
        seed: u64,
    ) -> (
        ParameterRegistry,
        Rc<Matrix>,
        BTreeMap<String, Vector>,
        Program,
        IntermediateTargets,
        usize,
    ) {
        let (reg, features, embeddings) = fixture(seed, K);
        let prog = program(
            "select[cat] -> a1\nfilter_attr[red](a1) -> a2\nexist(a2) -> b1\nanswer_logic(b1)",
        );
        let mut targets = IntermediateTargets::default();
        targets.attention.insert(0, vec![1.0, 0.0, 1.0]);
        targets.attention.insert(1, vec![0.0, 0.0, 1.0]);
        targets.boolean.insert(2, 1.0);
        (reg, features, embeddings, prog, targets, 5)
    }

    #[test]
    fn tape_and_scalar_losses_agree() {
        let (reg, features, embeddings, prog, targets, gold) = demo_case(4);
        let input = ExecInput {
            program: &prog,
            features: Rc::clone(&features),
            embeddings: &embeddings,
            answers: slots(),
        };
        for cfg in [
            LossConfig::default(),
            LossConfig {
                lambda: 0.5,
                average_intermediate: true,
            },
        ] {
            let (tape, _, losses) =
                execute_with_losses(&reg, &input, &targets, gold, cfg).unwrap();
            let trace = execute(&reg, &input).unwrap();
            let scalar = total_loss(&trace, &targets, gold, cfg);
            let taped = tape.value(losses.total)[0];
            assert!(
                (scalar - taped).abs() < 1e-9,
                "scalar {scalar} vs tape {taped}"
            );

            // The graph total must also equal its own parts.
            let answer = tape.value(losses.answer)[0];
            let parts: f64 = losses
                .per_step
                .values()
                .map(|&n| tape.value(n)[0])
                .sum();
            let mut scale = cfg.lambda;
            if cfg.average_intermediate {
                scale /= losses.per_step.len() as f64;
            }
            assert!((answer + scale * parts - taped).abs() < 1e-12);
        }
    }

    #[test]
    fn removing_a_target_changes_the_loss() {
        let (reg, features, embeddings, prog, targets, gold) = demo_case(5);
        let input = ExecInput {
            program: &prog,
            features,
            embeddings: &embeddings,
            answers: slots(),
        };
        let cfg = LossConfig::default();
        let (tape_full, _, full) =
            execute_with_losses(&reg, &input, &targets, gold, cfg).unwrap();
        let mut fewer = targets.clone();
        fewer.boolean.clear();
        let (tape_less, _, less) = execute_with_losses(&reg, &input, &fewer, gold, cfg).unwrap();
        let lf = tape_full.value(full.total)[0];
        let ll = tape_less.value(less.total)[0];
        assert!(lf > ll, "dropping a positive loss term must lower the total");
        assert_eq!(full.per_step.len(), 3);
        assert_eq!(less.per_step.len(), 2);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let (reg, features, embeddings, prog, targets, gold) = demo_case(6);
        let input = ExecInput {
            program: &prog,
            features: Rc::clone(&features),
            embeddings: &embeddings,
            answers: slots(),
        };
        let cfg = LossConfig::default();
        let (tape, _, losses) = execute_with_losses(&reg, &input, &targets, gold, cfg).unwrap();
        let result = tape.backward(&reg, losses.total).unwrap();

        let h = 1e-5;
        let mut checked = 0usize;
        for (id, grad) in result.grads.iter() {
            let layer_idx = id.0;
            let rows = grad.weight.rows();
            let cols = grad.weight.cols();
            // Probe a few entries per layer; full sweeps belong to the
            // dedicated gradient check.
            for &(r, c) in &[(0, 0), (rows - 1, cols - 1), (rows / 2, cols / 2)] {
                let mut plus = reg.clone();
                let w = plus.layer(id).weight.get(r, c);
                plus.layer_mut(id).weight.set(r, c, w + h);
                let (tp, _, lp) =
                    execute_with_losses(&plus, &input, &targets, gold, cfg).unwrap();
                let mut minus = reg.clone();
                minus.layer_mut(id).weight.set(r, c, w - h);
                let (tm, _, lm) =
                    execute_with_losses(&minus, &input, &targets, gold, cfg).unwrap();
                let fd = (tp.value(lp.total)[0] - tm.value(lm.total)[0]) / (2.0 * h);
                let an = grad.weight.get(r, c);
                let diff = (an - fd).abs();
                if diff > 1e-9 {
                    let rel = diff / (an.abs() + fd.abs()).max(1e-6);
                    assert!(rel < 1e-4, "layer {layer_idx} w[{r},{c}]: {an} vs {fd}");
                }
                checked += 1;
            }
        }
        assert!(checked >= 12, "expected several layers in the graph");
    }

    #[test]
    fn input_errors_are_reported() {
        let (reg, features, embeddings) = fixture(7, K);
        let prog = program("select[unicorn] -> a1\nquery_name(a1)");
        let input = ExecInput {
            program: &prog,
            features: Rc::clone(&features),
            embeddings: &embeddings,
            answers: slots(),
        };
        let err = execute(&reg, &input).unwrap_err();
        assert!(
            matches!(&err, ExecError::MissingEmbedding { step: 0, word } if word == "unicorn"),
            "got {err:?}"
        );

        let prog = program("select[cat] -> a1\nquery_name(a1)");
        let input = ExecInput {
            program: &prog,
            features: Rc::clone(&features),
            embeddings: &embeddings,
            answers: slots(),
        };
        let err = execute_with_losses(
            &reg,
            &input,
            &IntermediateTargets::default(),
            A,
            LossConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, ExecError::GoldIndex { index, len } if index == A && len == A));

        let mut targets = IntermediateTargets::default();
        targets.attention.insert(0, vec![1.0, 0.0]);
        let err =
            execute_with_losses(&reg, &input, &targets, 0, LossConfig::default()).unwrap_err();
        assert!(matches!(err, ExecError::TargetLen { step: 0, got: 2, want } if want == K));

        let mut targets = IntermediateTargets::default();
        targets.boolean.insert(0, 1.0);
        let err =
            execute_with_losses(&reg, &input, &targets, 0, LossConfig::default()).unwrap_err();
        assert!(matches!(err, ExecError::TargetType { step: 0, .. }));

        let mut targets = IntermediateTargets::default();
        targets.attention.insert(0, vec![0.0; K]);
        let err =
            execute_with_losses(&reg, &input, &targets, 0, LossConfig::default()).unwrap_err();
        assert!(matches!(err, ExecError::EmptyTarget { step: 0 }));

        let mut targets = IntermediateTargets::default();
        targets.attention.insert(9, vec![1.0; K]);
        let err =
            execute_with_losses(&reg, &input, &targets, 0, LossConfig::default()).unwrap_err();
        assert!(matches!(err, ExecError::TargetIndex { step: 9, len: 2 }));
    }

    #[test]
    fn invalid_programs_are_rejected_before_running() {
        let (reg, features, embeddings) = fixture(8, K);
        // Built unchecked: final step is not an answer.
        let prog = Program::new(vec![crate::dsl::ModuleCall {
            kind: ModuleKind::Select,
            args: vec!["cat".into()],
            deps: vec![],
        }]);
        let input = ExecInput {
            program: &prog,
            features,
            embeddings: &embeddings,
            answers: slots(),
        };
        let err = execute(&reg, &input).unwrap_err();
        assert!(matches!(err, ExecError::Type(_)));
    }
}
