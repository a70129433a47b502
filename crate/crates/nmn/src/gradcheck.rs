//! Finite-difference verification of the backward sweep.
//!
//! Two kinds of checks run under one config:
//!
//! * per module kind: a single module forward with random inputs and a
//!   loss matching its output type, comparing every weight and bias entry
//!   of every layer the kind binds against a central difference;
//! * a pipeline check: a multi-step program with intermediate supervision
//!   run through the executor's full loss graph, comparing every entry of
//!   every layer that received a gradient.
//!
//! An entry passes when the absolute difference is below 1e-9 or the
//! relative error |a - n| / max(|a| + |n|, 1e-6) is below the tolerance.
//! Relu and min/max kinks make finite differences locally wrong; with
//! random continuous inputs a probe landing within `h` of a kink is rare,
//! and the fixed seeds used by the test suite are known to avoid them.

use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dsl::{ModuleKind, Program, ValueType};
use crate::executor::{
    answer_loss_node, attention_loss_node, boolean_loss_node, execute_with_losses, ExecError,
    ExecInput, IntermediateTargets, LossConfig,
};
use crate::modules::{forward, AnswerSlots, ModuleError, SceneContext};
use crate::registry::{Dims, LayerRole, ParameterRegistry, RegistryError};
use crate::tape::{ParamId, Tape, TapeError};
use crate::tensor::{Matrix, ShapeError, Vector};

#[derive(Debug, Clone, Copy)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub d: usize,
    pub k: usize,
    pub answers: usize,
    /// Central-difference step.
    pub h: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            d: 6,
            k: 4,
            answers: 7,
            h: 1e-5,
            tol: 1e-4,
        }
    }
}

/// Result of one check: a module kind or the pipeline.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub label: String,
    /// Parameter entries compared.
    pub entries: usize,
    pub max_rel: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub checks: Vec<CheckOutcome>,
}

impl GradcheckReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn max_rel(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel).fold(0.0, f64::max)
    }
}

#[derive(Debug, Error)]
pub enum GradcheckError {
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("module check: {0}")]
    Module(#[from] ModuleError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

const ROLES: [LayerRole; 5] = [
    LayerRole::Textual,
    LayerRole::Visual,
    LayerRole::VisualSecond,
    LayerRole::Gate,
    LayerRole::Output,
];

enum LossSpec {
    Answer(usize),
    Attention(Vec<f64>),
    Boolean(f64),
}

struct KindCase {
    kind: ModuleKind,
    features: Rc<Matrix>,
    text: Option<Vec<f64>>,
    deps: Vec<Vec<f64>>,
    loss: LossSpec,
}

/// Runs every per-kind check plus the pipeline check.
pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport, GradcheckError> {
    let dims = Dims {
        d: cfg.d,
        k: cfg.k,
        answers: cfg.answers,
    };
    let reg = ParameterRegistry::init(cfg.seed ^ 0x6772_6164, dims)?;
    let slots = AnswerSlots {
        len: cfg.answers,
        yes: cfg.answers - 2,
        no: cfg.answers - 1,
    };

    let mut checks = Vec::new();
    for (ordinal, &kind) in ModuleKind::ALL.iter().enumerate() {
        let case = build_case(cfg, kind, ordinal as u64);
        let layers = bound_layers(&reg, kind);
        let outcome = check_entries(cfg, &reg, &layers, kind.name(), |reg| {
            eval_kind(reg, &case, slots)
        })?;
        checks.push(outcome);
    }
    checks.push(pipeline_check(cfg, &reg, slots)?);
    Ok(GradcheckReport { checks })
}

fn mix(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer over the xor keeps per-case streams independent.
    let mut z = (seed ^ salt).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn build_case(cfg: &GradcheckConfig, kind: ModuleKind, ordinal: u64) -> KindCase {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0x1000 + ordinal));
    let features = Rc::new(
        Matrix::new(cfg.d, cfg.k, rand_vec(&mut rng, cfg.d * cfg.k))
            .expect("random features are finite"),
    );
    let text = kind.uses_text_embedding().then(|| rand_vec(&mut rng, cfg.d));
    let deps: Vec<Vec<f64>> = kind
        .dep_types()
        .iter()
        .map(|ty| match ty {
            ValueType::Attention => (0..cfg.k).map(|_| rng.gen_range(0.05..0.95)).collect(),
            ValueType::Boolean => vec![rng.gen_range(0.05..0.95)],
            ValueType::Answer => unreachable!("no module consumes answer values"),
        })
        .collect();
    let loss = match kind.output_type() {
        ValueType::Answer => LossSpec::Answer(rng.gen_range(0..cfg.answers)),
        ValueType::Boolean => LossSpec::Boolean(if rng.gen_bool(0.5) { 1.0 } else { 0.0 }),
        ValueType::Attention => {
            let mut mask: Vec<f64> = (0..cfg.k)
                .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
                .collect();
            if mask.iter().sum::<f64>() == 0.0 {
                let j = rng.gen_range(0..cfg.k);
                mask[j] = 1.0;
            }
            LossSpec::Attention(mask)
        }
    };
    KindCase {
        kind,
        features,
        text,
        deps,
        loss,
    }
}

fn eval_kind(
    reg: &ParameterRegistry,
    case: &KindCase,
    slots: AnswerSlots,
) -> Result<(Tape, crate::tape::NodeId), GradcheckError> {
    let scene = SceneContext {
        features: Rc::clone(&case.features),
        answers: slots,
    };
    let mut tape = Tape::new();
    let text = case.text.as_ref().map(|t| tape.leaf(t));
    let deps: Vec<_> = case.deps.iter().map(|d| tape.leaf(d)).collect();
    let out = forward(&mut tape, reg, &scene, case.kind, text, &deps)?;
    let loss = match &case.loss {
        LossSpec::Answer(gold) => answer_loss_node(&mut tape, out, *gold)?,
        LossSpec::Attention(mask) => attention_loss_node(&mut tape, out, mask)?,
        LossSpec::Boolean(g) => boolean_loss_node(&mut tape, out, *g)?,
    };
    Ok((tape, loss))
}

fn bound_layers(reg: &ParameterRegistry, kind: ModuleKind) -> Vec<ParamId> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for role in ROLES {
        if let Some(id) = reg.layer_id(kind, role) {
            if seen.insert(id.0) {
                out.push(id);
            }
        }
    }
    out
}

/// Compares analytic gradients against central differences for every
/// weight and bias entry of `layers`, where `eval` builds the loss graph.
fn check_entries<F>(
    cfg: &GradcheckConfig,
    reg: &ParameterRegistry,
    layers: &[ParamId],
    label: &str,
    eval: F,
) -> Result<CheckOutcome, GradcheckError>
where
    F: Fn(&ParameterRegistry) -> Result<(Tape, crate::tape::NodeId), GradcheckError>,
{
    let (tape, loss) = eval(reg)?;
    let result = tape.backward(reg, loss)?;

    let value_at = |probe: &ParameterRegistry| -> Result<f64, GradcheckError> {
        let (tape, loss) = eval(probe)?;
        Ok(tape.value(loss)[0])
    };

    let mut entries = 0usize;
    let mut max_rel = 0.0f64;
    let mut pass = true;
    for &id in layers {
        let zero_w;
        let zero_b;
        let (gw, gb) = match result.grads.get(id) {
            Some(g) => (&g.weight, &g.bias),
            None => {
                // A layer can legitimately receive no gradient (fully
                // relu-dead paths); finite differences must then agree
                // that the loss is flat, which the zero grid asserts.
                let layer = reg.layer(id);
                zero_w = Matrix::zeros(layer.weight.rows(), layer.weight.cols());
                zero_b = Vector::zeros(layer.bias.len());
                (&zero_w, &zero_b)
            }
        };
        let rows = gw.rows();
        let cols = gw.cols();
        for r in 0..rows {
            for c in 0..=cols {
                let analytic = if c == cols { gb.get(r) } else { gw.get(r, c) };
                let mut plus = reg.clone();
                let mut minus = reg.clone();
                if c == cols {
                    let b = reg.layer(id).bias.get(r);
                    plus.layer_mut(id).bias.as_mut_slice()[r] = b + cfg.h;
                    minus.layer_mut(id).bias.as_mut_slice()[r] = b - cfg.h;
                } else {
                    let w = reg.layer(id).weight.get(r, c);
                    plus.layer_mut(id).weight.set(r, c, w + cfg.h);
                    minus.layer_mut(id).weight.set(r, c, w - cfg.h);
                }
                let numeric = (value_at(&plus)? - value_at(&minus)?) / (2.0 * cfg.h);
                entries += 1;
                let diff = (analytic - numeric).abs();
                if diff < 1e-9 {
                    continue;
                }
                let rel = diff / (analytic.abs() + numeric.abs()).max(1e-6);
                max_rel = max_rel.max(rel);
                if rel >= cfg.tol {
                    pass = false;
                }
            }
        }
    }
    Ok(CheckOutcome {
        label: label.to_string(),
        entries,
        max_rel,
        pass,
    })
}

/// The multi-step program exercised by the pipeline check. It touches
/// attention, boolean and answer values, shared layers, and both loss
/// kinds of intermediate supervision.
const PIPELINE: &str = "select[cat] -> a0
select[dog] -> a1
filter_attr[red](a0) -> a2
relate_sub[left of](a2) -> a3
fusion(a1, a3) -> a4
exist(a4) -> b0
same[color](a2, a4) -> b1
and(b0, b1) -> b2
answer_logic(b2)";

fn pipeline_check(
    cfg: &GradcheckConfig,
    reg: &ParameterRegistry,
    slots: AnswerSlots,
) -> Result<CheckOutcome, GradcheckError> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0x2000));
    let program = Program::parse(PIPELINE).expect("pipeline program parses");
    let features = Rc::new(
        Matrix::new(cfg.d, cfg.k, rand_vec(&mut rng, cfg.d * cfg.k))
            .expect("random features are finite"),
    );
    let mut embeddings = BTreeMap::new();
    for word in ["cat", "dog", "red", "left of", "color"] {
        embeddings.insert(
            word.to_string(),
            Vector::new(rand_vec(&mut rng, cfg.d)).expect("random embedding is finite"),
        );
    }
    let mut targets = IntermediateTargets::default();
    for step in [0usize, 2, 3, 4] {
        let mut mask: Vec<f64> = (0..cfg.k)
            .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
            .collect();
        if mask.iter().sum::<f64>() == 0.0 {
            mask[0] = 1.0;
        }
        targets.attention.insert(step, mask);
    }
    targets.boolean.insert(5, 1.0);
    targets.boolean.insert(6, 0.0);
    let gold = slots.yes;
    let loss_cfg = LossConfig::default();

    let eval = |probe: &ParameterRegistry| -> Result<(Tape, crate::tape::NodeId), GradcheckError> {
        let input = ExecInput {
            program: &program,
            features: Rc::clone(&features),
            embeddings: &embeddings,
            answers: slots,
        };
        let (tape, _, losses) = execute_with_losses(probe, &input, &targets, gold, loss_cfg)?;
        Ok((tape, losses.total))
    };

    // Check every layer the program touched.
    let (tape, loss) = eval(reg)?;
    let result = tape.backward(reg, loss)?;
    let layers: Vec<ParamId> = result.grads.iter().map(|(id, _)| id).collect();
    check_entries(cfg, reg, &layers, "pipeline", eval)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_report_passes_and_covers_every_kind() {
        let report = run(&GradcheckConfig::default()).unwrap();
        assert_eq!(report.checks.len(), ModuleKind::ALL.len() + 1);
        for check in &report.checks {
            assert!(
                check.pass,
                "{} failed with max relative error {}",
                check.label, check.max_rel
            );
        }
        assert!(report.pass());
        assert!(report.max_rel() < 1e-4);

        let kinds_with_params = report
            .checks
            .iter()
            .filter(|c| c.label != "pipeline" && c.entries > 0)
            .count();
        // Only fusion, and, or and answer_logic are parameter-free.
        assert_eq!(kinds_with_params, ModuleKind::ALL.len() - 4);

        let pipeline = report
            .checks
            .iter()
            .find(|c| c.label == "pipeline")
            .unwrap();
        assert!(
            pipeline.entries > 250,
            "pipeline should sweep many entries, got {}",
            pipeline.entries
        );
    }

    #[test]
    fn a_corrupted_gradient_is_caught() {
        // Sanity-check the checker itself: perturbing the analytic side
        // must produce a failing outcome. We fake it by checking against
        // a registry whose evaluation uses different parameters than the
        // backward pass, which is exactly the bug class this guards.
        let cfg = GradcheckConfig::default();
        let dims = Dims {
            d: cfg.d,
            k: cfg.k,
            answers: cfg.answers,
        };
        let reg = ParameterRegistry::init(3, dims).unwrap();
        let shifted = ParameterRegistry::init(4, dims).unwrap();
        let slots = AnswerSlots {
            len: cfg.answers,
            yes: cfg.answers - 2,
            no: cfg.answers - 1,
        };
        let case = build_case(&cfg, ModuleKind::Select, 0);
        let layers = bound_layers(&reg, ModuleKind::Select);
        // Gradients come from `reg`, finite differences from `shifted`.
        let outcome = check_entries(&cfg, &reg, &layers, "select", |probe| {
            let blend = if std::ptr::eq(probe, &reg) {
                probe.clone()
            } else {
                shifted.clone()
            };
            eval_kind(&blend, &case, slots)
        })
        .unwrap();
        assert!(!outcome.pass, "mismatched parameters must fail the check");
    }
}
