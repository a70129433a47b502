//! Forward formulas of the 29 module kinds.
//!
//! Shared building blocks, writing r for relu, S for softmax and σ for the
//! logistic function, with V the d×k scene feature matrix and t the mean of
//! the step's word embeddings:
//!
//! * textual feature x = r(W_t t)
//! * per-object scores s_j = r(W_v v_j) · x, collected into s ∈ R^k
//! * attended feature for an attention vector a: r(W_v (V a))
//!
//! The families then compose these as:
//!
//! * select: o = S(W_o s)
//! * filter_attr/filter_pos: z = S(W_o s), o = min(a, z); filter_not uses
//!   min(a, 1 - z)
//! * relate_*: z = S(W_g s), o = S(W_o (x ⊙ r(W_v (V a)) ⊙ r(W_v (V z))))
//! * fusion = min(a1, a2); and = b1 b2; or = b1 + b2 - b1 b2
//! * same = σ(W_o (x ⊙ y ⊙ z)) over both attended deps; different is
//!   exactly 1 - same through the identical layers; the *_all variants use
//!   σ(W_o (x ⊙ y)) over one dep
//! * exist = σ(W_o [a ∥ max(a) ∥ min(a) ∥ mean(a)])
//! * verify_rel_* = σ(W_o (x ⊙ y ⊙ z)); verify_attr/pos = σ(W_o (x ⊙ y))
//! * choose_* = S(W_o (x ⊙ y)) or S(W_o (x ⊙ y ⊙ z)) over the answer
//!   vocabulary; common = S(W_o (y ⊙ z)) with no text input
//! * query_* = S(W_o r(W_v (V a)))
//! * answer_logic places b on "yes" and 1 - b on "no"

use std::rc::Rc;

use thiserror::Error;

use crate::dsl::ModuleKind;
use crate::registry::{LayerRole, ParameterRegistry, RegistryError};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Matrix, ShapeError};

/// Positions of the fixed answers inside the answer vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnswerSlots {
    pub len: usize,
    pub yes: usize,
    pub no: usize,
}

/// Per-example constants every module may read.
pub struct SceneContext {
    /// d×k object features, one column per object.
    pub features: Rc<Matrix>,
    pub answers: AnswerSlots,
}

#[derive(Debug, Error)]
pub enum ModuleError {
    #[error("`{kind}` requires a text embedding")]
    MissingText { kind: ModuleKind },
    #[error("`{kind}` does not take a text embedding")]
    UnexpectedText { kind: ModuleKind },
    #[error("`{kind}` takes {expected} dependencies, got {got}")]
    DepCount {
        kind: ModuleKind,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// Runs one module forward on the tape and returns its output node.
///
/// `text` must be `Some` exactly when [`ModuleKind::uses_text_embedding`]
/// is true (the executor averages multi-word candidate embeddings into one
/// vector beforehand); `deps` are the output nodes of dependency steps.
pub fn forward(
    tape: &mut Tape,
    reg: &ParameterRegistry,
    scene: &SceneContext,
    kind: ModuleKind,
    text: Option<NodeId>,
    deps: &[NodeId],
) -> Result<NodeId, ModuleError> {
    if kind.uses_text_embedding() && text.is_none() {
        return Err(ModuleError::MissingText { kind });
    }
    if !kind.uses_text_embedding() && text.is_some() {
        return Err(ModuleError::UnexpectedText { kind });
    }
    let expected = kind.dep_types().len();
    if deps.len() != expected {
        return Err(ModuleError::DepCount {
            kind,
            expected,
            got: deps.len(),
        });
    }

    use ModuleKind::*;
    let out = match kind {
        Select => {
            let x = textual(tape, reg, kind, text.unwrap())?;
            let scores = object_scores(tape, reg, scene, kind, x)?;
            let logits = affine_role(tape, reg, kind, LayerRole::Output, scores)?;
            tape.softmax(logits)?
        }
        FilterAttr | FilterPos | FilterNot => {
            let x = textual(tape, reg, kind, text.unwrap())?;
            let scores = object_scores(tape, reg, scene, kind, x)?;
            let logits = affine_role(tape, reg, kind, LayerRole::Output, scores)?;
            let z = tape.softmax(logits)?;
            let gate = if kind == FilterNot {
                tape.one_minus(z)
            } else {
                z
            };
            tape.elem_min(deps[0], gate)?
        }
        RelateSub | RelateObj | RelateAttr => {
            let x = textual(tape, reg, kind, text.unwrap())?;
            let scores = object_scores(tape, reg, scene, kind, x)?;
            let gate_logits = affine_role(tape, reg, kind, LayerRole::Gate, scores)?;
            let z = tape.softmax(gate_logits)?;
            let y = attended(tape, reg, scene, kind, LayerRole::Visual, deps[0])?;
            let zf = attended(tape, reg, scene, kind, LayerRole::Visual, z)?;
            let xy = tape.hadamard(x, y)?;
            let h = tape.hadamard(xy, zf)?;
            let logits = affine_role(tape, reg, kind, LayerRole::Output, h)?;
            tape.softmax(logits)?
        }
        Fusion => tape.elem_min(deps[0], deps[1])?,
        And => tape.hadamard(deps[0], deps[1])?,
        Or => {
            let sum = tape.add(deps[0], deps[1])?;
            let prod = tape.hadamard(deps[0], deps[1])?;
            tape.sub(sum, prod)?
        }
        Same | Different => {
            let same = pair_scalar(tape, reg, scene, kind, text.unwrap(), deps[0], deps[1])?;
            if kind == Different {
                tape.one_minus(same)
            } else {
                same
            }
        }
        SameAll | DifferentAll => {
            let x = textual(tape, reg, kind, text.unwrap())?;
            let y = attended(tape, reg, scene, kind, LayerRole::Visual, deps[0])?;
            let h = tape.hadamard(x, y)?;
            let logit = affine_role(tape, reg, kind, LayerRole::Output, h)?;
            let same = tape.sigmoid(logit);
            if kind == DifferentAll {
                tape.one_minus(same)
            } else {
                same
            }
        }
        Exist => {
            let mx = tape.max_val(deps[0])?;
            let mn = tape.min_val(deps[0])?;
            let me = tape.mean_val(deps[0])?;
            let feats = tape.concat(&[deps[0], mx, mn, me])?;
            let logit = affine_role(tape, reg, kind, LayerRole::Output, feats)?;
            tape.sigmoid(logit)
        }
        VerifyRelSub | VerifyRelObj => {
            let h = pair_features(tape, reg, scene, kind, text.unwrap(), deps[0], deps[1])?;
            let logit = affine_role(tape, reg, kind, LayerRole::Output, h)?;
            tape.sigmoid(logit)
        }
        VerifyAttr | VerifyPos => {
            let x = textual(tape, reg, kind, text.unwrap())?;
            let y = attended(tape, reg, scene, kind, LayerRole::Visual, deps[0])?;
            let h = tape.hadamard(x, y)?;
            let logit = affine_role(tape, reg, kind, LayerRole::Output, h)?;
            tape.sigmoid(logit)
        }
        ChooseName | ChooseAttr | ChoosePos => {
            let x = textual(tape, reg, kind, text.unwrap())?;
            let y = attended(tape, reg, scene, kind, LayerRole::Visual, deps[0])?;
            let h = tape.hadamard(x, y)?;
            let logits = affine_role(tape, reg, kind, LayerRole::Output, h)?;
            tape.softmax(logits)?
        }
        ChooseRel | Compare => {
            let h = pair_features(tape, reg, scene, kind, text.unwrap(), deps[0], deps[1])?;
            let logits = affine_role(tape, reg, kind, LayerRole::Output, h)?;
            tape.softmax(logits)?
        }
        Common => {
            let y = attended(tape, reg, scene, kind, LayerRole::Visual, deps[0])?;
            let z = attended(tape, reg, scene, kind, LayerRole::VisualSecond, deps[1])?;
            let h = tape.hadamard(y, z)?;
            let logits = affine_role(tape, reg, kind, LayerRole::Output, h)?;
            tape.softmax(logits)?
        }
        QueryName | QueryAttr | QueryPos => {
            let y = attended(tape, reg, scene, kind, LayerRole::Visual, deps[0])?;
            let logits = affine_role(tape, reg, kind, LayerRole::Output, y)?;
            tape.softmax(logits)?
        }
        AnswerLogic => {
            let slots = scene.answers;
            tape.scatter_pair(deps[0], slots.yes, slots.no, slots.len)?
        }
    };
    Ok(out)
}

fn affine_role(
    tape: &mut Tape,
    reg: &ParameterRegistry,
    kind: ModuleKind,
    role: LayerRole,
    x: NodeId,
) -> Result<NodeId, ModuleError> {
    let id = reg.require(kind, role)?;
    let layer = reg.layer(id);
    Ok(tape.affine(id, &layer.weight, &layer.bias, x)?)
}

/// x = r(W_t t).
fn textual(
    tape: &mut Tape,
    reg: &ParameterRegistry,
    kind: ModuleKind,
    t: NodeId,
) -> Result<NodeId, ModuleError> {
    let h = affine_role(tape, reg, kind, LayerRole::Textual, t)?;
    Ok(tape.relu(h))
}

/// r(W (V a)) for the module's visual layer in `role`.
fn attended(
    tape: &mut Tape,
    reg: &ParameterRegistry,
    scene: &SceneContext,
    kind: ModuleKind,
    role: LayerRole,
    a: NodeId,
) -> Result<NodeId, ModuleError> {
    let pooled = tape.matvec(Rc::clone(&scene.features), a)?;
    let h = affine_role(tape, reg, kind, role, pooled)?;
    Ok(tape.relu(h))
}

/// s_j = r(W_v v_j) · x for every object column, concatenated to R^k.
fn object_scores(
    tape: &mut Tape,
    reg: &ParameterRegistry,
    scene: &SceneContext,
    kind: ModuleKind,
    x: NodeId,
) -> Result<NodeId, ModuleError> {
    let k = scene.features.cols();
    let mut scores = Vec::with_capacity(k);
    for j in 0..k {
        let column = scene.features.col(j)?;
        let leaf = tape.leaf(&column);
        let h = affine_role(tape, reg, kind, LayerRole::Visual, leaf)?;
        let y = tape.relu(h);
        scores.push(tape.dot(y, x)?);
    }
    Ok(tape.concat(&scores)?)
}

/// x ⊙ r(W_v (V a1)) ⊙ r(W_v' (V a2)) for two-dependency scalar heads.
fn pair_features(
    tape: &mut Tape,
    reg: &ParameterRegistry,
    scene: &SceneContext,
    kind: ModuleKind,
    text: NodeId,
    a1: NodeId,
    a2: NodeId,
) -> Result<NodeId, ModuleError> {
    let x = textual(tape, reg, kind, text)?;
    let y = attended(tape, reg, scene, kind, LayerRole::Visual, a1)?;
    let z = attended(tape, reg, scene, kind, LayerRole::VisualSecond, a2)?;
    let xy = tape.hadamard(x, y)?;
    Ok(tape.hadamard(xy, z)?)
}

/// σ(W_o (x ⊙ y ⊙ z)), the shared body of same/different.
fn pair_scalar(
    tape: &mut Tape,
    reg: &ParameterRegistry,
    scene: &SceneContext,
    kind: ModuleKind,
    text: NodeId,
    a1: NodeId,
    a2: NodeId,
) -> Result<NodeId, ModuleError> {
    let h = pair_features(tape, reg, scene, kind, text, a1, a2)?;
    let logit = affine_role(tape, reg, kind, LayerRole::Output, h)?;
    Ok(tape.sigmoid(logit))
}
