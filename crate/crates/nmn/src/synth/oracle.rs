//! Symbolic execution of programs over scene graphs.
//!
//! The oracle evaluates with exact set semantics and produces the gold
//! answer word plus intermediate supervision: a multi-hot attention
//! target for every attention step that matched at least one object, and
//! a 0/1 target for every boolean step. An attention step with no
//! matches carries no target (the loss could not normalize it), but its
//! downstream boolean steps are still targeted.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::dsl::{ModuleKind, Program, TypeError};
use crate::executor::IntermediateTargets;

use super::scene::SceneGraph;
use super::{CATEGORIES, COMPARISONS, SIZES};

/// Symbolic value of one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SymValue {
    Objects(BTreeSet<usize>),
    Truth(bool),
    Answer(String),
}

/// A completed oracle run: per-step values, the answer word, and the
/// training targets derived from the values.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleRun {
    pub values: Vec<SymValue>,
    pub answer: String,
    pub targets: IntermediateTargets,
}

/// Why a program cannot be answered on a scene. Generators respond by
/// resampling; these are expected, not bugs.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleReject {
    #[error("invalid program: {0}")]
    Invalid(#[from] TypeError),
    #[error("step {step}: dependency set is empty")]
    EmptyDependency { step: usize },
    #[error("step {step}: expected exactly one object, found {found}")]
    NotSingleton { step: usize, found: usize },
    #[error("step {step}: candidates do not single out one answer")]
    AmbiguousChoice { step: usize },
    #[error("step {step}: compared objects tie")]
    ComparisonTie { step: usize },
    #[error("step {step}: unusable argument `{arg}`")]
    BadArgument { step: usize, arg: String },
}

fn singleton(set: &BTreeSet<usize>, step: usize) -> Result<usize, OracleReject> {
    if set.len() == 1 {
        Ok(*set.iter().next().expect("len is one"))
    } else {
        Err(OracleReject::NotSingleton {
            step,
            found: set.len(),
        })
    }
}

fn bad_arg(step: usize, arg: &str) -> OracleReject {
    OracleReject::BadArgument {
        step,
        arg: arg.to_string(),
    }
}

/// All objects in `set` share one value of `category`. Empty sets are the
/// caller's concern.
fn all_share(
    scene: &SceneGraph,
    set: &BTreeSet<usize>,
    category: &str,
    step: usize,
) -> Result<bool, OracleReject> {
    let mut value: Option<&str> = None;
    for &i in set {
        let v = scene
            .category_value(i, category)
            .ok_or_else(|| bad_arg(step, category))?;
        match value {
            None => value = Some(v),
            Some(prev) if prev != v => return Ok(false),
            Some(_) => {}
        }
    }
    Ok(true)
}

pub fn oracle_execute(program: &Program, scene: &SceneGraph) -> Result<OracleRun, OracleReject> {
    program.validate()?;
    let mut values: Vec<SymValue> = Vec::with_capacity(program.len());
    let mut targets = IntermediateTargets::default();

    for (step, call) in program.steps().iter().enumerate() {
        let objects_at = |i: usize| -> &BTreeSet<usize> {
            match &values[call.deps[i]] {
                SymValue::Objects(s) => s,
                other => unreachable!("validated dependency types, got {other:?}"),
            }
        };
        let truth_at = |i: usize| -> bool {
            match &values[call.deps[i]] {
                SymValue::Truth(t) => *t,
                other => unreachable!("validated dependency types, got {other:?}"),
            }
        };
        let arg = |i: usize| -> &str { &call.args[i] };

        use ModuleKind::*;
        let value = match call.kind {
            Select => SymValue::Objects(scene.named(arg(0))),
            FilterAttr => SymValue::Objects(
                objects_at(0)
                    .iter()
                    .copied()
                    .filter(|&i| scene.has_value(i, arg(0)))
                    .collect(),
            ),
            FilterNot => SymValue::Objects(
                objects_at(0)
                    .iter()
                    .copied()
                    .filter(|&i| !scene.has_value(i, arg(0)))
                    .collect(),
            ),
            FilterPos => {
                let side = arg(0);
                let mut kept = BTreeSet::new();
                for &i in objects_at(0) {
                    if scene.on_side(i, side).ok_or_else(|| bad_arg(step, side))? {
                        kept.insert(i);
                    }
                }
                SymValue::Objects(kept)
            }
            RelateSub | RelateObj => {
                let rel = arg(0);
                let anchor = objects_at(0);
                let mut found = BTreeSet::new();
                for i in 0..scene.len() {
                    for &j in anchor {
                        let holds = match call.kind {
                            RelateSub => scene.relation_holds(i, j, rel),
                            _ => scene.relation_holds(j, i, rel),
                        }
                        .ok_or_else(|| bad_arg(step, rel))?;
                        if holds {
                            found.insert(i);
                            break;
                        }
                    }
                }
                SymValue::Objects(found)
            }
            RelateAttr => {
                let category = arg(0);
                let anchor = objects_at(0);
                let mut found = BTreeSet::new();
                for i in 0..scene.len() {
                    if anchor.contains(&i) {
                        continue;
                    }
                    let vi = scene
                        .category_value(i, category)
                        .ok_or_else(|| bad_arg(step, category))?;
                    if anchor
                        .iter()
                        .any(|&j| scene.category_value(j, category) == Some(vi))
                    {
                        found.insert(i);
                    }
                }
                SymValue::Objects(found)
            }
            Fusion => SymValue::Objects(objects_at(0) & objects_at(1)),
            And => SymValue::Truth(truth_at(0) && truth_at(1)),
            Or => SymValue::Truth(truth_at(0) || truth_at(1)),
            Exist => SymValue::Truth(!objects_at(0).is_empty()),
            Same | Different => {
                let a = objects_at(0);
                let b = objects_at(1);
                if a.is_empty() || b.is_empty() {
                    return Err(OracleReject::EmptyDependency { step });
                }
                let union: BTreeSet<usize> = a | b;
                let same = all_share(scene, &union, arg(0), step)?;
                SymValue::Truth(if call.kind == Same { same } else { !same })
            }
            SameAll | DifferentAll => {
                let a = objects_at(0);
                if a.is_empty() {
                    return Err(OracleReject::EmptyDependency { step });
                }
                let same = all_share(scene, a, arg(0), step)?;
                SymValue::Truth(if call.kind == SameAll { same } else { !same })
            }
            VerifyRelSub | VerifyRelObj => {
                let rel = arg(0);
                let mut holds = false;
                'outer: for &i in objects_at(0) {
                    for &j in objects_at(1) {
                        let pair = match call.kind {
                            VerifyRelSub => scene.relation_holds(i, j, rel),
                            _ => scene.relation_holds(j, i, rel),
                        }
                        .ok_or_else(|| bad_arg(step, rel))?;
                        if pair {
                            holds = true;
                            break 'outer;
                        }
                    }
                }
                SymValue::Truth(holds)
            }
            VerifyAttr => {
                let a = objects_at(0);
                if a.is_empty() {
                    return Err(OracleReject::EmptyDependency { step });
                }
                SymValue::Truth(a.iter().all(|&i| scene.has_value(i, arg(0))))
            }
            VerifyPos => {
                let a = objects_at(0);
                if a.is_empty() {
                    return Err(OracleReject::EmptyDependency { step });
                }
                let side = arg(0);
                let mut all = true;
                for &i in a {
                    if !scene.on_side(i, side).ok_or_else(|| bad_arg(step, side))? {
                        all = false;
                    }
                }
                SymValue::Truth(all)
            }
            ChooseName => {
                let i = singleton(objects_at(0), step)?;
                let matches: Vec<&str> = call
                    .args
                    .iter()
                    .map(String::as_str)
                    .filter(|&n| scene.object(i).name == n)
                    .collect();
                match matches.as_slice() {
                    [one] => SymValue::Answer(one.to_string()),
                    _ => return Err(OracleReject::AmbiguousChoice { step }),
                }
            }
            ChooseAttr => {
                let i = singleton(objects_at(0), step)?;
                let matches: Vec<&str> = call
                    .args
                    .iter()
                    .map(String::as_str)
                    .filter(|&v| scene.has_value(i, v))
                    .collect();
                match matches.as_slice() {
                    [one] => SymValue::Answer(one.to_string()),
                    _ => return Err(OracleReject::AmbiguousChoice { step }),
                }
            }
            ChoosePos => {
                let i = singleton(objects_at(0), step)?;
                let mut matches = Vec::new();
                for side in &call.args {
                    if scene.on_side(i, side).ok_or_else(|| bad_arg(step, side))? {
                        matches.push(side.clone());
                    }
                }
                match matches.as_slice() {
                    [one] => SymValue::Answer(one.clone()),
                    _ => return Err(OracleReject::AmbiguousChoice { step }),
                }
            }
            ChooseRel => {
                let i = singleton(objects_at(0), step)?;
                let j = singleton(objects_at(1), step)?;
                let mut matches = Vec::new();
                for rel in &call.args {
                    if scene
                        .relation_holds(i, j, rel)
                        .ok_or_else(|| bad_arg(step, rel))?
                    {
                        matches.push(rel.clone());
                    }
                }
                match matches.as_slice() {
                    [one] => SymValue::Answer(one.clone()),
                    _ => return Err(OracleReject::AmbiguousChoice { step }),
                }
            }
            Compare => {
                let direction = arg(0);
                if !COMPARISONS.contains(&direction) {
                    return Err(bad_arg(step, direction));
                }
                let i = singleton(objects_at(0), step)?;
                let j = singleton(objects_at(1), step)?;
                let (oi, oj) = (scene.object(i), scene.object(j));
                if oi.size == oj.size || oi.name == oj.name {
                    return Err(OracleReject::ComparisonTie { step });
                }
                // SIZES orders small before large.
                let larger = if oi.size == SIZES[1] { oi } else { oj };
                let smaller = if oi.size == SIZES[0] { oi } else { oj };
                let winner = if direction == "larger" { larger } else { smaller };
                SymValue::Answer(winner.name.clone())
            }
            Common => {
                let i = singleton(objects_at(0), step)?;
                let j = singleton(objects_at(1), step)?;
                let shared: Vec<&str> = CATEGORIES
                    .iter()
                    .copied()
                    .filter(|c| scene.category_value(i, c) == scene.category_value(j, c))
                    .collect();
                match shared.as_slice() {
                    [one] => SymValue::Answer(
                        scene
                            .category_value(i, one)
                            .expect("category names are valid")
                            .to_string(),
                    ),
                    _ => return Err(OracleReject::AmbiguousChoice { step }),
                }
            }
            QueryName => {
                let i = singleton(objects_at(0), step)?;
                SymValue::Answer(scene.object(i).name.clone())
            }
            QueryAttr => {
                let i = singleton(objects_at(0), step)?;
                let category = arg(0);
                SymValue::Answer(
                    scene
                        .category_value(i, category)
                        .ok_or_else(|| bad_arg(step, category))?
                        .to_string(),
                )
            }
            QueryPos => {
                let i = singleton(objects_at(0), step)?;
                let side = if scene.on_side(i, "left").expect("left is a side") {
                    "left"
                } else {
                    "right"
                };
                SymValue::Answer(side.to_string())
            }
            AnswerLogic => {
                SymValue::Answer(if truth_at(0) { "yes" } else { "no" }.to_string())
            }
        };

        match &value {
            SymValue::Objects(set) if !set.is_empty() => {
                let mut mask = vec![0.0; scene.len()];
                for &i in set {
                    mask[i] = 1.0;
                }
                targets.attention.insert(step, mask);
            }
            SymValue::Objects(_) => {}
            SymValue::Truth(t) => {
                targets.boolean.insert(step, if *t { 1.0 } else { 0.0 });
            }
            SymValue::Answer(_) => {}
        }
        values.push(value);
    }

    let answer = match values.last().expect("validated programs are nonempty") {
        SymValue::Answer(word) => word.clone(),
        other => unreachable!("final step of a validated program answers, got {other:?}"),
    };
    Ok(OracleRun {
        values,
        answer,
        targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::scene::SceneObject;

    fn obj(name: &str, color: &str, size: &str, material: &str, x: usize, y: usize) -> SceneObject {
        SceneObject {
            name: name.into(),
            color: color.into(),
            size: size.into(),
            material: material.into(),
            x,
            y,
        }
    }

    /// Two objects: a red small wooden cat at (0,0), a blue large metal
    /// dog at (1,0). The cat is left of the dog; both are on the top-left
    /// side.
    fn two_scene() -> SceneGraph {
        SceneGraph::new(vec![
            obj("cat", "red", "small", "wood", 0, 0),
            obj("dog", "blue", "large", "metal", 1, 0),
        ])
    }

    fn run(text: &str, scene: &SceneGraph) -> OracleRun {
        oracle_execute(&Program::parse(text).unwrap(), scene).unwrap()
    }

    fn reject(text: &str, scene: &SceneGraph) -> OracleReject {
        oracle_execute(&Program::parse(text).unwrap(), scene).unwrap_err()
    }

    #[test]
    fn query_color_of_the_cat() {
        let run = run("select[cat] -> a0\nquery_attr[color](a0)", &two_scene());
        assert_eq!(run.answer, "red");
        assert_eq!(run.values[0], SymValue::Objects(BTreeSet::from([0])));
        assert_eq!(run.targets.attention[&0], vec![1.0, 0.0]);
        assert!(run.targets.boolean.is_empty());
    }

    #[test]
    fn different_color_pair_is_yes() {
        let run = run(
            "select[cat] -> a0\nselect[dog] -> a1\ndifferent[color](a0, a1) -> b0\nanswer_logic(b0)",
            &two_scene(),
        );
        assert_eq!(run.answer, "yes");
        assert_eq!(run.targets.boolean[&2], 1.0);
    }

    #[test]
    fn missing_name_selects_nothing_and_exist_says_no() {
        let run = run(
            "select[horse] -> a0\nexist(a0) -> b0\nanswer_logic(b0)",
            &two_scene(),
        );
        assert_eq!(run.answer, "no");
        assert_eq!(run.values[0], SymValue::Objects(BTreeSet::new()));
        assert!(
            !run.targets.attention.contains_key(&0),
            "empty select must carry no attention target"
        );
        assert_eq!(run.targets.boolean[&1], 0.0);
    }

    #[test]
    fn relations_and_fusion_compose() {
        // Things left of the dog: only the cat. Fused with select[cat]:
        // still the cat.
        let run = run(
            "select[cat] -> a0\nselect[dog] -> a1\nrelate_sub[left of](a1) -> a2\nfusion(a0, a2) -> a3\nexist(a3) -> b0\nanswer_logic(b0)",
            &two_scene(),
        );
        assert_eq!(run.answer, "yes");
        assert_eq!(run.values[2], SymValue::Objects(BTreeSet::from([0])));
        assert_eq!(run.values[3], SymValue::Objects(BTreeSet::from([0])));
        assert_eq!(run.targets.attention[&2], vec![1.0, 0.0]);
    }

    #[test]
    fn choose_and_compare_answer_from_the_scene() {
        let scene = two_scene();
        assert_eq!(
            run("select[cat] -> a0\nchoose_name[dog, cat](a0)", &scene).answer,
            "cat"
        );
        assert_eq!(
            run("select[cat] -> a0\nchoose_attr[blue, red](a0)", &scene).answer,
            "red"
        );
        assert_eq!(
            run("select[dog] -> a0\nchoose_pos[left, right](a0)", &scene).answer,
            "left",
            "x=1 is on the left half"
        );
        assert_eq!(
            run(
                "select[cat] -> a0\nselect[dog] -> a1\nchoose_rel[left of, right of](a0, a1)",
                &scene
            )
            .answer,
            "left of"
        );
        assert_eq!(
            run(
                "select[cat] -> a0\nselect[dog] -> a1\ncompare[larger](a0, a1)",
                &scene
            )
            .answer,
            "dog"
        );
        assert_eq!(
            run(
                "select[cat] -> a0\nselect[dog] -> a1\ncompare[smaller](a0, a1)",
                &scene
            )
            .answer,
            "cat"
        );
    }

    #[test]
    fn rejects_are_typed() {
        let scene = two_scene();
        assert!(matches!(
            reject("select[horse] -> a0\nquery_name(a0)", &scene),
            OracleReject::NotSingleton { step: 1, found: 0 }
        ));
        assert!(matches!(
            reject(
                "select[horse] -> a0\nselect[cat] -> a1\nsame[color](a0, a1) -> b0\nanswer_logic(b0)",
                &scene
            ),
            OracleReject::EmptyDependency { step: 2 }
        ));
        assert!(matches!(
            reject("select[cat] -> a0\nchoose_name[dog, horse](a0)", &scene),
            OracleReject::AmbiguousChoice { step: 1 }
        ));
        // Same size would tie; here the names differ but sizes differ too,
        // so force a tie with a same-size scene.
        let tie = SceneGraph::new(vec![
            obj("cat", "red", "small", "wood", 0, 0),
            obj("dog", "blue", "small", "metal", 1, 0),
        ]);
        assert!(matches!(
            reject(
                "select[cat] -> a0\nselect[dog] -> a1\ncompare[larger](a0, a1)",
                &tie
            ),
            OracleReject::ComparisonTie { step: 2 }
        ));
        assert!(matches!(
            reject("select[cat] -> a0\nquery_attr[weight](a0)", &scene),
            OracleReject::BadArgument { step: 1, .. }
        ));
    }

    #[test]
    fn common_finds_the_single_shared_category() {
        let scene = SceneGraph::new(vec![
            obj("cat", "red", "small", "wood", 0, 0),
            obj("dog", "red", "large", "metal", 1, 0),
        ]);
        let run = run(
            "select[cat] -> a0\nselect[dog] -> a1\ncommon(a0, a1)",
            &scene,
        );
        assert_eq!(run.answer, "red");

        let two_shared = SceneGraph::new(vec![
            obj("cat", "red", "small", "wood", 0, 0),
            obj("dog", "red", "small", "metal", 1, 0),
        ]);
        assert!(matches!(
            reject(
                "select[cat] -> a0\nselect[dog] -> a1\ncommon(a0, a1)",
                &two_shared
            ),
            OracleReject::AmbiguousChoice { step: 2 }
        ));
    }

    #[test]
    fn verify_and_filter_families_follow_set_semantics() {
        let scene = SceneGraph::new(vec![
            obj("cat", "red", "small", "wood", 0, 0),
            obj("cat", "red", "large", "metal", 3, 2),
            obj("dog", "blue", "small", "wood", 1, 3),
        ]);
        let r = run(
            "select[cat] -> a0\nverify_attr[red](a0) -> b0\nanswer_logic(b0)",
            &scene,
        );
        assert_eq!(r.answer, "yes", "both cats are red");
        let r = run(
            "select[cat] -> a0\nverify_attr[wood](a0) -> b0\nanswer_logic(b0)",
            &scene,
        );
        assert_eq!(r.answer, "no", "one cat is metal");
        let r = run(
            "select[cat] -> a0\nfilter_not[wood](a0) -> a1\nexist(a1) -> b0\nanswer_logic(b0)",
            &scene,
        );
        assert_eq!(r.answer, "yes");
        let r = run(
            "select[cat] -> a0\nfilter_pos[right](a0) -> a1\nquery_attr[size](a1)",
            &scene,
        );
        assert_eq!(r.answer, "large", "only the cat at x=3 is on the right");
        let r = run(
            "select[cat] -> a0\nverify_pos[top](a0) -> b0\nanswer_logic(b0)",
            &scene,
        );
        assert_eq!(r.answer, "no", "one cat sits at y=2");
        let r = run(
            "select[dog] -> a0\nrelate_attr[material](a0) -> a1\nexist(a1) -> b0\nanswer_logic(b0)",
            &scene,
        );
        assert_eq!(r.answer, "yes", "the wooden cat shares the dog's material");
        let r = run(
            "select[cat] -> a0\nselect[dog] -> a1\nverify_rel_sub[above](a0, a1) -> b0\nanswer_logic(b0)",
            &scene,
        );
        assert_eq!(r.answer, "yes", "a cat at y=0 is above the dog at y=3");
        let r = run(
            "select[cat] -> a0\nsame_all[color](a0) -> b0\nanswer_logic(b0)",
            &scene,
        );
        assert_eq!(r.answer, "yes");
        let r = run(
            "select[cat] -> a0\ndifferent_all[size](a0) -> b0\nanswer_logic(b0)",
            &scene,
        );
        assert_eq!(r.answer, "yes");
    }

    #[test]
    fn boolean_targets_cover_every_truth_step() {
        let scene = two_scene();
        let r = run(
            "select[cat] -> a0\nexist(a0) -> b0\nselect[dog] -> a1\nexist(a1) -> b1\nand(b0, b1) -> b2\nanswer_logic(b2)",
            &scene,
        );
        assert_eq!(r.answer, "yes");
        assert_eq!(r.targets.boolean[&1], 1.0);
        assert_eq!(r.targets.boolean[&3], 1.0);
        assert_eq!(r.targets.boolean[&4], 1.0);
        assert_eq!(r.targets.attention.len(), 2);
    }
}
