//! Program templates for question generation.
//!
//! Each template builds one program shape against a concrete scene,
//! choosing arguments so the question is answerable there (or returning
//! `None` so the caller can resample the scene). A template's level is
//! the number of `select` steps in the programs it emits, which tracks
//! how many grounding decisions the executor must chain.
//!
//! Yes/no templates flip a coin for the target answer and retry argument
//! draws a few times to hit it, which keeps the generated answer
//! distribution from collapsing into the easy majority class.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dsl::{ModuleCall, ModuleKind, Program};

use super::oracle::oracle_execute;
use super::scene::SceneGraph;
use super::{CATEGORIES, COLORS, MATERIALS, NAMES, POSITIONS, RELATIONS, SIZES};

/// One program shape. `build` returns `None` when the scene cannot host
/// an answerable instance of it.
pub struct Template {
    pub name: &'static str,
    pub level: usize,
    pub weight: f64,
    pub build: fn(&SceneGraph, &mut ChaCha8Rng) -> Option<Program>,
}

const STEER_TRIES: usize = 12;

fn call(kind: ModuleKind, args: &[&str], deps: &[usize]) -> ModuleCall {
    ModuleCall {
        kind,
        args: args.iter().map(|s| s.to_string()).collect(),
        deps: deps.to_vec(),
    }
}

fn attribute_values() -> Vec<&'static str> {
    COLORS
        .iter()
        .chain(SIZES.iter())
        .chain(MATERIALS.iter())
        .copied()
        .collect()
}

fn category_values(category: &str) -> &'static [&'static str] {
    match category {
        "color" => &COLORS,
        "size" => &SIZES,
        "material" => &MATERIALS,
        other => unreachable!("no values for category {other}"),
    }
}

/// Names present in the scene, sorted and deduplicated.
fn present_names(scene: &SceneGraph) -> Vec<&str> {
    scene
        .objects()
        .iter()
        .map(|o| o.name.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Names carried by exactly one object.
fn unique_names(scene: &SceneGraph) -> Vec<&str> {
    present_names(scene)
        .into_iter()
        .filter(|n| scene.named(n).len() == 1)
        .collect()
}

/// The single object carrying `name`.
fn sole(scene: &SceneGraph, name: &str) -> usize {
    let set = scene.named(name);
    assert!(set.len() == 1, "name {name} is not unique in the scene");
    *set.iter().next().expect("len is one")
}

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str]) -> Option<&'a str> {
    pool.choose(rng).copied()
}

fn shuffled_pair<'a>(rng: &mut ChaCha8Rng, a: &'a str, b: &'a str) -> [&'a str; 2] {
    if rng.gen_bool(0.5) {
        [a, b]
    } else {
        [b, a]
    }
}

/// Draw candidate programs until one's oracle answer matches a fair
/// coin, falling back to the last answerable draw. Draws the oracle
/// rejects are discarded.
fn steer(
    scene: &SceneGraph,
    rng: &mut ChaCha8Rng,
    mut make: impl FnMut(&mut ChaCha8Rng) -> Option<Program>,
) -> Option<Program> {
    let want = if rng.gen_bool(0.5) { "yes" } else { "no" };
    let mut fallback = None;
    for _ in 0..STEER_TRIES {
        let Some(program) = make(rng) else { continue };
        match oracle_execute(&program, scene) {
            Ok(run) if run.answer == want => return Some(program),
            Ok(_) => fallback = Some(program),
            Err(_) => {}
        }
    }
    fallback
}

fn exist_name(scene: &SceneGraph, rng: &mut ChaCha8Rng) -> Option<Program> {
    steer(scene, rng, |rng| {
        let name = pick(rng, &NAMES)?;
        Some(Program::new(vec![
            call(ModuleKind::Select, &[name], &[]),
            call(ModuleKind::Exist, &[], &[0]),
            call(ModuleKind::AnswerLogic, &[], &[1]),
        ]))
    })
}

fn exist_attr(scene: &SceneGraph, rng: &mut ChaCha8Rng) -> Option<Program> {
    let values = attribute_values();
    steer(scene, rng, |rng| {
        let name = pick(rng, &NAMES)?;
        let value = pick(rng, &values)?;
        Some(Program::new(vec![
            call(ModuleKind::Select, &[name], &[]),
            call(ModuleKind::FilterAttr, &[value], &[0]),
            call(ModuleKind::Exist, &[], &[1]),
            call(ModuleKind::AnswerLogic, &[], &[2]),
        ]))
    })
}

fn exist_not(scene: &SceneGraph, rng: &mut ChaCha8Rng) -> Option<Program> {
    let values = attribute_values();
    steer(scene, rng, |rng| {
        let name = pick(rng, &NAMES)?;
        let value = pick(rng, &values)?;
        Some(Program::new(vec![
            call(ModuleKind::Select, &[name], &[]),
            call(ModuleKind::FilterNot, &[value], &[0]),
            call(ModuleKind::Exist, &[], &[1]),
            call(ModuleKind::AnswerLogic, &[], &[2]),
        ]))
    })
}

fn exist_pos(scene: &SceneGraph, rng: &mut ChaCha8Rng) -> Option<Program> {
    steer(scene, rng, |rng| {
        let name = pick(rng, &NAMES)?;
        let side = pick(rng, &POSITIONS)?;
        Some(Program::new(vec![
            call(ModuleKind::Select, &[name], &[]),
            call(ModuleKind::FilterPos, &[side], &[0]),
            call(ModuleKind::Exist, &[], &[1]),
            call(ModuleKind::AnswerLogic, &[], &[2]),
        ]))
    })
}

fn query_color(scene: &SceneGraph, rng: &mut ChaCha8Rng) -> Option<Program> {
    let name = pick(rng, &unique_names(scene))?;
    Some(Program::new(vec![
        call(ModuleKind::Select, &[name], &[]),
        call(ModuleKind::QueryAttr, &["color"], &[0]),
    ]))
}

fn query_pos(scene: &SceneGraph, rng: &mut ChaCha8Rng) -> Option<Program> {
    let name = pick(rng, &unique_names(scene))?;
    Some(Program::new(vec![
        call(ModuleKind::Select, &[name], &[]),
        call(ModuleKind::QueryPos, &[], &[0]),
    ]))
}

/// Objects related to any anchor object under `rel`.
fn relate_sub_set(scene: &SceneGraph, rel: &str, anchor: &BTreeSet<usize>) -> BTreeSet<usize> {
    (0..scene.len())
        .filter(|&i| {
            anchor
                .iter()
                .any(|&j| scene.relation_holds(i, j, rel) == Some(true))
        })
        .collect()
}

/// Scan for (name, relation) pairs whose relate result is one object.
fn singleton_relations<'a>(scene: &'a SceneGraph) -> Vec<(&'a str, &'static str)> {
    let mut found = Vec::new();
    for name in present_names(scene) {
        let anchor = scene.named(name);
        for rel in RELATIONS {
            if relate_sub_set(scene, rel, &anchor).len() == 1 {
                found.push((name, rel));
            }
        }
    }
    found
}

fn query_rel_name(scene: &SceneGraph, rng: &mut ChaCha8Rng) -> Option<Program> {
    let (name, rel) = *singleton_relations(scene).choose(rng)?;
    Some(Program::new(vec![
        call(ModuleKind::Select, &[name], &[]),
        call(ModuleKind::RelateSub, &[rel], &[0]),
        call(ModuleKind::QueryName, &[], &[1]),
    ]))
}

fn rel_query_color(scene: &SceneGraph, rng: &mut ChaCha8Rng) -> Option<Program> {
    let (name, rel) = *singleton_relations(scene).choose(rng)?;
    Some(Program::new(vec![
        call(ModuleKind::Select, &[name], &[]),
        call(ModuleKind::RelateSub, &[rel], &[0]),
        call(ModuleKind::QueryAttr, &["color"], &[1]),
    ]))
}

fn pos_query_color(scene: &SceneGraph, rng: &mut ChaCha8Rng) -> Option<Program> {
    let mut found = Vec::new();
    for name in present_names(scene) {
        let members = scene.named(name);
        for side in POSITIONS {
            let kept = members
                .iter()
                .filter(|&&i| scene.on_side(i, side) == Some(true))
                .count();
            if kept == 1 {
                found.push((name, side));
            }
        }
    }
    let (name, side) = *found.choose(rng)?;
    Some(Program::new(vec![
        call(ModuleKind::Select, &[name], &[]),
        call(ModuleKind::FilterPos, &[side], &[0]),
        call(ModuleKind::QueryAttr, &["color"], &[1]),
    ]))
}

fn verify_attr(scene: &SceneGraph, rng: &mut ChaCha8Rng) -> Option<Program> {
    let present = present_names(scene);
    let values = attribute_values();
    steer(scene, rng, |rng| {
        let name = pick(rng, &present)?;
        let value = pick(rng, &values)?;
        Some(Program::new(vec![
            call(ModuleKind::Select, &[name], &[]),
            call(ModuleKind::VerifyAttr, &[value], &[0]),
            call(ModuleKind::AnswerLogic, &[], &[1]),
        ]))
    })
}

fn verify_pos(scene: &SceneGraph, rng: &mut ChaCha8Rng) -> Option<Program> {
    let present = present_names(scene);
    steer(scene, rng, |rng| {
        let name = pick(rng, &present)?;
        let side = pick(rng, &POSITIONS)?;
        Some(Program::new(vec![
            call(ModuleKind::Select, &[name], &[]),
            call(ModuleKind::VerifyPos, &[side], &[0]),
            call(ModuleKind::AnswerLogic, &[], &[1]),
        ]))
    })
}

fn same_all(scene: &SceneGraph, rng: &mut ChaCha8Rng) -> Option<Program> {
    let present = present_names(scene);
    steer(scene, rng, |rng| {
        let name = pick(rng, &present)?;
        let category = pick(rng, &CATEGORIES)?;
        Some(Program::new(vec![
            call(ModuleKind::Select, &[name], &[]),
            call(ModuleKind::SameAll, &[category], &[0]),
            call(ModuleKind::AnswerLogic, &[], &[1]),
        ]))
    })
}

fn different_all(scene: &SceneGraph, rng: &mut ChaCha8Rng) -> Option<Program> {
    let present = present_names(scene);
    steer(scene, rng, |rng| {
        let name = pick(rng, &present)?;
        let category = pick(rng, &CATEGORIES)?;
        Some(Program::new(vec![
            call(ModuleKind::Select, &[name], &[]),
            call(ModuleKind::DifferentAll, &[category], &[0]),
            call(ModuleKind::AnswerLogic, &[], &[1]),
        ]))
    })
}

fn choose_pos(scene: &SceneGraph, rng: &mut ChaCha8Rng) -> Option<Program> {
    let name = pick(rng, &unique_names(scene))?;
    let axis: [&str; 2] = if rng.gen_bool(0.5) {
        ["left", "right"]
    } else {
        ["top", "bottom"]
    };
    let args = shuffled_pair(rng, axis[0], axis[1]);
    Some(Program::new(vec![
        call(ModuleKind::Select, &[name], &[]),
        call(ModuleKind::ChoosePos, &args, &[0]),
    ]))
}

fn choose_name(scene: &SceneGraph, rng: &mut ChaCha8Rng) -> Option<Program> {
    let name = pick(rng, &unique_names(scene))?;
    let others: Vec<&str> = NAMES.iter().copied().filter(|&n| n != name).collect();
    let distractor = pick(rng, &others)?;
    let args = shuffled_pair(rng, name, distractor);
    Some(Program::new(vec![
        call(ModuleKind::Select, &[name], &[]),
        call(ModuleKind::ChooseName, &args, &[0]),
    ]))
}

fn choose_attr(scene: &SceneGraph, rng: &mut ChaCha8Rng) -> Option<Program> {
    let name = pick(rng, &unique_names(scene))?;
    let category = pick(rng, &CATEGORIES)?;
    let held = scene
        .category_value(sole(scene, name), category)
        .expect("categories are fixed");
    let others: Vec<&str> = category_values(category)
        .iter()
        .copied()
        .filter(|&v| v != held)
        .collect();
    let distractor = pick(rng, &others)?;
    let args = shuffled_pair(rng, held, distractor);
    Some(Program::new(vec![
        call(ModuleKind::Select, &[name], &[]),
        call(ModuleKind::ChooseAttr, &args, &[0]),
    ]))
}

fn exist_rel_sub(scene: &SceneGraph, rng: &mut ChaCha8Rng) -> Option<Program> {
    let present = present_names(scene);
    steer(scene, rng, |rng| {
        let name = pick(rng, &present)?;
        let rel = pick(rng, &RELATIONS)?;
        Some(Program::new(vec![
            call(ModuleKind::Select, &[name], &[]),
            call(ModuleKind::RelateSub, &[rel], &[0]),
            call(ModuleKind::Exist, &[], &[1]),
            call(ModuleKind::AnswerLogic, &[], &[2]),
        ]))
    })
}

fn exist_rel_obj(scene: &SceneGraph, rng: &mut ChaCha8Rng) -> Option<Program> {
    let present = present_names(scene);
    steer(scene, rng, |rng| {
        let name = pick(rng, &present)?;
        let rel = pick(rng, &RELATIONS)?;
        Some(Program::new(vec![
            call(ModuleKind::Select, &[name], &[]),
            call(ModuleKind::RelateObj, &[rel], &[0]),
            call(ModuleKind::Exist, &[], &[1]),
            call(ModuleKind::AnswerLogic, &[], &[2]),
        ]))
    })
}

fn exist_rel_attr(scene: &SceneGraph, rng: &mut ChaCha8Rng) -> Option<Program> {
    let present = present_names(scene);
    steer(scene, rng, |rng| {
        let name = pick(rng, &present)?;
        let category = pick(rng, &CATEGORIES)?;
        Some(Program::new(vec![
            call(ModuleKind::Select, &[name], &[]),
            call(ModuleKind::RelateAttr, &[category], &[0]),
            call(ModuleKind::Exist, &[], &[1]),
            call(ModuleKind::AnswerLogic, &[], &[2]),
        ]))
    })
}

fn verify_rel_sub(scene: &SceneGraph, rng: &mut ChaCha8Rng) -> Option<Program> {
    let present = present_names(scene);
    steer(scene, rng, |rng| {
        let a = pick(rng, &present)?;
        let b = pick(rng, &present)?;
        let rel = pick(rng, &RELATIONS)?;
        Some(Program::new(vec![
            call(ModuleKind::Select, &[a], &[]),
            call(ModuleKind::Select, &[b], &[]),
            call(ModuleKind::VerifyRelSub, &[rel], &[0, 1]),
            call(ModuleKind::AnswerLogic, &[], &[2]),
        ]))
    })
}

fn verify_rel_obj(scene: &SceneGraph, rng: &mut ChaCha8Rng) -> Option<Program> {
    let present = present_names(scene);
    steer(scene, rng, |rng| {
        let a = pick(rng, &present)?;
        let b = pick(rng, &present)?;
        let rel = pick(rng, &RELATIONS)?;
        Some(Program::new(vec![
            call(ModuleKind::Select, &[a], &[]),
            call(ModuleKind::Select, &[b], &[]),
            call(ModuleKind::VerifyRelObj, &[rel], &[0, 1]),
            call(ModuleKind::AnswerLogic, &[], &[2]),
        ]))
    })
}

fn same_pair(scene: &SceneGraph, rng: &mut ChaCha8Rng) -> Option<Program> {
    let present = present_names(scene);
    if present.len() < 2 {
        return None;
    }
    steer(scene, rng, |rng| {
        let a = pick(rng, &present)?;
        let b = pick(rng, &present)?;
        if a == b {
            return None;
        }
        let category = pick(rng, &CATEGORIES)?;
        Some(Program::new(vec![
            call(ModuleKind::Select, &[a], &[]),
            call(ModuleKind::Select, &[b], &[]),
            call(ModuleKind::Same, &[category], &[0, 1]),
            call(ModuleKind::AnswerLogic, &[], &[2]),
        ]))
    })
}

fn different_pair(scene: &SceneGraph, rng: &mut ChaCha8Rng) -> Option<Program> {
    let present = present_names(scene);
    if present.len() < 2 {
        return None;
    }
    steer(scene, rng, |rng| {
        let a = pick(rng, &present)?;
        let b = pick(rng, &present)?;
        if a == b {
            return None;
        }
        let category = pick(rng, &CATEGORIES)?;
        Some(Program::new(vec![
            call(ModuleKind::Select, &[a], &[]),
            call(ModuleKind::Select, &[b], &[]),
            call(ModuleKind::Different, &[category], &[0, 1]),
            call(ModuleKind::AnswerLogic, &[], &[2]),
        ]))
    })
}

fn compare(scene: &SceneGraph, rng: &mut ChaCha8Rng) -> Option<Program> {
    let unique = unique_names(scene);
    let mut pairs = Vec::new();
    for (i, &a) in unique.iter().enumerate() {
        for &b in &unique[i + 1..] {
            let (oa, ob) = (scene.object(sole(scene, a)), scene.object(sole(scene, b)));
            if oa.size != ob.size {
                pairs.push((a, b));
            }
        }
    }
    let (a, b) = *pairs.choose(rng)?;
    let direction = pick(rng, &["larger", "smaller"])?;
    let [first, second] = shuffled_pair(rng, a, b);
    Some(Program::new(vec![
        call(ModuleKind::Select, &[first], &[]),
        call(ModuleKind::Select, &[second], &[]),
        call(ModuleKind::Compare, &[direction], &[0, 1]),
    ]))
}

fn choose_rel(scene: &SceneGraph, rng: &mut ChaCha8Rng) -> Option<Program> {
    let unique = unique_names(scene);
    if unique.len() < 2 {
        return None;
    }
    let a = pick(rng, &unique)?;
    let others: Vec<&str> = unique.iter().copied().filter(|&n| n != a).collect();
    let b = pick(rng, &others)?;
    let (oa, ob) = (scene.object(sole(scene, a)), scene.object(sole(scene, b)));
    let horizontal = if oa.x != ob.x && oa.y != ob.y {
        rng.gen_bool(0.5)
    } else {
        oa.x != ob.x
    };
    let axis: [&str; 2] = if horizontal {
        ["left of", "right of"]
    } else {
        ["above", "below"]
    };
    let args = shuffled_pair(rng, axis[0], axis[1]);
    Some(Program::new(vec![
        call(ModuleKind::Select, &[a], &[]),
        call(ModuleKind::Select, &[b], &[]),
        call(ModuleKind::ChooseRel, &args, &[0, 1]),
    ]))
}

fn common(scene: &SceneGraph, rng: &mut ChaCha8Rng) -> Option<Program> {
    let unique = unique_names(scene);
    let mut pairs = Vec::new();
    for (i, &a) in unique.iter().enumerate() {
        for &b in &unique[i + 1..] {
            let (ia, ib) = (sole(scene, a), sole(scene, b));
            let shared = CATEGORIES
                .iter()
                .filter(|c| scene.category_value(ia, c) == scene.category_value(ib, c))
                .count();
            if shared == 1 {
                pairs.push((a, b));
            }
        }
    }
    let (a, b) = *pairs.choose(rng)?;
    let [first, second] = shuffled_pair(rng, a, b);
    Some(Program::new(vec![
        call(ModuleKind::Select, &[first], &[]),
        call(ModuleKind::Select, &[second], &[]),
        call(ModuleKind::Common, &[], &[0, 1]),
    ]))
}

fn fusion_exist(scene: &SceneGraph, rng: &mut ChaCha8Rng) -> Option<Program> {
    let present = present_names(scene);
    steer(scene, rng, |rng| {
        let a = pick(rng, &present)?;
        let b = pick(rng, &present)?;
        let rel = pick(rng, &RELATIONS)?;
        Some(Program::new(vec![
            call(ModuleKind::Select, &[a], &[]),
            call(ModuleKind::Select, &[b], &[]),
            call(ModuleKind::RelateSub, &[rel], &[1]),
            call(ModuleKind::Fusion, &[], &[0, 2]),
            call(ModuleKind::Exist, &[], &[3]),
            call(ModuleKind::AnswerLogic, &[], &[4]),
        ]))
    })
}

fn and_exist(scene: &SceneGraph, rng: &mut ChaCha8Rng) -> Option<Program> {
    steer(scene, rng, |rng| {
        let a = pick(rng, &NAMES)?;
        let b = pick(rng, &NAMES)?;
        Some(Program::new(vec![
            call(ModuleKind::Select, &[a], &[]),
            call(ModuleKind::Exist, &[], &[0]),
            call(ModuleKind::Select, &[b], &[]),
            call(ModuleKind::Exist, &[], &[2]),
            call(ModuleKind::And, &[], &[1, 3]),
            call(ModuleKind::AnswerLogic, &[], &[4]),
        ]))
    })
}

fn or_exist(scene: &SceneGraph, rng: &mut ChaCha8Rng) -> Option<Program> {
    steer(scene, rng, |rng| {
        let a = pick(rng, &NAMES)?;
        let b = pick(rng, &NAMES)?;
        Some(Program::new(vec![
            call(ModuleKind::Select, &[a], &[]),
            call(ModuleKind::Exist, &[], &[0]),
            call(ModuleKind::Select, &[b], &[]),
            call(ModuleKind::Exist, &[], &[2]),
            call(ModuleKind::Or, &[], &[1, 3]),
            call(ModuleKind::AnswerLogic, &[], &[4]),
        ]))
    })
}

fn triple_fusion(scene: &SceneGraph, rng: &mut ChaCha8Rng) -> Option<Program> {
    let present = present_names(scene);
    steer(scene, rng, |rng| {
        let a = pick(rng, &present)?;
        let b = pick(rng, &present)?;
        let c = pick(rng, &present)?;
        let r1 = pick(rng, &RELATIONS)?;
        let r2 = pick(rng, &RELATIONS)?;
        Some(Program::new(vec![
            call(ModuleKind::Select, &[a], &[]),
            call(ModuleKind::Select, &[b], &[]),
            call(ModuleKind::RelateSub, &[r1], &[1]),
            call(ModuleKind::Fusion, &[], &[0, 2]),
            call(ModuleKind::Select, &[c], &[]),
            call(ModuleKind::RelateSub, &[r2], &[4]),
            call(ModuleKind::Fusion, &[], &[3, 5]),
            call(ModuleKind::Exist, &[], &[6]),
            call(ModuleKind::AnswerLogic, &[], &[7]),
        ]))
    })
}

fn and_rel(scene: &SceneGraph, rng: &mut ChaCha8Rng) -> Option<Program> {
    let present = present_names(scene);
    steer(scene, rng, |rng| {
        let a = pick(rng, &present)?;
        let b = pick(rng, &present)?;
        let c = pick(rng, &present)?;
        let r1 = pick(rng, &RELATIONS)?;
        let r2 = pick(rng, &RELATIONS)?;
        Some(Program::new(vec![
            call(ModuleKind::Select, &[a], &[]),
            call(ModuleKind::Select, &[b], &[]),
            call(ModuleKind::VerifyRelSub, &[r1], &[0, 1]),
            call(ModuleKind::Select, &[c], &[]),
            call(ModuleKind::VerifyRelSub, &[r2], &[1, 3]),
            call(ModuleKind::And, &[], &[2, 4]),
            call(ModuleKind::AnswerLogic, &[], &[5]),
        ]))
    })
}

fn or_rel(scene: &SceneGraph, rng: &mut ChaCha8Rng) -> Option<Program> {
    let present = present_names(scene);
    steer(scene, rng, |rng| {
        let a = pick(rng, &present)?;
        let b = pick(rng, &present)?;
        let c = pick(rng, &present)?;
        let r1 = pick(rng, &RELATIONS)?;
        let r2 = pick(rng, &RELATIONS)?;
        Some(Program::new(vec![
            call(ModuleKind::Select, &[a], &[]),
            call(ModuleKind::Select, &[b], &[]),
            call(ModuleKind::VerifyRelSub, &[r1], &[0, 1]),
            call(ModuleKind::Select, &[c], &[]),
            call(ModuleKind::VerifyRelSub, &[r2], &[1, 3]),
            call(ModuleKind::Or, &[], &[2, 4]),
            call(ModuleKind::AnswerLogic, &[], &[5]),
        ]))
    })
}

fn same_three(scene: &SceneGraph, rng: &mut ChaCha8Rng) -> Option<Program> {
    let present = present_names(scene);
    if present.len() < 3 {
        return None;
    }
    steer(scene, rng, |rng| {
        let mut names = present.clone();
        names.shuffle(rng);
        let (a, b, c) = (names[0], names[1], names[2]);
        let category = pick(rng, &CATEGORIES)?;
        Some(Program::new(vec![
            call(ModuleKind::Select, &[a], &[]),
            call(ModuleKind::Select, &[b], &[]),
            call(ModuleKind::Same, &[category], &[0, 1]),
            call(ModuleKind::Select, &[c], &[]),
            call(ModuleKind::Same, &[category], &[1, 3]),
            call(ModuleKind::And, &[], &[2, 4]),
            call(ModuleKind::AnswerLogic, &[], &[5]),
        ]))
    })
}

fn quad_and(scene: &SceneGraph, rng: &mut ChaCha8Rng) -> Option<Program> {
    let present = present_names(scene);
    steer(scene, rng, |rng| {
        let a = pick(rng, &present)?;
        let b = pick(rng, &present)?;
        let c = pick(rng, &present)?;
        let d = pick(rng, &present)?;
        let r1 = pick(rng, &RELATIONS)?;
        let r2 = pick(rng, &RELATIONS)?;
        Some(Program::new(vec![
            call(ModuleKind::Select, &[a], &[]),
            call(ModuleKind::Select, &[b], &[]),
            call(ModuleKind::VerifyRelSub, &[r1], &[0, 1]),
            call(ModuleKind::Select, &[c], &[]),
            call(ModuleKind::Select, &[d], &[]),
            call(ModuleKind::VerifyRelSub, &[r2], &[3, 4]),
            call(ModuleKind::And, &[], &[2, 5]),
            call(ModuleKind::AnswerLogic, &[], &[6]),
        ]))
    })
}

fn quad_or(scene: &SceneGraph, rng: &mut ChaCha8Rng) -> Option<Program> {
    let present = present_names(scene);
    steer(scene, rng, |rng| {
        let a = pick(rng, &present)?;
        let b = pick(rng, &present)?;
        let c = pick(rng, &present)?;
        let d = pick(rng, &present)?;
        let r1 = pick(rng, &RELATIONS)?;
        let r2 = pick(rng, &RELATIONS)?;
        Some(Program::new(vec![
            call(ModuleKind::Select, &[a], &[]),
            call(ModuleKind::Select, &[b], &[]),
            call(ModuleKind::VerifyRelSub, &[r1], &[0, 1]),
            call(ModuleKind::Select, &[c], &[]),
            call(ModuleKind::Select, &[d], &[]),
            call(ModuleKind::VerifyRelSub, &[r2], &[3, 4]),
            call(ModuleKind::Or, &[], &[2, 5]),
            call(ModuleKind::AnswerLogic, &[], &[6]),
        ]))
    })
}

fn quad_fusion(scene: &SceneGraph, rng: &mut ChaCha8Rng) -> Option<Program> {
    let present = present_names(scene);
    steer(scene, rng, |rng| {
        let a = pick(rng, &present)?;
        let b = pick(rng, &present)?;
        let c = pick(rng, &present)?;
        let d = pick(rng, &present)?;
        let r1 = pick(rng, &RELATIONS)?;
        let r2 = pick(rng, &RELATIONS)?;
        let r3 = pick(rng, &RELATIONS)?;
        Some(Program::new(vec![
            call(ModuleKind::Select, &[a], &[]),
            call(ModuleKind::Select, &[b], &[]),
            call(ModuleKind::RelateSub, &[r1], &[1]),
            call(ModuleKind::Fusion, &[], &[0, 2]),
            call(ModuleKind::Select, &[c], &[]),
            call(ModuleKind::RelateSub, &[r2], &[4]),
            call(ModuleKind::Fusion, &[], &[3, 5]),
            call(ModuleKind::Select, &[d], &[]),
            call(ModuleKind::RelateSub, &[r3], &[7]),
            call(ModuleKind::Fusion, &[], &[6, 8]),
            call(ModuleKind::Exist, &[], &[9]),
            call(ModuleKind::AnswerLogic, &[], &[10]),
        ]))
    })
}

/// The full template catalog, in a fixed order.
pub fn templates() -> &'static [Template] {
    const fn t(
        name: &'static str,
        level: usize,
        build: fn(&SceneGraph, &mut ChaCha8Rng) -> Option<Program>,
    ) -> Template {
        Template {
            name,
            level,
            weight: 1.0,
            build,
        }
    }
    const ALL: &[Template] = &[
        t("exist_name", 1, exist_name),
        t("exist_attr", 1, exist_attr),
        t("exist_not", 1, exist_not),
        t("exist_pos", 1, exist_pos),
        t("query_color", 1, query_color),
        t("query_pos", 1, query_pos),
        t("query_rel_name", 1, query_rel_name),
        t("verify_attr", 1, verify_attr),
        t("verify_pos", 1, verify_pos),
        t("same_all", 1, same_all),
        t("different_all", 1, different_all),
        t("choose_pos", 1, choose_pos),
        t("choose_name", 1, choose_name),
        t("choose_attr", 1, choose_attr),
        t("exist_rel_sub", 1, exist_rel_sub),
        t("exist_rel_obj", 1, exist_rel_obj),
        t("exist_rel_attr", 1, exist_rel_attr),
        t("pos_query_color", 1, pos_query_color),
        t("rel_query_color", 1, rel_query_color),
        t("verify_rel_sub", 2, verify_rel_sub),
        t("verify_rel_obj", 2, verify_rel_obj),
        t("same_pair", 2, same_pair),
        t("different_pair", 2, different_pair),
        t("compare", 2, compare),
        t("choose_rel", 2, choose_rel),
        t("common", 2, common),
        t("fusion_exist", 2, fusion_exist),
        t("and_exist", 2, and_exist),
        t("or_exist", 2, or_exist),
        t("triple_fusion", 3, triple_fusion),
        t("and_rel", 3, and_rel),
        t("or_rel", 3, or_rel),
        t("same_three", 3, same_three),
        t("quad_and", 4, quad_and),
        t("quad_or", 4, quad_or),
        t("quad_fusion", 4, quad_fusion),
    ];
    ALL
}

#[cfg(test)]
mod tests {
    use std::collections::{BTreeMap, BTreeSet};

    use rand::SeedableRng;

    use super::*;
    use crate::dsl::ModuleKind;

    #[test]
    fn catalog_shape() {
        let all = templates();
        assert_eq!(all.len(), 36);
        let mut by_level = BTreeMap::new();
        let mut names = BTreeSet::new();
        for t in all {
            *by_level.entry(t.level).or_insert(0usize) += 1;
            assert!(names.insert(t.name), "duplicate template name {}", t.name);
            assert!(t.weight > 0.0);
        }
        assert_eq!(by_level[&1], 19);
        assert_eq!(by_level[&2], 10);
        assert_eq!(by_level[&3], 4);
        assert_eq!(by_level[&4], 3);
    }

    #[test]
    fn every_template_builds_oracle_accepted_programs() {
        let mut scene_rng = ChaCha8Rng::seed_from_u64(11);
        let scenes: Vec<SceneGraph> = (0..60).map(|_| SceneGraph::sample(&mut scene_rng, 8)).collect();
        for t in templates() {
            let mut built = 0usize;
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            for scene in &scenes {
                let Some(program) = (t.build)(scene, &mut rng) else {
                    continue;
                };
                built += 1;
                program.validate().unwrap_or_else(|e| {
                    panic!("template {} built an invalid program: {e}", t.name)
                });
                let selects = program
                    .steps()
                    .iter()
                    .filter(|c| c.kind == ModuleKind::Select)
                    .count();
                assert_eq!(
                    selects, t.level,
                    "template {} level must equal its select count",
                    t.name
                );
                oracle_execute(&program, scene).unwrap_or_else(|e| {
                    panic!("template {} built an unanswerable program: {e}", t.name)
                });
            }
            assert!(
                built >= scenes.len() / 3,
                "template {} built only {built} of {} scenes",
                t.name,
                scenes.len()
            );
        }
    }

    #[test]
    fn built_programs_cover_every_module_kind() {
        let mut scene_rng = ChaCha8Rng::seed_from_u64(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut kinds = BTreeSet::new();
        for _ in 0..40 {
            let scene = SceneGraph::sample(&mut scene_rng, 8);
            for t in templates() {
                if let Some(program) = (t.build)(&scene, &mut rng) {
                    kinds.extend(program.steps().iter().map(|c| c.kind));
                }
            }
        }
        for kind in ModuleKind::ALL {
            assert!(kinds.contains(kind), "no template ever emits {kind:?}");
        }
    }

    #[test]
    fn yes_no_templates_emit_both_answers() {
        let mut scene_rng = ChaCha8Rng::seed_from_u64(21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let exist = templates()
            .iter()
            .find(|t| t.name == "exist_name")
            .expect("catalog holds exist_name");
        let mut tally = BTreeMap::new();
        for _ in 0..200 {
            let scene = SceneGraph::sample(&mut scene_rng, 8);
            if let Some(program) = (exist.build)(&scene, &mut rng) {
                let run = oracle_execute(&program, &scene).expect("steered programs answer");
                *tally.entry(run.answer).or_insert(0usize) += 1;
            }
        }
        let yes = *tally.get("yes").unwrap_or(&0);
        let no = *tally.get("no").unwrap_or(&0);
        assert!(
            yes >= 50 && no >= 50,
            "steering should balance answers, got yes={yes} no={no}"
        );
    }

    #[test]
    fn builders_are_deterministic() {
        let mut scene_rng = ChaCha8Rng::seed_from_u64(5);
        let scene = SceneGraph::sample(&mut scene_rng, 8);
        for t in templates() {
            let a = (t.build)(&scene, &mut ChaCha8Rng::seed_from_u64(99));
            let b = (t.build)(&scene, &mut ChaCha8Rng::seed_from_u64(99));
            assert_eq!(
                a.map(|p| p.steps().to_vec()),
                b.map(|p| p.steps().to_vec()),
                "template {} must be deterministic under a fixed seed",
                t.name
            );
        }
    }
}
