//! The typed program language.
//!
//! A program is a straight-line sequence of module calls. Each call names a
//! module kind, carries zero or more text arguments (vocabulary words, which
//! may contain spaces, as in `left of`) and consumes the outputs of earlier
//! steps. The final step must produce an answer distribution.
//!
//! Text form, one step per line (`;` also separates steps):
//!
//! ```text
//! select[cat] -> a0
//! filter_attr[red](a0) -> a1
//! exist(a1) -> b0
//! answer_logic(b0)
//! ```
//!
//! Every step except the last binds its output to a slot (`-> a0`); the
//! last step leaves its output as the program's answer. Slot names are
//! arbitrary identifiers on input; the canonical printer numbers attention
//! slots `a0, a1, ...` and boolean slots `b0, b1, ...` in order of
//! definition. Internally dependencies are step indices, which is also how
//! the JSON mirror (`{"steps": [{"module": ..., "args": [...], "deps":
//! [...]}]}`) stores them.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// What a module produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueType {
    /// Soft selection over the scene's k objects, entries in [0, 1].
    Attention,
    /// Scalar truth value in [0, 1].
    Boolean,
    /// Distribution over the answer vocabulary.
    Answer,
}

impl fmt::Display for ValueType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ValueType::Attention => "attention",
            ValueType::Boolean => "boolean",
            ValueType::Answer => "answer",
        };
        f.write_str(s)
    }
}

macro_rules! module_kinds {
    ($(($variant:ident, $name:literal)),+ $(,)?) => {
        /// Every module the executor knows how to run.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum ModuleKind {
            $($variant),+
        }

        impl ModuleKind {
            pub const ALL: &'static [ModuleKind] = &[$(ModuleKind::$variant),+];

            pub fn name(self) -> &'static str {
                match self {
                    $(ModuleKind::$variant => $name),+
                }
            }

            pub fn parse_name(s: &str) -> Option<ModuleKind> {
                match s {
                    $($name => Some(ModuleKind::$variant),)+
                    _ => None,
                }
            }
        }
    };
}

module_kinds![
    (Select, "select"),
    (FilterAttr, "filter_attr"),
    (FilterNot, "filter_not"),
    (FilterPos, "filter_pos"),
    (RelateSub, "relate_sub"),
    (RelateObj, "relate_obj"),
    (RelateAttr, "relate_attr"),
    (Fusion, "fusion"),
    (And, "and"),
    (Or, "or"),
    (Same, "same"),
    (SameAll, "same_all"),
    (Different, "different"),
    (DifferentAll, "different_all"),
    (Exist, "exist"),
    (VerifyRelSub, "verify_rel_sub"),
    (VerifyRelObj, "verify_rel_obj"),
    (VerifyAttr, "verify_attr"),
    (VerifyPos, "verify_pos"),
    (ChooseName, "choose_name"),
    (ChooseAttr, "choose_attr"),
    (ChoosePos, "choose_pos"),
    (ChooseRel, "choose_rel"),
    (Compare, "compare"),
    (Common, "common"),
    (QueryName, "query_name"),
    (QueryAttr, "query_attr"),
    (QueryPos, "query_pos"),
    (AnswerLogic, "answer_logic"),
];

use ModuleKind::*;
use ValueType::{Answer, Attention, Boolean};

impl ModuleKind {
    /// Types of the step outputs this module consumes, in order.
    pub fn dep_types(self) -> &'static [ValueType] {
        match self {
            Select => &[],
            FilterAttr | FilterNot | FilterPos => &[Attention],
            RelateSub | RelateObj | RelateAttr => &[Attention],
            Fusion => &[Attention, Attention],
            And | Or => &[Boolean, Boolean],
            Same | Different => &[Attention, Attention],
            SameAll | DifferentAll => &[Attention],
            Exist => &[Attention],
            VerifyRelSub | VerifyRelObj => &[Attention, Attention],
            VerifyAttr | VerifyPos => &[Attention],
            ChooseName | ChooseAttr | ChoosePos => &[Attention],
            ChooseRel => &[Attention, Attention],
            Compare | Common => &[Attention, Attention],
            QueryName | QueryAttr | QueryPos => &[Attention],
            AnswerLogic => &[Boolean],
        }
    }

    pub fn output_type(self) -> ValueType {
        match self {
            Select | FilterAttr | FilterNot | FilterPos | RelateSub | RelateObj | RelateAttr
            | Fusion => Attention,
            And | Or | Same | SameAll | Different | DifferentAll | Exist | VerifyRelSub
            | VerifyRelObj | VerifyAttr | VerifyPos => Boolean,
            ChooseName | ChooseAttr | ChoosePos | ChooseRel | Compare | Common | QueryName
            | QueryAttr | QueryPos | AnswerLogic => Answer,
        }
    }

    /// Inclusive range of accepted text arguments.
    pub fn text_arity(self) -> (usize, usize) {
        match self {
            Select => (1, 1),
            FilterAttr | FilterNot | FilterPos => (1, 1),
            RelateSub | RelateObj | RelateAttr => (1, 1),
            Fusion | And | Or | Exist | Common | AnswerLogic => (0, 0),
            Same | SameAll | Different | DifferentAll => (1, 1),
            VerifyRelSub | VerifyRelObj | VerifyAttr | VerifyPos => (1, 1),
            ChooseName | ChooseAttr | ChoosePos | ChooseRel => (2, 2),
            Compare => (1, 1),
            QueryName | QueryPos => (0, 0),
            QueryAttr => (1, 1),
        }
    }

    /// Whether the module's formula consumes the embedded text argument.
    /// `query_attr` carries an argument for the symbolic oracle but its
    /// network reads only the attended visual features.
    pub fn uses_text_embedding(self) -> bool {
        match self {
            Select | FilterAttr | FilterNot | FilterPos | RelateSub | RelateObj | RelateAttr
            | Same | SameAll | Different | DifferentAll | VerifyRelSub | VerifyRelObj
            | VerifyAttr | VerifyPos | ChooseName | ChooseAttr | ChoosePos | ChooseRel
            | Compare => true,
            Fusion | And | Or | Exist | Common | QueryName | QueryAttr | QueryPos
            | AnswerLogic => false,
        }
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One step of a program. `deps` are indices of earlier steps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleCall {
    pub kind: ModuleKind,
    pub args: Vec<String>,
    pub deps: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    steps: Vec<ModuleCall>,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}, column {col}: {kind}")]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseErrorKind {
    #[error("program has no steps")]
    EmptyProgram,
    #[error("expected a module name")]
    ExpectedModuleName,
    #[error("unknown module `{0}`")]
    UnknownModule(String),
    #[error("unclosed `{0}`")]
    Unclosed(char),
    #[error("empty {0} list entry")]
    EmptyListEntry(&'static str),
    #[error("`{kind}` takes {min}..={max} text arguments, found {got}")]
    TextArity {
        kind: ModuleKind,
        min: usize,
        max: usize,
        got: usize,
    },
    #[error("`{kind}` takes {expected} dependencies, found {got}")]
    DepArity {
        kind: ModuleKind,
        expected: usize,
        got: usize,
    },
    #[error("reference to undefined slot `{0}`")]
    UndefinedSlot(String),
    #[error("slot `{0}` is bound more than once")]
    DuplicateSlot(String),
    #[error("expected a slot name after `->`")]
    ExpectedSlot,
    #[error("unexpected trailing input `{0}`")]
    TrailingInput(String),
    #[error("step must bind its output with `-> slot` (only the final step may not)")]
    MissingBinding,
    #[error("final step must not bind its output")]
    BindingOnFinal,
    #[error("final module `{0}` does not produce an answer")]
    FinalNotAnswer(ModuleKind),
}

/// Structural and type errors reported by [`Program::validate`].
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum TypeError {
    #[error("program has no steps")]
    Empty,
    #[error("step {step} (`{kind}`) takes {min}..={max} text arguments, found {got}")]
    TextArity {
        step: usize,
        kind: ModuleKind,
        min: usize,
        max: usize,
        got: usize,
    },
    #[error("step {step} (`{kind}`) takes {expected} dependencies, found {got}")]
    DepArity {
        step: usize,
        kind: ModuleKind,
        expected: usize,
        got: usize,
    },
    #[error("step {step} depends on step {dep}, which is not an earlier step")]
    BadDepIndex { step: usize, dep: usize },
    #[error(
        "step {step} (`{kind}`) expects {expected} for dependency {position}, \
         but step {dep} produces {got}"
    )]
    DepType {
        step: usize,
        kind: ModuleKind,
        position: usize,
        dep: usize,
        expected: ValueType,
        got: ValueType,
    },
    #[error("final module `{0}` does not produce an answer")]
    FinalNotAnswer(ModuleKind),
    #[error("step {step} (`{kind}`) produces an answer before the final step")]
    AnswerBeforeEnd { step: usize, kind: ModuleKind },
    #[error("step {step} (`{kind}`) output is never consumed")]
    UnconsumedStep { step: usize, kind: ModuleKind },
}

#[derive(Debug, Error)]
pub enum JsonError {
    #[error("malformed program JSON: {0}")]
    Syntax(#[from] serde_json::Error),
    #[error("unknown module `{0}`")]
    UnknownModule(String),
}

impl Program {
    /// Wraps raw steps without checking them; call [`Program::validate`]
    /// before executing anything built this way.
    pub fn new(steps: Vec<ModuleCall>) -> Program {
        Program { steps }
    }

    pub fn steps(&self) -> &[ModuleCall] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Declared object count of the question: one per `select` step.
    pub fn num_objects(&self) -> usize {
        self.steps.iter().filter(|s| s.kind == Select).count()
    }

    /// Full structural check: arities, dependency ordering and typing,
    /// answer position, and that no intermediate output is dropped.
    pub fn validate(&self) -> Result<(), TypeError> {
        if self.steps.is_empty() {
            return Err(TypeError::Empty);
        }
        let last = self.steps.len() - 1;
        let mut consumed = vec![false; self.steps.len()];
        for (i, step) in self.steps.iter().enumerate() {
            let (min, max) = step.kind.text_arity();
            if step.args.len() < min || step.args.len() > max {
                return Err(TypeError::TextArity {
                    step: i,
                    kind: step.kind,
                    min,
                    max,
                    got: step.args.len(),
                });
            }
            let expected = step.kind.dep_types();
            if step.deps.len() != expected.len() {
                return Err(TypeError::DepArity {
                    step: i,
                    kind: step.kind,
                    expected: expected.len(),
                    got: step.deps.len(),
                });
            }
            for (position, (&dep, &want)) in step.deps.iter().zip(expected).enumerate() {
                if dep >= i {
                    return Err(TypeError::BadDepIndex { step: i, dep });
                }
                let got = self.steps[dep].kind.output_type();
                if got != want {
                    return Err(TypeError::DepType {
                        step: i,
                        kind: step.kind,
                        position,
                        dep,
                        expected: want,
                        got,
                    });
                }
                consumed[dep] = true;
            }
            if step.kind.output_type() == Answer && i != last {
                return Err(TypeError::AnswerBeforeEnd {
                    step: i,
                    kind: step.kind,
                });
            }
        }
        if self.steps[last].kind.output_type() != Answer {
            return Err(TypeError::FinalNotAnswer(self.steps[last].kind));
        }
        for (i, step) in self.steps.iter().enumerate().take(last) {
            if !consumed[i] {
                return Err(TypeError::UnconsumedStep {
                    step: i,
                    kind: step.kind,
                });
            }
        }
        Ok(())
    }

    /// Canonical text form: one step per line, attention slots numbered
    /// `a0..`, boolean slots `b0..`, final step unbound.
    pub fn to_text(&self) -> String {
        let mut slot_names: Vec<String> = Vec::with_capacity(self.steps.len());
        let (mut next_a, mut next_b) = (0usize, 0usize);
        let mut out = String::new();
        let last = self.steps.len().saturating_sub(1);
        for (i, step) in self.steps.iter().enumerate() {
            out.push_str(step.kind.name());
            if !step.args.is_empty() {
                out.push('[');
                out.push_str(&step.args.join(", "));
                out.push(']');
            }
            if !step.deps.is_empty() {
                out.push('(');
                let refs: Vec<&str> = step.deps.iter().map(|d| slot_names[*d].as_str()).collect();
                out.push_str(&refs.join(", "));
                out.push(')');
            }
            let name = match step.kind.output_type() {
                Attention => {
                    let n = format!("a{next_a}");
                    next_a += 1;
                    n
                }
                Boolean => {
                    let n = format!("b{next_b}");
                    next_b += 1;
                    n
                }
                Answer => String::new(),
            };
            if i != last {
                out.push_str(" -> ");
                out.push_str(&name);
                out.push('\n');
            }
            slot_names.push(name);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Program, ParseError> {
        parse_text(text)
    }

    pub fn to_json(&self) -> String {
        let mirror = JsonProgram {
            steps: self
                .steps
                .iter()
                .map(|s| JsonStep {
                    module: s.kind.name().to_string(),
                    args: s.args.clone(),
                    deps: s.deps.clone(),
                })
                .collect(),
        };
        serde_json::to_string(&mirror).expect("program serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Program, JsonError> {
        let mirror: JsonProgram = serde_json::from_str(text)?;
        let mut steps = Vec::with_capacity(mirror.steps.len());
        for s in mirror.steps {
            let kind = ModuleKind::parse_name(&s.module)
                .ok_or_else(|| JsonError::UnknownModule(s.module.clone()))?;
            steps.push(ModuleCall {
                kind,
                args: s.args,
                deps: s.deps,
            });
        }
        Ok(Program { steps })
    }
}

#[derive(Serialize, Deserialize)]
struct JsonProgram {
    steps: Vec<JsonStep>,
}

#[derive(Serialize, Deserialize)]
struct JsonStep {
    module: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    args: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    deps: Vec<usize>,
}

struct RawStep {
    line: usize,
    col: usize,
    kind: ModuleKind,
    args: Vec<String>,
    dep_slots: Vec<(String, usize)>,
    binding: Option<(String, usize)>,
}

fn parse_text(text: &str) -> Result<Program, ParseError> {
    let mut raw_steps: Vec<RawStep> = Vec::new();
    for (line_ix, line) in text.lines().enumerate() {
        let mut col_base = 0usize;
        for segment in line.split(';') {
            if !segment.trim().is_empty() {
                raw_steps.push(parse_step(segment, line_ix + 1, col_base)?);
            }
            col_base += segment.len() + 1;
        }
    }
    if raw_steps.is_empty() {
        return Err(ParseError {
            line: 1,
            col: 1,
            kind: ParseErrorKind::EmptyProgram,
        });
    }

    let last = raw_steps.len() - 1;
    let mut slots: HashMap<String, usize> = HashMap::new();
    let mut steps: Vec<ModuleCall> = Vec::with_capacity(raw_steps.len());
    for (i, raw) in raw_steps.into_iter().enumerate() {
        let mut deps = Vec::with_capacity(raw.dep_slots.len());
        for (slot, col) in &raw.dep_slots {
            match slots.get(slot) {
                Some(&step) => deps.push(step),
                None => {
                    return Err(ParseError {
                        line: raw.line,
                        col: *col,
                        kind: ParseErrorKind::UndefinedSlot(slot.clone()),
                    })
                }
            }
        }
        let (min, max) = raw.kind.text_arity();
        if raw.args.len() < min || raw.args.len() > max {
            return Err(ParseError {
                line: raw.line,
                col: raw.col,
                kind: ParseErrorKind::TextArity {
                    kind: raw.kind,
                    min,
                    max,
                    got: raw.args.len(),
                },
            });
        }
        let expected = raw.kind.dep_types().len();
        if deps.len() != expected {
            return Err(ParseError {
                line: raw.line,
                col: raw.col,
                kind: ParseErrorKind::DepArity {
                    kind: raw.kind,
                    expected,
                    got: deps.len(),
                },
            });
        }
        match (&raw.binding, i == last) {
            (Some((slot, col)), false) => {
                if slots.insert(slot.clone(), i).is_some() {
                    return Err(ParseError {
                        line: raw.line,
                        col: *col,
                        kind: ParseErrorKind::DuplicateSlot(slot.clone()),
                    });
                }
            }
            (None, false) => {
                return Err(ParseError {
                    line: raw.line,
                    col: raw.col,
                    kind: ParseErrorKind::MissingBinding,
                })
            }
            (Some((_, col)), true) => {
                return Err(ParseError {
                    line: raw.line,
                    col: *col,
                    kind: ParseErrorKind::BindingOnFinal,
                })
            }
            (None, true) => {
                if raw.kind.output_type() != Answer {
                    return Err(ParseError {
                        line: raw.line,
                        col: raw.col,
                        kind: ParseErrorKind::FinalNotAnswer(raw.kind),
                    });
                }
            }
        }
        steps.push(ModuleCall {
            kind: raw.kind,
            args: raw.args,
            deps,
        });
    }
    Ok(Program { steps })
}

/// Character cursor over one step. Columns are 1-based within the original
/// line; `base` is the segment's offset inside it.
struct Cursor<'a> {
    chars: Vec<char>,
    pos: usize,
    line: usize,
    base: usize,
    _text: &'a str,
}

impl<'a> Cursor<'a> {
    fn new(text: &'a str, line: usize, base: usize) -> Self {
        Cursor {
            chars: text.chars().collect(),
            pos: 0,
            line,
            base,
            _text: text,
        }
    }

    fn col(&self) -> usize {
        self.base + self.pos + 1
    }

    fn err(&self, kind: ParseErrorKind) -> ParseError {
        ParseError {
            line: self.line,
            col: self.col(),
            kind,
        }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek();
        if c.is_some() {
            self.pos += 1;
        }
        c
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_whitespace()) {
            self.pos += 1;
        }
    }

    fn ident(&mut self) -> String {
        let mut s = String::new();
        while matches!(self.peek(), Some(c) if c.is_ascii_alphanumeric() || c == '_') {
            s.push(self.bump().unwrap());
        }
        s
    }

    /// Reads a comma-separated list up to `close`, trimming each entry.
    /// Entries keep interior spaces (multi-word vocabulary items).
    fn list(
        &mut self,
        close: char,
        what: &'static str,
    ) -> Result<Vec<(String, usize)>, ParseError> {
        let open_col = self.col();
        self.bump();
        let mut items = Vec::new();
        let mut current = String::new();
        let mut item_col = self.col();
        loop {
            match self.peek() {
                None => {
                    return Err(ParseError {
                        line: self.line,
                        col: open_col,
                        kind: ParseErrorKind::Unclosed(if close == ']' { '[' } else { '(' }),
                    })
                }
                Some(c) if c == close || c == ',' => {
                    self.bump();
                    let trimmed = current.trim();
                    if trimmed.is_empty() {
                        return Err(ParseError {
                            line: self.line,
                            col: item_col,
                            kind: ParseErrorKind::EmptyListEntry(what),
                        });
                    }
                    items.push((trimmed.to_string(), item_col));
                    current.clear();
                    if c == close {
                        return Ok(items);
                    }
                    item_col = self.col();
                }
                Some(_) => current.push(self.bump().unwrap()),
            }
        }
    }
}

fn parse_step(segment: &str, line: usize, col_base: usize) -> Result<RawStep, ParseError> {
    let mut cur = Cursor::new(segment, line, col_base);
    cur.skip_ws();
    let name_col = cur.col();
    let name = cur.ident();
    if name.is_empty() {
        return Err(cur.err(ParseErrorKind::ExpectedModuleName));
    }
    let kind = ModuleKind::parse_name(&name).ok_or(ParseError {
        line,
        col: name_col,
        kind: ParseErrorKind::UnknownModule(name),
    })?;

    let mut args = Vec::new();
    if cur.peek() == Some('[') {
        args = cur.list(']', "argument")?.into_iter().map(|(s, _)| s).collect();
    }
    let mut dep_slots = Vec::new();
    if cur.peek() == Some('(') {
        dep_slots = cur.list(')', "dependency")?;
    }
    cur.skip_ws();
    let mut binding = None;
    if cur.peek() == Some('-') {
        cur.bump();
        if cur.bump() != Some('>') {
            return Err(cur.err(ParseErrorKind::ExpectedSlot));
        }
        cur.skip_ws();
        let slot_col = cur.col();
        let slot = cur.ident();
        if slot.is_empty() {
            return Err(cur.err(ParseErrorKind::ExpectedSlot));
        }
        binding = Some((slot, slot_col));
    }
    cur.skip_ws();
    if cur.peek().is_some() {
        let rest: String = cur.chars[cur.pos..].iter().collect();
        return Err(cur.err(ParseErrorKind::TrailingInput(rest.trim().to_string())));
    }
    Ok(RawStep {
        line,
        col: name_col,
        kind,
        args,
        dep_slots,
        binding,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(kind: ModuleKind, args: &[&str], deps: &[usize]) -> ModuleCall {
        ModuleCall {
            kind,
            args: args.iter().map(|s| s.to_string()).collect(),
            deps: deps.to_vec(),
        }
    }

    #[test]
    fn kind_table_is_complete_and_names_are_unique() {
        assert_eq!(ModuleKind::ALL.len(), 29);
        let mut names: Vec<&str> = ModuleKind::ALL.iter().map(|k| k.name()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), 29, "module names must be unique");
        for kind in ModuleKind::ALL {
            assert_eq!(ModuleKind::parse_name(kind.name()), Some(*kind));
        }
    }

    #[test]
    fn every_kind_has_consistent_signature() {
        for kind in ModuleKind::ALL {
            let (min, max) = kind.text_arity();
            assert!(min <= max, "{kind}: bad text arity");
            assert!(kind.dep_types().len() <= 2, "{kind}: too many deps");
            if kind.uses_text_embedding() {
                assert!(max >= 1, "{kind} consumes text but accepts none");
            }
        }
        assert!(!ModuleKind::QueryAttr.uses_text_embedding());
        assert_eq!(ModuleKind::QueryAttr.text_arity(), (1, 1));
    }

    #[test]
    fn parses_the_two_step_query() {
        let p = Program::parse("select[cat] -> a0\nquery_name(a0)").unwrap();
        assert_eq!(
            p.steps(),
            &[
                call(Select, &["cat"], &[]),
                call(QueryName, &[], &[0]),
            ]
        );
        assert_eq!(p.num_objects(), 1);
        p.validate().unwrap();
    }

    #[test]
    fn semicolons_separate_steps_like_newlines() {
        let a = Program::parse("select[dog] -> a0; exist(a0) -> b0; answer_logic(b0)").unwrap();
        let b = Program::parse("select[dog] -> a0\nexist(a0) -> b0\nanswer_logic(b0)").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn multi_word_arguments_stay_single_symbols() {
        let p = Program::parse(
            "select[cat] -> a0\nrelate_sub[left of](a0) -> a1\nquery_name(a1)",
        )
        .unwrap();
        assert_eq!(p.steps()[1].args, vec!["left of".to_string()]);
    }

    #[test]
    fn choose_takes_two_comma_separated_candidates() {
        let p = Program::parse("select[cat] -> a0\nchoose_attr[red, blue](a0)").unwrap();
        assert_eq!(p.steps()[1].args, vec!["red", "blue"]);
        p.validate().unwrap();
    }

    #[test]
    fn arbitrary_slot_names_resolve_by_definition_order() {
        let p = Program::parse("select[cat] -> kitty\nselect[dog] -> rex\nfusion(kitty, rex) -> both\nexist(both) -> any\nanswer_logic(any)").unwrap();
        assert_eq!(p.steps()[2].deps, vec![0, 1]);
        assert_eq!(p.steps()[4].deps, vec![3]);
    }

    #[test]
    fn canonical_format_round_trips() {
        let p = Program::parse(
            "select[cat] -> x; select[dog] -> y; same[color](x, y) -> z; answer_logic(z)",
        )
        .unwrap();
        let text = p.to_text();
        assert_eq!(
            text,
            "select[cat] -> a0\nselect[dog] -> a1\nsame[color](a0, a1) -> b0\nanswer_logic(b0)"
        );
        assert_eq!(Program::parse(&text).unwrap(), p);
    }

    #[test]
    fn json_mirror_round_trips() {
        let p = Program::parse("select[ball] -> a0\nverify_attr[red](a0) -> b0\nanswer_logic(b0)")
            .unwrap();
        let json = p.to_json();
        let back = Program::from_json(&json).unwrap();
        assert_eq!(back, p);
        assert!(json.contains("\"module\":\"select\""));
    }

    #[test]
    fn unknown_module_reports_line_and_column() {
        let err = Program::parse("select[cat] -> a0\nfrobnicate(a0)").unwrap_err();
        assert_eq!(err.line, 2);
        assert_eq!(err.col, 1);
        assert_eq!(
            err.kind,
            ParseErrorKind::UnknownModule("frobnicate".to_string())
        );
    }

    #[test]
    fn undefined_slot_reports_position_within_line() {
        let err = Program::parse("select[cat] -> a0; exist(a9) -> b0; answer_logic(b0)")
            .unwrap_err();
        assert_eq!(err.line, 1);
        assert_eq!(err.kind, ParseErrorKind::UndefinedSlot("a9".to_string()));
        assert_eq!(err.col, 26, "column should point at the bad slot");
    }

    #[test]
    fn forward_references_are_undefined_slots() {
        let err =
            Program::parse("exist(a0) -> b0\nselect[cat] -> a0\nanswer_logic(b0)").unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::UndefinedSlot("a0".to_string()));
    }

    #[test]
    fn missing_binding_on_intermediate_step_is_rejected() {
        let err = Program::parse("select[cat]\nquery_name(a0)").unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::MissingBinding);
    }

    #[test]
    fn binding_on_final_step_is_rejected() {
        let err = Program::parse("select[cat] -> a0\nquery_name(a0) -> out").unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::BindingOnFinal);
    }

    #[test]
    fn final_step_must_produce_an_answer() {
        let err = Program::parse("select[cat] -> a0\nexist(a0)").unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::FinalNotAnswer(Exist));
    }

    #[test]
    fn text_arity_is_checked_at_parse_time() {
        let err = Program::parse("select[cat, dog] -> a0\nquery_name(a0)").unwrap_err();
        assert_eq!(
            err.kind,
            ParseErrorKind::TextArity {
                kind: Select,
                min: 1,
                max: 1,
                got: 2
            }
        );
    }

    #[test]
    fn dep_arity_is_checked_at_parse_time() {
        let err = Program::parse("select[cat] -> a0\nselect[dog] -> a1\nexist(a0, a1) -> b0\nanswer_logic(b0)")
            .unwrap_err();
        assert_eq!(
            err.kind,
            ParseErrorKind::DepArity {
                kind: Exist,
                expected: 1,
                got: 2
            }
        );
    }

    #[test]
    fn duplicate_slot_names_are_rejected() {
        let err = Program::parse("select[cat] -> a0\nselect[dog] -> a0\nfusion(a0, a0) -> a1\nexist(a1) -> b0\nanswer_logic(b0)")
            .unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::DuplicateSlot("a0".to_string()));
    }

    #[test]
    fn empty_program_is_rejected() {
        let err = Program::parse("  \n\n").unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::EmptyProgram);
    }

    #[test]
    fn unclosed_bracket_is_reported() {
        let err = Program::parse("select[cat -> a0\nquery_name(a0)").unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::Unclosed('['));
    }

    #[test]
    fn validate_rejects_boolean_fed_to_attention_consumer() {
        let p = Program::new(vec![
            call(Select, &["cat"], &[]),
            call(Exist, &[], &[0]),
            call(Exist, &[], &[1]),
            call(AnswerLogic, &[], &[2]),
        ]);
        let err = p.validate().unwrap_err();
        assert_eq!(
            err,
            TypeError::DepType {
                step: 2,
                kind: Exist,
                position: 0,
                dep: 1,
                expected: Attention,
                got: Boolean,
            }
        );
    }

    #[test]
    fn validate_rejects_unconsumed_intermediate_output() {
        let p = Program::new(vec![
            call(Select, &["cat"], &[]),
            call(Select, &["dog"], &[]),
            call(QueryName, &[], &[0]),
        ]);
        let err = p.validate().unwrap_err();
        assert_eq!(
            err,
            TypeError::UnconsumedStep {
                step: 1,
                kind: Select
            }
        );
    }

    #[test]
    fn validate_rejects_out_of_order_dependency_from_json() {
        let p = Program::from_json(
            r#"{"steps":[{"module":"exist","deps":[1]},{"module":"select","args":["cat"]},{"module":"answer_logic","deps":[0]}]}"#,
        )
        .unwrap();
        let err = p.validate().unwrap_err();
        assert_eq!(err, TypeError::BadDepIndex { step: 0, dep: 1 });
    }

    #[test]
    fn validate_rejects_answer_in_the_middle() {
        let p = Program::new(vec![
            call(Select, &["cat"], &[]),
            call(QueryName, &[], &[0]),
            call(AnswerLogic, &[], &[1]),
        ]);
        let err = p.validate().unwrap_err();
        assert!(matches!(err, TypeError::AnswerBeforeEnd { step: 1, .. }));
    }

    #[test]
    fn num_objects_counts_every_select() {
        let p = Program::parse(
            "select[cat] -> a0\nselect[dog] -> a1\nselect[ball] -> a2\nselect[tree] -> a3\nsame[color](a0, a1) -> b0\nsame[size](a2, a3) -> b1\nand(b0, b1) -> b2\nanswer_logic(b2)",
        )
        .unwrap();
        assert_eq!(p.num_objects(), 4);
        assert_eq!(p.len(), 8);
        p.validate().unwrap();
    }
}
