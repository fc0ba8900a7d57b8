//! Protection recognition for wrapped tainted arithmetic.
//!
//! The dynamic check is authoritative: an overflow is protected when the
//! transaction throws and the last branch before the throw was decided by a
//! value derived from the overflowing result. Static templates matched
//! against the bytecode around the instruction are reported alongside as
//! supporting evidence only.

use serde::Deserialize;

use crate::detector::{ArithmeticEvent, EventKind, Protection, ProtectionEvidence};
use crate::opcode::{self, disassemble, Instruction, Opcode};

/// Instructions scanned on each side of the susceptible instruction.
pub const TEMPLATE_WINDOW: usize = 40;

/// Fills `protection` on every event of one run.
pub fn classify_all(events: &mut [ArithmeticEvent], evidence: &ProtectionEvidence) {
    for (id, ev) in events.iter_mut().enumerate() {
        ev.protection = classify_dynamic(ev, id as u32, evidence);
    }
}

/// Decides whether a tainted wrap was caught by a guard. `id` is the
/// event's position in the run's event list.
pub fn classify_dynamic(event: &ArithmeticEvent, id: u32, evidence: &ProtectionEvidence) -> Protection {
    if event.kind != EventKind::TaintedWrap {
        return Protection::Unknown;
    }
    if !evidence.halt.is_throw() {
        return Protection::Unprotected;
    }
    match &evidence.last_branch {
        Some(b) if b.step > event.step && b.depends_on.contains(id) => Protection::Protected,
        _ => Protection::Unprotected,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("template file is not valid TOML: {0}")]
    Parse(String),
    #[error("template {id}: {message}")]
    Invalid { id: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Pattern starts after the susceptible instruction.
    After,
    /// Pattern ends before the susceptible instruction.
    Before,
    Either,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Matcher {
    Any,
    Exact(Opcode),
    Prefix(String),
}

impl Matcher {
    fn matches(&self, op: Opcode) -> bool {
        match self {
            Matcher::Any => true,
            Matcher::Exact(o) => *o == op,
            Matcher::Prefix(p) => op.info().map(|i| i.name.starts_with(p.as_str())).unwrap_or(false),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Element {
    alternatives: Vec<Matcher>,
    optional: bool,
}

impl Element {
    fn matches(&self, op: Opcode) -> bool {
        self.alternatives.iter().any(|m| m.matches(op))
    }
}

/// A guard shape: a mnemonic sequence anchored at a susceptible
/// instruction and ending in JUMPI.
///
/// Pattern tokens: `NAME` exact, `NAME*` any mnemonic with that prefix,
/// `*` any instruction, `A|B` alternatives, trailing `?` optional. Stack
/// shuffles (PUSH, DUP, SWAP, POP, JUMPDEST) between elements are skipped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtectionTemplate {
    pub id: String,
    pub description: String,
    pub anchors: Vec<Opcode>,
    pub direction: Direction,
    elements: Vec<Element>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateFile {
    template: Vec<TemplateEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateEntry {
    id: String,
    #[serde(default)]
    description: String,
    anchor: Vec<String>,
    direction: Direction,
    pattern: String,
}

pub const BUILTIN_TEMPLATES: &str = r#"
[[template]]
id = "safemath-mul"
description = "product divided by one factor is compared with the other, then a conditional jump"
anchor = ["MUL"]
direction = "after"
pattern = "DUP* DIV EQ|ISZERO ISZERO? ISZERO? JUMPI"

[[template]]
id = "safemath-add"
description = "sum is compared against an operand, then a conditional jump"
anchor = ["ADD"]
direction = "after"
pattern = "DUP* LT|GT ISZERO? ISZERO? JUMPI"

[[template]]
id = "safemath-sub"
description = "operands are compared before or after the subtraction, then a conditional jump"
anchor = ["SUB"]
direction = "either"
pattern = "LT|GT ISZERO? ISZERO? JUMPI"
"#;

fn parse_pattern(id: &str, pattern: &str) -> Result<Vec<Element>, TemplateError> {
    let invalid = |message: String| TemplateError::Invalid {
        id: id.to_string(),
        message,
    };
    let mut elements = Vec::new();
    for token in pattern.split_whitespace() {
        let (body, optional) = match token.strip_suffix('?') {
            Some(b) => (b, true),
            None => (token, false),
        };
        let mut alternatives = Vec::new();
        for alt in body.split('|') {
            let m = if alt == "*" {
                Matcher::Any
            } else if let Some(prefix) = alt.strip_suffix('*') {
                let prefix = prefix.to_ascii_uppercase();
                if !Opcode::supported().any(|o| o.name().starts_with(&prefix)) {
                    return Err(invalid(format!("no mnemonic starts with {prefix:?}")));
                }
                Matcher::Prefix(prefix)
            } else {
                Matcher::Exact(
                    Opcode::from_name(alt).ok_or_else(|| invalid(format!("unknown mnemonic {alt:?}")))?,
                )
            };
            alternatives.push(m);
        }
        elements.push(Element {
            alternatives,
            optional,
        });
    }
    match elements.last() {
        Some(e) if !e.optional && e.alternatives == [Matcher::Exact(Opcode(opcode::JUMPI))] => {}
        _ => return Err(invalid("pattern must end with JUMPI".into())),
    }
    Ok(elements)
}

/// Parses a template file.
pub fn parse_templates(text: &str) -> Result<Vec<ProtectionTemplate>, TemplateError> {
    let file: TemplateFile = toml::from_str(text).map_err(|e| TemplateError::Parse(e.to_string()))?;
    file.template
        .into_iter()
        .map(|e| {
            let anchors = e
                .anchor
                .iter()
                .map(|a| {
                    Opcode::from_name(a)
                        .filter(|o| o.is_susceptible())
                        .ok_or_else(|| TemplateError::Invalid {
                            id: e.id.clone(),
                            message: format!("anchor {a:?} is not ADD, SUB, MUL or EXP"),
                        })
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(ProtectionTemplate {
                elements: parse_pattern(&e.id, &e.pattern)?,
                id: e.id,
                description: e.description,
                anchors,
                direction: e.direction,
            })
        })
        .collect()
}

pub fn builtin_templates() -> Vec<ProtectionTemplate> {
    parse_templates(BUILTIN_TEMPLATES).expect("built-in templates parse")
}

fn is_filler(op: Opcode) -> bool {
    op.is_push() || op.is_dup() || op.is_swap() || matches!(op.0, opcode::POP | opcode::JUMPDEST)
}

/// Matches `elements` starting at `ins[start]`; returns the index of the
/// final JUMPI.
fn match_from(elements: &[Element], ins: &[Instruction], start: usize, limit: usize) -> Option<usize> {
    fn go(el: &[Element], ins: &[Instruction], i: usize, limit: usize) -> Option<usize> {
        let Some((first, rest)) = el.split_first() else {
            return i.checked_sub(1);
        };
        if first.optional {
            if let Some(end) = go(rest, ins, i, limit) {
                return Some(end);
            }
        }
        let mut j = i;
        while j < limit {
            let op = ins[j].op;
            if first.matches(op) {
                if let Some(end) = go(rest, ins, j + 1, limit) {
                    return Some(end);
                }
            }
            if !is_filler(op) {
                return None;
            }
            j += 1;
        }
        None
    }
    go(elements, ins, start, limit)
}

/// True when the code following a JUMPI reaches REVERT or INVALID on one of
/// its two successors within a short straight-line run.
fn jumpi_guards_abort(ins: &[Instruction], jumpi: usize, code_len: usize) -> bool {
    let aborts_from = |mut i: usize| {
        for _ in 0..16 {
            let Some(instr) = ins.get(i) else {
                return false;
            };
            match instr.op.0 {
                opcode::REVERT | opcode::INVALID => return true,
                opcode::JUMP | opcode::JUMPI | opcode::STOP | opcode::RETURN | opcode::SELFDESTRUCT => {
                    return false
                }
                _ => i += 1,
            }
        }
        false
    };
    if aborts_from(jumpi + 1) {
        return true;
    }
    // Constant target pushed right before the JUMPI.
    if let Some(prev) = jumpi.checked_sub(1).and_then(|p| ins.get(p)) {
        if prev.op.is_push() {
            let target = prev.immediate.iter().fold(0usize, |acc, b| (acc << 8) | *b as usize);
            if target < code_len {
                if let Ok(idx) = ins.binary_search_by_key(&target, |x| x.pc) {
                    return aborts_from(idx);
                }
            }
        }
    }
    false
}

/// Returns the id of the first template matching the susceptible
/// instruction at `pc`.
pub fn match_templates(code: &[u8], pc: usize, templates: &[ProtectionTemplate]) -> Option<String> {
    let ins = disassemble(code);
    let idx = ins.binary_search_by_key(&pc, |i| i.pc).ok()?;
    let op = ins[idx].op;
    for t in templates {
        if !t.anchors.contains(&op) {
            continue;
        }
        let after = || {
            let limit = (idx + 1 + TEMPLATE_WINDOW).min(ins.len());
            match_from(&t.elements, &ins, idx + 1, limit)
        };
        let before = || {
            let lo = idx.saturating_sub(TEMPLATE_WINDOW);
            (lo..idx).find_map(|s| match_from(&t.elements, &ins, s, idx))
        };
        let found = match t.direction {
            Direction::After => after(),
            Direction::Before => before(),
            Direction::Either => before().or_else(after),
        };
        if let Some(j) = found {
            if jumpi_guards_abort(&ins, j, code.len()) {
                return Some(t.id.clone());
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::assemble;
    use crate::detector::BranchRecord;
    use crate::evm::Halt;
    use crate::taint::{EventSet, TaintMark};
    use crate::word::Word;

    fn wrap_event(step: u64) -> ArithmeticEvent {
        ArithmeticEvent {
            step,
            pc: 0,
            op: Opcode(opcode::MUL),
            a: Word::from(2),
            b: Word::one() << 255,
            result: Word::zero(),
            marks: [TaintMark::CALLDATA, TaintMark::CALLDATA],
            wrapped: true,
            kind: EventKind::TaintedWrap,
            protection: Protection::Unknown,
        }
    }

    fn evidence(halt: Halt, branch: Option<(u64, EventSet)>) -> ProtectionEvidence {
        ProtectionEvidence {
            halt,
            last_branch: branch.map(|(step, depends_on)| BranchRecord {
                step,
                pc: 0,
                depends_on,
            }),
        }
    }

    #[test]
    fn dynamic_verdicts() {
        let ev = wrap_event(5);
        let dep = Some((9, EventSet::single(0)));
        assert_eq!(classify_dynamic(&ev, 0, &evidence(Halt::Revert, dep.clone())), Protection::Protected);
        assert_eq!(classify_dynamic(&ev, 0, &evidence(Halt::Invalid, dep.clone())), Protection::Protected);
        assert_eq!(classify_dynamic(&ev, 0, &evidence(Halt::Stop, dep.clone())), Protection::Unprotected);
        // Branch does not depend on this event.
        assert_eq!(classify_dynamic(&ev, 1, &evidence(Halt::Revert, dep)), Protection::Unprotected);
        assert_eq!(
            classify_dynamic(&ev, 0, &evidence(Halt::Revert, Some((9, EventSet::default())))),
            Protection::Unprotected
        );
        // Branch taken before the arithmetic.
        assert_eq!(
            classify_dynamic(&ev, 0, &evidence(Halt::Revert, Some((2, EventSet::single(0))))),
            Protection::Unprotected
        );
        assert_eq!(classify_dynamic(&ev, 0, &evidence(Halt::Revert, None)), Protection::Unprotected);
        assert_eq!(classify_dynamic(&ev, 0, &evidence(Halt::OutOfGas, None)), Protection::Unprotected);
    }

    fn mul_pc(code: &[u8]) -> usize {
        disassemble(code).iter().find(|i| i.op.0 == opcode::MUL).unwrap().pc
    }

    #[test]
    fn safemath_mul_matches() {
        let code = assemble(
            "PUSH1 4 CALLDATALOAD PUSH1 2 DUP2 DUP2 MUL
             DUP2 DUP2 DIV DUP4 EQ PUSH @ok JUMPI INVALID
             ok: JUMPDEST STOP",
        )
        .unwrap();
        assert_eq!(
            match_templates(&code, mul_pc(&code), &builtin_templates()).as_deref(),
            Some("safemath-mul")
        );
    }

    #[test]
    fn bare_mul_has_no_template() {
        let code = assemble("PUSH1 4 CALLDATALOAD PUSH1 2 MUL STOP").unwrap();
        assert_eq!(match_templates(&code, mul_pc(&code), &builtin_templates()), None);
    }

    #[test]
    fn swap_variant_matches_but_masked_variant_does_not() {
        // SWAPs are skipped between elements.
        let swapped = assemble(
            "PUSH1 4 CALLDATALOAD PUSH1 2 DUP2 DUP2 MUL
             SWAP1 DUP2 SWAP1 DUP1 SWAP2 DIV SWAP1 DUP4 EQ PUSH @ok JUMPI INVALID
             ok: JUMPDEST STOP",
        )
        .unwrap();
        assert_eq!(
            match_templates(&swapped, mul_pc(&swapped), &builtin_templates()).as_deref(),
            Some("safemath-mul")
        );
        // A non-shuffle instruction between DIV and EQ breaks the shape.
        let masked = assemble(
            "PUSH1 4 CALLDATALOAD PUSH1 2 DUP2 DUP2 MUL
             DUP2 DUP2 DIV PUSH1 0xff AND DUP4 EQ PUSH @ok JUMPI INVALID
             ok: JUMPDEST STOP",
        )
        .unwrap();
        assert_eq!(match_templates(&masked, mul_pc(&masked), &builtin_templates()), None);
    }

    #[test]
    fn guard_must_reach_an_abort() {
        // Same shape, but both successors continue normally.
        let code = assemble(
            "PUSH1 4 CALLDATALOAD PUSH1 2 DUP2 DUP2 MUL
             DUP2 DUP2 DIV DUP4 EQ PUSH @ok JUMPI STOP
             ok: JUMPDEST STOP",
        )
        .unwrap();
        assert_eq!(match_templates(&code, mul_pc(&code), &builtin_templates()), None);
    }

    #[test]
    fn safemath_sub_before() {
        let code = assemble(
            "PUSH1 4 CALLDATALOAD PUSH1 10 DUP2 DUP2 LT PUSH @bad JUMPI SUB STOP
             bad: JUMPDEST PUSH1 0 DUP1 REVERT",
        )
        .unwrap();
        let pc = disassemble(&code).iter().find(|i| i.op.0 == opcode::SUB).unwrap().pc;
        assert_eq!(
            match_templates(&code, pc, &builtin_templates()).as_deref(),
            Some("safemath-sub")
        );
    }

    #[test]
    fn template_file_errors() {
        assert!(matches!(parse_templates("nope ="), Err(TemplateError::Parse(_))));
        let no_jumpi = r#"[[template]]
id = "x"
anchor = ["ADD"]
direction = "after"
pattern = "DUP* LT"
"#;
        assert!(matches!(parse_templates(no_jumpi), Err(TemplateError::Invalid { .. })));
        let bad_anchor = no_jumpi.replace("ADD", "DIV").replace("DUP* LT", "JUMPI");
        assert!(matches!(parse_templates(&bad_anchor), Err(TemplateError::Invalid { .. })));
        let custom = no_jumpi.replace("DUP* LT", "* JUMPI");
        assert_eq!(parse_templates(&custom).unwrap().len(), 1);
        assert_eq!(builtin_templates().len(), 3);
    }
}
