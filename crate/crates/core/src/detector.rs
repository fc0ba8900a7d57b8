//! Overflow detection on ADD, SUB, MUL and EXP.
//!
//! [`OverflowInspector`] runs the taint shadow, checks every susceptible
//! instruction, and tracks which overflowing results later flow into branch
//! conditions so that protection can be decided after the run.

use serde::{Deserialize, Serialize};

use crate::evm::{Halt, InspectError, Inspector, PostStep, PreStep};
use crate::opcode::{self, Opcode};
use crate::taint::{
    mirror_step, source_marks, stack_taint_flags, EventSet, Mark, ShadowState, TaintMark,
};
use crate::word::{wrap_add, wrap_exp, wrap_mul, wrap_sub, Word};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// Neither operand tainted; recorded only when the result wrapped.
    Untainted,
    TaintedWrap,
    TaintedNoWrap,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Untainted => "untainted",
            EventKind::TaintedWrap => "tainted_wrap",
            EventKind::TaintedNoWrap => "tainted_no_wrap",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protection {
    #[default]
    Unknown,
    Protected,
    Unprotected,
}

impl Protection {
    pub fn as_str(self) -> &'static str {
        match self {
            Protection::Unknown => "unknown",
            Protection::Protected => "protected",
            Protection::Unprotected => "unprotected",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArithmeticEvent {
    /// Index of the instruction in the execution.
    pub step: u64,
    pub pc: usize,
    pub op: Opcode,
    /// Top of stack (for EXP: the base).
    pub a: Word,
    /// Second stack entry (for EXP: the exponent).
    pub b: Word,
    pub result: Word,
    pub marks: [TaintMark; 2],
    pub wrapped: bool,
    pub kind: EventKind,
    pub protection: Protection,
}

impl ArithmeticEvent {
    pub fn tainted(&self) -> [bool; 2] {
        [self.marks[0].is_tainted(), self.marks[1].is_tainted()]
    }
}

/// (result, wrapped) for a susceptible opcode.
pub fn wrap_for(op: Opcode, a: Word, b: Word) -> Option<(Word, bool)> {
    Some(match op.0 {
        opcode::ADD => wrap_add(a, b),
        opcode::SUB => wrap_sub(a, b),
        opcode::MUL => wrap_mul(a, b),
        opcode::EXP => wrap_exp(a, b),
        _ => return None,
    })
}

/// Checks one executed susceptible instruction. Returns nothing when no
/// operand is tainted and nothing wrapped.
pub fn inspect(
    step: u64,
    pc: usize,
    op: Opcode,
    a: Word,
    b: Word,
    result: Word,
    marks: [TaintMark; 2],
) -> Option<ArithmeticEvent> {
    let (expected, wrapped) = wrap_for(op, a, b)?;
    debug_assert_eq!(expected, result, "{op} result disagrees with wrap check");
    let tainted = marks[0].is_tainted() || marks[1].is_tainted();
    let kind = match (tainted, wrapped) {
        (false, false) => return None,
        (false, true) => EventKind::Untainted,
        (true, true) => EventKind::TaintedWrap,
        (true, false) => EventKind::TaintedNoWrap,
    };
    Some(ArithmeticEvent {
        step,
        pc,
        op,
        a,
        b,
        result,
        marks,
        wrapped,
        kind,
        protection: Protection::Unknown,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventSummary {
    pub untainted: usize,
    pub tainted_wrap: usize,
    pub tainted_no_wrap: usize,
    /// Index into the event list of the earliest event of each kind.
    pub first_untainted: Option<usize>,
    pub first_tainted_wrap: Option<usize>,
    pub first_tainted_no_wrap: Option<usize>,
    /// Event indices ordered by (pc, occurrence).
    pub by_pc: Vec<usize>,
}

pub fn summarize(events: &[ArithmeticEvent]) -> EventSummary {
    let mut s = EventSummary::default();
    for (i, e) in events.iter().enumerate() {
        let (count, first) = match e.kind {
            EventKind::Untainted => (&mut s.untainted, &mut s.first_untainted),
            EventKind::TaintedWrap => (&mut s.tainted_wrap, &mut s.first_tainted_wrap),
            EventKind::TaintedNoWrap => (&mut s.tainted_no_wrap, &mut s.first_tainted_no_wrap),
        };
        *count += 1;
        first.get_or_insert(i);
    }
    s.by_pc = (0..events.len()).collect();
    s.by_pc.sort_by_key(|&i| (events[i].pc, i));
    s
}

/// The last conditional branch executed, with the events its condition
/// depends on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchRecord {
    pub step: u64,
    pub pc: usize,
    pub depends_on: EventSet,
}

/// What protection classification needs from a finished run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtectionEvidence {
    pub halt: Halt,
    pub last_branch: Option<BranchRecord>,
}

/// Taint shadow plus overflow detection plus result-to-condition
/// dependence tracking.
#[derive(Debug, Default)]
pub struct OverflowInspector {
    pub taint: ShadowState<TaintMark>,
    pub events: Vec<ArithmeticEvent>,
    /// Only allocated once the first tainted wrap is seen; before that every
    /// dependence mark is empty.
    dependence: Option<ShadowState<EventSet>>,
    pending: Option<[TaintMark; 2]>,
    pending_branch: Option<(u64, usize, EventSet)>,
    last_branch: Option<BranchRecord>,
    halt: Option<Halt>,
    /// Number of susceptible instructions checked.
    pub inspected: u64,
}

impl OverflowInspector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn evidence(&self) -> Option<ProtectionEvidence> {
        self.halt.map(|halt| ProtectionEvidence {
            halt,
            last_branch: self.last_branch.clone(),
        })
    }

    pub fn into_parts(self) -> (Vec<ArithmeticEvent>, Option<ProtectionEvidence>, ShadowState<TaintMark>) {
        let evidence = self.evidence();
        (self.events, evidence, self.taint)
    }
}

impl Inspector for OverflowInspector {
    fn before_step(&mut self, pre: &PreStep<'_>) -> Result<(), InspectError> {
        if pre.op.is_susceptible() {
            let a = self.taint.peek(0).copied().unwrap_or_default();
            let b = self.taint.peek(1).copied().unwrap_or_default();
            self.pending = Some([a, b]);
        } else if pre.op.0 == opcode::JUMPI {
            let cond = self
                .dependence
                .as_ref()
                .and_then(|d| d.peek(1).cloned())
                .unwrap_or_default();
            self.pending_branch = Some((pre.step, pre.pc, cond));
        }
        Ok(())
    }

    fn after_step(&mut self, post: &PostStep<'_>) -> Result<(), InspectError> {
        let mut new_wrap = None;
        if post.op.is_susceptible() {
            self.inspected += 1;
            let marks = self.pending.take().unwrap_or_default();
            if let Some(ev) = inspect(
                post.step,
                post.pc,
                post.op,
                post.inputs[0],
                post.inputs[1],
                post.outputs[0],
                marks,
            ) {
                if ev.kind == EventKind::TaintedWrap {
                    new_wrap = Some(self.events.len() as u32);
                }
                self.events.push(ev);
            }
        } else if post.op.0 == opcode::JUMPI {
            if let Some((step, pc, depends_on)) = self.pending_branch.take() {
                self.last_branch = Some(BranchRecord {
                    step,
                    pc,
                    depends_on,
                });
            }
        }

        mirror_step(&mut self.taint, post, source_marks(post.op))?;

        match (&mut self.dependence, new_wrap) {
            (Some(dep), _) => mirror_step(dep, post, EventSet::default())?,
            (None, Some(_)) => {
                self.dependence = Some(ShadowState::clean(post.stack_len, post.memory_len));
            }
            (None, None) => {}
        }
        if let (Some(dep), Some(id)) = (&mut self.dependence, new_wrap) {
            let top = dep.top_mut().expect("arithmetic pushed a result");
            *top = top.merge(&EventSet::single(id));
        }
        Ok(())
    }

    fn on_halt(&mut self, halt: Halt, _step: u64) {
        self.halt = Some(halt);
    }

    fn stack_taint(&self, n: usize) -> Vec<bool> {
        stack_taint_flags(&self.taint, n)
    }
}
