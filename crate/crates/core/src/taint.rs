//! Shadow taint state that mirrors the machine stack, memory and storage.
//!
//! Taint enters through CALLDATALOAD, CALLDATACOPY and CALLVALUE and follows
//! explicit data flow only; branching on a tainted condition does not taint
//! anything.

use std::collections::HashMap;
use std::fmt;

use smallvec::SmallVec;

use crate::evm::{InspectError, Inspector, PostStep, TRACE_STACK_DEPTH};
use crate::opcode::{self, Opcode, Support};
use crate::word::{word_to_usize, Word};

/// Lattice element carried by every shadow slot.
pub trait Mark: Clone + Default + PartialEq + fmt::Debug {
    fn merge(&self, other: &Self) -> Self;
    fn is_clean(&self) -> bool;
}

/// Where a tainted value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Source {
    Calldata,
    MessageValue,
}

/// Set of taint origins. Empty means untainted.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct TaintMark(u8);

impl TaintMark {
    pub const CLEAN: TaintMark = TaintMark(0);
    pub const CALLDATA: TaintMark = TaintMark(1);
    pub const MESSAGE_VALUE: TaintMark = TaintMark(2);

    pub fn from_source(s: Source) -> Self {
        match s {
            Source::Calldata => Self::CALLDATA,
            Source::MessageValue => Self::MESSAGE_VALUE,
        }
    }

    pub fn is_tainted(self) -> bool {
        self.0 != 0
    }

    pub fn contains(self, s: Source) -> bool {
        self.0 & Self::from_source(s).0 != 0
    }

    pub fn origins(self) -> Vec<Source> {
        [Source::Calldata, Source::MessageValue]
            .into_iter()
            .filter(|s| self.contains(*s))
            .collect()
    }

    pub fn union(self, other: TaintMark) -> TaintMark {
        TaintMark(self.0 | other.0)
    }
}

impl fmt::Debug for TaintMark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_tainted() {
            write!(f, "tainted{:?}", self.origins())
        } else {
            f.write_str("clean")
        }
    }
}

impl Mark for TaintMark {
    fn merge(&self, other: &Self) -> Self {
        self.union(*other)
    }

    fn is_clean(&self) -> bool {
        !self.is_tainted()
    }
}

/// Sorted set of arithmetic event ids, used to track which overflowing
/// results a value depends on.
#[derive(Clone, Default, PartialEq, Eq, Debug)]
pub struct EventSet(SmallVec<[u32; 2]>);

impl EventSet {
    pub fn single(id: u32) -> Self {
        EventSet(smallvec::smallvec![id])
    }

    pub fn contains(&self, id: u32) -> bool {
        self.0.binary_search(&id).is_ok()
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }
}

impl Mark for EventSet {
    fn merge(&self, other: &Self) -> Self {
        if other.0.is_empty() {
            return self.clone();
        }
        if self.0.is_empty() {
            return other.clone();
        }
        let mut out: SmallVec<[u32; 2]> = self.0.iter().chain(other.0.iter()).copied().collect();
        out.sort_unstable();
        out.dedup();
        EventSet(out)
    }

    fn is_clean(&self) -> bool {
        self.0.is_empty()
    }
}

/// Taint introduced by an instruction, if it reads external input.
pub fn source_marks(op: Opcode) -> TaintMark {
    match op.0 {
        opcode::CALLDATALOAD | opcode::CALLDATACOPY => TaintMark::CALLDATA,
        opcode::CALLVALUE => TaintMark::MESSAGE_VALUE,
        _ => TaintMark::CLEAN,
    }
}

/// Stack data-flow rule: the output of a value-producing instruction is the
/// merge of its input marks. Returns `None` for instructions that push
/// nothing. Memory and storage reads are resolved by [`mirror_step`].
pub fn propagate<M: Mark>(op: Opcode, input_marks: &[M]) -> Result<Option<M>, InspectError> {
    let info = op.info().ok_or(InspectError::ArityMismatch {
        op,
        expected: 0,
        got: input_marks.len(),
    })?;
    if input_marks.len() != info.inputs as usize {
        return Err(InspectError::ArityMismatch {
            op,
            expected: info.inputs as usize,
            got: input_marks.len(),
        });
    }
    if info.outputs == 0 {
        return Ok(None);
    }
    Ok(Some(
        input_marks
            .iter()
            .fold(M::default(), |acc, m| acc.merge(m)),
    ))
}

/// Shadow stack, byte-granular shadow memory and shadow storage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ShadowState<M> {
    /// Bottom first, same depth as the machine stack.
    pub stack: Vec<M>,
    pub memory: Vec<M>,
    pub storage: HashMap<Word, M>,
}

impl<M: Mark> ShadowState<M> {
    pub fn new() -> Self {
        Self {
            stack: Vec::new(),
            memory: Vec::new(),
            storage: HashMap::new(),
        }
    }

    /// A clean shadow matching a machine with the given stack depth and
    /// memory size.
    pub fn clean(stack_len: usize, memory_len: usize) -> Self {
        Self {
            stack: vec![M::default(); stack_len],
            memory: vec![M::default(); memory_len],
            storage: HashMap::new(),
        }
    }

    /// Mark `depth` entries below the top (0 = top).
    pub fn peek(&self, depth: usize) -> Option<&M> {
        self.stack.len().checked_sub(depth + 1).map(|i| &self.stack[i])
    }

    pub fn top_mut(&mut self) -> Option<&mut M> {
        self.stack.last_mut()
    }

    pub fn is_clean(&self) -> bool {
        self.stack.iter().all(Mark::is_clean)
            && self.memory.iter().all(Mark::is_clean)
            && self.storage.values().all(Mark::is_clean)
    }

    fn region_merge(&self, offset: &Word, len: &Word) -> M {
        match (word_to_usize(offset), word_to_usize(len)) {
            (Some(off), Some(len)) if len > 0 => self.memory[off..off + len]
                .iter()
                .fold(M::default(), |acc, m| acc.merge(m)),
            _ => M::default(),
        }
    }

    fn region_fill(&mut self, offset: &Word, len: usize, mark: &M) {
        if len == 0 {
            return;
        }
        let off = word_to_usize(offset).expect("machine accepted offset");
        for slot in &mut self.memory[off..off + len] {
            *slot = mark.clone();
        }
    }
}

/// Applies one completed instruction to the shadow state. `source` is the
/// mark introduced by the instruction itself (see [`source_marks`]).
pub fn mirror_step<M: Mark>(
    shadow: &mut ShadowState<M>,
    post: &PostStep<'_>,
    source: M,
) -> Result<(), InspectError> {
    let op = post.op;
    let info = op.info().expect("only supported opcodes complete");
    let desync = |shadow: usize| InspectError::ShadowDesync {
        pc: post.pc,
        machine: post.stack_len,
        shadow,
    };
    if shadow.memory.len() < post.memory_len {
        shadow.memory.resize(post.memory_len, M::default());
    }

    if op.is_dup() {
        let n = info.inputs as usize;
        let m = shadow
            .peek(n - 1)
            .cloned()
            .ok_or_else(|| desync(shadow.stack.len()))?;
        shadow.stack.push(m);
    } else if op.is_swap() {
        let len = shadow.stack.len();
        let n = info.inputs as usize;
        if len < n {
            return Err(desync(len));
        }
        shadow.stack.swap(len - 1, len - n);
    } else {
        let arity = info.inputs as usize;
        if shadow.stack.len() < arity {
            return Err(desync(shadow.stack.len()));
        }
        let split = shadow.stack.len() - arity;
        let marks: SmallVec<[M; 8]> = shadow.stack.drain(split..).rev().collect();
        let a = post.inputs;

        let pushed = match op.0 {
            opcode::MLOAD => Some(shadow.region_merge(&a[0], &Word::from(32))),
            opcode::SLOAD => Some(shadow.storage.get(&a[0]).cloned().unwrap_or_default()),
            opcode::KECCAK256 => Some(shadow.region_merge(&a[0], &a[1])),
            opcode::CALLDATALOAD | opcode::CALLVALUE => {
                propagate(op, &marks)?.map(|m| m.merge(&source))
            }
            _ if info.support == Support::Stubbed => Some(M::default()),
            _ => propagate(op, &marks)?,
        };

        match op.0 {
            opcode::MSTORE => shadow.region_fill(&a[0], 32, &marks[1]),
            opcode::MSTORE8 => shadow.region_fill(&a[0], 1, &marks[1]),
            opcode::SSTORE => {
                if marks[1].is_clean() {
                    shadow.storage.remove(&a[0]);
                } else {
                    shadow.storage.insert(a[0], marks[1].clone());
                }
            }
            opcode::CALLDATACOPY => {
                let len = word_to_usize(&a[2]).unwrap_or(0);
                shadow.region_fill(&a[0], len, &source);
            }
            opcode::CODECOPY | opcode::RETURNDATACOPY => {
                let len = word_to_usize(&a[2]).unwrap_or(0);
                shadow.region_fill(&a[0], len, &M::default());
            }
            opcode::SELFDESTRUCT => shadow.storage.clear(),
            _ => {}
        }
        if let Some(m) = pushed {
            shadow.stack.push(m);
        }
    }

    if shadow.stack.len() != post.stack_len || shadow.memory.len() != post.memory_len {
        return Err(desync(shadow.stack.len()));
    }
    Ok(())
}

/// Inspector that maintains a taint shadow.
#[derive(Debug, Default)]
pub struct TaintTracker {
    pub shadow: ShadowState<TaintMark>,
}

impl TaintTracker {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Inspector for TaintTracker {
    fn after_step(&mut self, post: &PostStep<'_>) -> Result<(), InspectError> {
        mirror_step(&mut self.shadow, post, source_marks(post.op))
    }

    fn stack_taint(&self, n: usize) -> Vec<bool> {
        stack_taint_flags(&self.shadow, n)
    }
}

pub(crate) fn stack_taint_flags(shadow: &ShadowState<TaintMark>, n: usize) -> Vec<bool> {
    (0..n.min(TRACE_STACK_DEPTH))
        .map(|d| shadow.peek(d).map(|m| m.is_tainted()).unwrap_or(false))
        .collect()
}
