//! Deterministic interpreter for the supported EVM subset.
//!
//! Gas is simplified: one unit per executed instruction plus one unit per
//! 32-byte word of memory expansion. Message calls and contract creation
//! are stubs that push 1 and return no data.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use primitive_types::U512;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::keccak::keccak256;
use crate::opcode::{self, Opcode};
use crate::state::{StateDelta, StateError, StateReader};
use crate::word::{is_negative, negate, word_to_bytes, word_to_usize, Address, Word};

pub const STACK_LIMIT: usize = 1024;
pub const DEFAULT_GAS_LIMIT: u64 = 10_000_000;
/// Number of stack entries captured per trace step.
pub const TRACE_STACK_DEPTH: usize = 8;
/// Memory beyond this size is treated as running out of gas.
pub const MEMORY_LIMIT: usize = 32 << 20;

/// Sender used when none is given.
pub const DEFAULT_SENDER: Address = Address([0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0x0a, 0x11, 0xce]);
/// Address the analyzed code runs at when none is given.
pub const DEFAULT_CALLEE: Address = Address([0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0xc0, 0xde]);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transaction {
    pub sender: Address,
    pub callee: Address,
    pub calldata: Vec<u8>,
    pub value: Word,
    pub gas_limit: u64,
}

impl Transaction {
    pub fn new(sender: Address, callee: Address, calldata: Vec<u8>, value: Word) -> Self {
        Self {
            sender,
            callee,
            calldata,
            value,
            gas_limit: DEFAULT_GAS_LIMIT,
        }
    }
}

/// Block context constants returned by TIMESTAMP, NUMBER and friends.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Env {
    pub timestamp: Word,
    pub number: Word,
    pub coinbase: Address,
    pub difficulty: Word,
    pub block_gas_limit: Word,
    pub chain_id: Word,
    pub gas_price: Word,
}

impl Default for Env {
    fn default() -> Self {
        Self {
            timestamp: Word::from(1_700_000_000u64),
            number: Word::from(18_000_000u64),
            coinbase: Address::ZERO,
            difficulty: Word::zero(),
            block_gas_limit: Word::from(30_000_000u64),
            chain_id: Word::one(),
            gas_price: Word::one(),
        }
    }
}

/// Why execution stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Halt {
    Stop,
    Return,
    Revert,
    /// The designated INVALID instruction (0xfe).
    Invalid,
    SelfDestruct,
    InvalidOpcode,
    StackUnderflow,
    StackOverflow,
    InvalidJump,
    ReturnDataOutOfBounds,
    OutOfGas,
}

impl Halt {
    /// Halts that commit state.
    pub fn is_success(self) -> bool {
        matches!(self, Halt::Stop | Halt::Return | Halt::SelfDestruct)
    }

    /// Halts raised by the machine rather than by a halting instruction.
    pub fn is_exceptional(self) -> bool {
        !matches!(
            self,
            Halt::Stop | Halt::Return | Halt::Revert | Halt::Invalid | Halt::SelfDestruct
        )
    }

    /// REVERT or INVALID: the two ways a guard throws.
    pub fn is_throw(self) -> bool {
        matches!(self, Halt::Revert | Halt::Invalid)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Halt::Stop => "stop",
            Halt::Return => "return",
            Halt::Revert => "revert",
            Halt::Invalid => "invalid",
            Halt::SelfDestruct => "selfdestruct",
            Halt::InvalidOpcode => "invalid_opcode",
            Halt::StackUnderflow => "stack_underflow",
            Halt::StackOverflow => "stack_overflow",
            Halt::InvalidJump => "invalid_jump",
            Halt::ReturnDataOutOfBounds => "return_data_out_of_bounds",
            Halt::OutOfGas => "out_of_gas",
        }
    }

    pub fn parse(s: &str) -> Option<Halt> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).ok()
    }
}

impl fmt::Display for Halt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One executed instruction as seen before it ran.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepRecord {
    pub pc: usize,
    pub op: Opcode,
    pub gas: u64,
    /// Up to [`TRACE_STACK_DEPTH`] entries, top of stack first.
    pub stack: Vec<Word>,
    /// Aligned with `stack`.
    pub taint: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogRecord {
    pub pc: usize,
    pub topics: Vec<Word>,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionOutcome {
    pub halt: Halt,
    pub return_data: Vec<u8>,
    /// Empty unless the halt is a success.
    pub delta: StateDelta,
    pub steps: u64,
    pub gas_used: u64,
    pub trace: Vec<StepRecord>,
    pub logs: Vec<LogRecord>,
    /// (pc, opcode) of every stubbed call or create.
    pub stub_calls: Vec<(usize, Opcode)>,
}

/// Failures raised by an inspector. These abort the analysis rather than
/// halting the machine.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum InspectError {
    #[error("shadow state out of sync at pc {pc}: machine stack {machine}, shadow stack {shadow}")]
    ShadowDesync {
        pc: usize,
        machine: usize,
        shadow: usize,
    },
    #[error("arity mismatch for {op}: expected {expected} marks, got {got}")]
    ArityMismatch {
        op: Opcode,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error(transparent)]
    Inspector(#[from] InspectError),
    #[error("state access failed: {0}")]
    State(#[from] StateError),
    #[error("machine already halted")]
    Halted,
}

/// Machine view handed to [`Inspector::before_step`].
#[derive(Debug)]
pub struct PreStep<'a> {
    pub step: u64,
    pub pc: usize,
    pub op: Opcode,
    /// Bottom first.
    pub stack: &'a [Word],
    pub memory_len: usize,
}

/// Machine view handed to [`Inspector::after_step`] once an instruction
/// completed without an exceptional halt.
#[derive(Debug)]
pub struct PostStep<'a> {
    pub step: u64,
    pub pc: usize,
    pub op: Opcode,
    /// Popped operands, top of stack first. Empty for DUP and SWAP, which
    /// rearrange the stack in place.
    pub inputs: &'a [Word],
    /// Pushed values in push order.
    pub outputs: &'a [Word],
    pub stack_len: usize,
    pub memory_len: usize,
    /// Length of the transaction calldata.
    pub calldata_len: usize,
}

/// Instrumentation callbacks.
pub trait Inspector {
    fn before_step(&mut self, _pre: &PreStep<'_>) -> Result<(), InspectError> {
        Ok(())
    }

    fn after_step(&mut self, _post: &PostStep<'_>) -> Result<(), InspectError> {
        Ok(())
    }

    fn on_halt(&mut self, _halt: Halt, _step: u64) {}

    /// Taint flags for the top `n` stack entries, top first. Used to fill
    /// trace records.
    fn stack_taint(&self, n: usize) -> Vec<bool> {
        vec![false; n]
    }
}

/// Inspector that does nothing.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoopInspector;

impl Inspector for NoopInspector {}

impl<A: Inspector, B: Inspector> Inspector for (A, B) {
    fn before_step(&mut self, pre: &PreStep<'_>) -> Result<(), InspectError> {
        self.0.before_step(pre)?;
        self.1.before_step(pre)
    }

    fn after_step(&mut self, post: &PostStep<'_>) -> Result<(), InspectError> {
        self.0.after_step(post)?;
        self.1.after_step(post)
    }

    fn on_halt(&mut self, halt: Halt, step: u64) {
        self.0.on_halt(halt, step);
        self.1.on_halt(halt, step);
    }

    fn stack_taint(&self, n: usize) -> Vec<bool> {
        self.0.stack_taint(n)
    }
}

/// Pending writes of one execution, layered over a read-only base state.
#[derive(Debug, Default)]
struct Overlay {
    storage: BTreeMap<(Address, Word), Word>,
    balances: BTreeMap<Address, Word>,
    destroyed: BTreeSet<Address>,
}

/// Positions of JUMPDEST instructions outside PUSH data.
fn jumpdest_map(code: &[u8]) -> Vec<bool> {
    let mut map = vec![false; code.len()];
    let mut pc = 0;
    while pc < code.len() {
        let op = Opcode(code[pc]);
        if op.0 == opcode::JUMPDEST {
            map[pc] = true;
        }
        pc += 1 + op.immediate_len();
    }
    map
}

/// Interpreter state for one transaction.
pub struct Machine<'a> {
    code: &'a [u8],
    jumpdests: Vec<bool>,
    tx: &'a Transaction,
    env: &'a Env,
    base: &'a dyn StateReader,
    overlay: Overlay,
    pub pc: usize,
    pub stack: Vec<Word>,
    pub memory: Vec<u8>,
    pub gas_remaining: u64,
    pub halted: Option<Halt>,
    steps: u64,
    return_data: Vec<u8>,
    record_trace: bool,
    trace: Vec<StepRecord>,
    logs: Vec<LogRecord>,
    stub_calls: Vec<(usize, Opcode)>,
}

type Operands = SmallVec<[Word; 8]>;

enum Flow {
    Next,
    Jump(usize),
    Halt(Halt),
}

impl<'a> Machine<'a> {
    pub fn new(
        code: &'a [u8],
        tx: &'a Transaction,
        state: &'a dyn StateReader,
        env: &'a Env,
    ) -> Self {
        Self {
            code,
            jumpdests: jumpdest_map(code),
            tx,
            env,
            base: state,
            overlay: Overlay::default(),
            pc: 0,
            stack: Vec::with_capacity(64),
            memory: Vec::new(),
            gas_remaining: tx.gas_limit,
            halted: None,
            steps: 0,
            return_data: Vec::new(),
            record_trace: false,
            trace: Vec::new(),
            logs: Vec::new(),
            stub_calls: Vec::new(),
        }
    }

    pub fn with_trace(mut self, record: bool) -> Self {
        self.record_trace = record;
        self
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Runs to a halt.
    pub fn run<I: Inspector>(mut self, inspector: &mut I) -> Result<ExecutionOutcome, ExecError> {
        while self.halted.is_none() {
            self.step(inspector)?;
        }
        Ok(self.finish())
    }

    fn finish(self) -> ExecutionOutcome {
        let halt = self.halted.expect("finish after halt");
        let delta = if halt.is_success() {
            StateDelta {
                storage: self.overlay.storage,
                balances: self.overlay.balances,
                destroyed: self.overlay.destroyed,
            }
        } else {
            StateDelta::default()
        };
        let return_data = if matches!(halt, Halt::Return | Halt::Revert) {
            self.return_data
        } else {
            Vec::new()
        };
        ExecutionOutcome {
            halt,
            return_data,
            delta,
            steps: self.steps,
            gas_used: self.tx.gas_limit - self.gas_remaining,
            trace: self.trace,
            logs: self.logs,
            stub_calls: self.stub_calls,
        }
    }

    fn halt<I: Inspector>(&mut self, halt: Halt, inspector: &mut I) {
        self.halted = Some(halt);
        inspector.on_halt(halt, self.steps);
    }

    /// Executes one instruction. Returns the record for the instruction
    /// (also appended to the trace when tracing is on), or `None` when the
    /// machine ran out of gas before it could start.
    pub fn step<I: Inspector>(&mut self, inspector: &mut I) -> Result<Option<StepRecord>, ExecError> {
        if self.halted.is_some() {
            return Err(ExecError::Halted);
        }
        if self.pc >= self.code.len() {
            self.halt(Halt::Stop, inspector);
            return Ok(None);
        }
        if self.gas_remaining == 0 {
            self.halt(Halt::OutOfGas, inspector);
            return Ok(None);
        }
        let pc = self.pc;
        let op = Opcode(self.code[pc]);
        let record = if self.record_trace {
            let depth = self.stack.len().min(TRACE_STACK_DEPTH);
            let rec = StepRecord {
                pc,
                op,
                gas: self.gas_remaining,
                stack: self.stack.iter().rev().take(depth).copied().collect(),
                taint: inspector.stack_taint(depth),
            };
            self.trace.push(rec.clone());
            Some(rec)
        } else {
            None
        };
        let step = self.steps;
        inspector.before_step(&PreStep {
            step,
            pc,
            op,
            stack: &self.stack,
            memory_len: self.memory.len(),
        })?;
        self.gas_remaining -= 1;
        self.steps += 1;

        let Some(info) = op.info() else {
            self.halt(Halt::InvalidOpcode, inspector);
            return Ok(record);
        };
        let inputs = info.inputs as usize;
        let outputs = info.outputs as usize;
        if self.stack.len() < inputs {
            self.halt(Halt::StackUnderflow, inspector);
            return Ok(record);
        }
        if self.stack.len() - inputs + outputs > STACK_LIMIT {
            self.halt(Halt::StackOverflow, inspector);
            return Ok(record);
        }

        let mut popped = Operands::new();
        let mut pushed = Operands::new();
        let flow = if op.is_dup() {
            let n = inputs;
            let v = self.stack[self.stack.len() - n];
            pushed.push(v);
            Flow::Next
        } else if op.is_swap() {
            let len = self.stack.len();
            self.stack.swap(len - 1, len - inputs);
            Flow::Next
        } else {
            let new_len = self.stack.len() - inputs;
            popped.extend(self.stack.drain(new_len..).rev());
            self.exec(op, &popped, &mut pushed)?
        };
        self.stack.extend_from_slice(&pushed);

        match flow {
            Flow::Next => self.pc = pc + 1 + op.immediate_len(),
            Flow::Jump(dest) => self.pc = dest,
            Flow::Halt(h) if h.is_exceptional() => {
                self.halt(h, inspector);
                return Ok(record);
            }
            Flow::Halt(_) => {}
        }
        inspector.after_step(&PostStep {
            step,
            pc,
            op,
            inputs: &popped,
            outputs: &pushed,
            stack_len: self.stack.len(),
            memory_len: self.memory.len(),
            calldata_len: self.tx.calldata.len(),
        })?;
        if let Flow::Halt(h) = flow {
            self.halt(h, inspector);
        }
        Ok(record)
    }

    /// Charges gas and grows memory to cover `[offset, offset + len)`.
    /// Returns the offset as usize, or None when the machine must halt.
    fn touch_memory(&mut self, offset: &Word, len: usize) -> Option<usize> {
        if len == 0 {
            return Some(0);
        }
        let off = word_to_usize(offset)?;
        let end = off.checked_add(len)?;
        if end > MEMORY_LIMIT {
            return None;
        }
        let new_size = end.div_ceil(32) * 32;
        if new_size > self.memory.len() {
            let words = ((new_size - self.memory.len()) / 32) as u64;
            if words > self.gas_remaining {
                self.gas_remaining = 0;
                return None;
            }
            self.gas_remaining -= words;
            self.memory.resize(new_size, 0);
        }
        Some(off)
    }

    fn storage_read(&self, key: &Word) -> Result<Word, StateError> {
        let addr = self.tx.callee;
        if self.overlay.destroyed.contains(&addr) {
            return Ok(Word::zero());
        }
        if let Some(v) = self.overlay.storage.get(&(addr, *key)) {
            return Ok(*v);
        }
        self.base.storage(&addr, key)
    }

    fn balance_read(&self, addr: &Address) -> Result<Word, StateError> {
        if self.overlay.destroyed.contains(addr) {
            return Ok(Word::zero());
        }
        if let Some(v) = self.overlay.balances.get(addr) {
            return Ok(*v);
        }
        self.base.balance(addr)
    }

    fn copy_to_memory(&mut self, src: &[u8], dest: &Word, offset: &Word, len: &Word) -> Flow {
        let Some(len) = word_to_usize(len) else {
            return Flow::Halt(Halt::OutOfGas);
        };
        let Some(d) = self.touch_memory(dest, len) else {
            return Flow::Halt(Halt::OutOfGas);
        };
        let start = word_to_usize(offset).unwrap_or(usize::MAX);
        for i in 0..len {
            self.memory[d + i] = start
                .checked_add(i)
                .and_then(|j| src.get(j))
                .copied()
                .unwrap_or(0);
        }
        Flow::Next
    }

    fn read_memory(&mut self, offset: &Word, len: &Word) -> Option<Vec<u8>> {
        let len = word_to_usize(len)?;
        let off = self.touch_memory(offset, len)?;
        Some(if len == 0 {
            Vec::new()
        } else {
            self.memory[off..off + len].to_vec()
        })
    }

    fn exec(&mut self, op: Opcode, a: &[Word], out: &mut Operands) -> Result<Flow, ExecError> {
        use opcode::*;
        let bool_word = |b: bool| if b { Word::one() } else { Word::zero() };
        match op.0 {
            STOP => return Ok(Flow::Halt(Halt::Stop)),
            ADD => out.push(a[0].overflowing_add(a[1]).0),
            MUL => out.push(a[0].overflowing_mul(a[1]).0),
            SUB => out.push(a[0].overflowing_sub(a[1]).0),
            DIV => out.push(if a[1].is_zero() { Word::zero() } else { a[0] / a[1] }),
            SDIV => out.push(sdiv(a[0], a[1])),
            MOD => out.push(if a[1].is_zero() { Word::zero() } else { a[0] % a[1] }),
            SMOD => out.push(smod(a[0], a[1])),
            ADDMOD => out.push(if a[2].is_zero() {
                Word::zero()
            } else {
                let s = U512::from(a[0]) + U512::from(a[1]);
                Word::try_from(s % U512::from(a[2])).expect("reduced below modulus")
            }),
            MULMOD => out.push(if a[2].is_zero() {
                Word::zero()
            } else {
                let p = a[0].full_mul(a[1]);
                Word::try_from(p % U512::from(a[2])).expect("reduced below modulus")
            }),
            EXP => out.push(crate::word::wrap_exp(a[0], a[1]).0),
            SIGNEXTEND => out.push(signextend(a[0], a[1])),
            LT => out.push(bool_word(a[0] < a[1])),
            GT => out.push(bool_word(a[0] > a[1])),
            SLT => out.push(bool_word(signed_lt(&a[0], &a[1]))),
            SGT => out.push(bool_word(signed_lt(&a[1], &a[0]))),
            EQ => out.push(bool_word(a[0] == a[1])),
            ISZERO => out.push(bool_word(a[0].is_zero())),
            AND => out.push(a[0] & a[1]),
            OR => out.push(a[0] | a[1]),
            XOR => out.push(a[0] ^ a[1]),
            NOT => out.push(!a[0]),
            BYTE => out.push(match word_to_usize(&a[0]) {
                Some(i) if i < 32 => Word::from(word_to_bytes(&a[1])[i]),
                _ => Word::zero(),
            }),
            SHL => out.push(match word_to_usize(&a[0]) {
                Some(s) if s < 256 => a[1] << s,
                _ => Word::zero(),
            }),
            SHR => out.push(match word_to_usize(&a[0]) {
                Some(s) if s < 256 => a[1] >> s,
                _ => Word::zero(),
            }),
            SAR => out.push(sar(a[0], a[1])),
            KECCAK256 => match self.read_memory(&a[0], &a[1]) {
                Some(data) => out.push(keccak256(&data)),
                None => return Ok(Flow::Halt(Halt::OutOfGas)),
            },
            ADDRESS => out.push(self.tx.callee.to_word()),
            BALANCE => out.push(self.balance_read(&Address::from_word(&a[0]))?),
            ORIGIN | CALLER => out.push(self.tx.sender.to_word()),
            CALLVALUE => out.push(self.tx.value),
            CALLDATALOAD => {
                let mut buf = [0u8; 32];
                if let Some(off) = word_to_usize(&a[0]) {
                    for (i, b) in buf.iter_mut().enumerate() {
                        if let Some(v) = off.checked_add(i).and_then(|j| self.tx.calldata.get(j)) {
                            *b = *v;
                        }
                    }
                }
                out.push(Word::from_big_endian(&buf));
            }
            CALLDATASIZE => out.push(Word::from(self.tx.calldata.len())),
            CALLDATACOPY => {
                let tx = self.tx;
                return Ok(self.copy_to_memory(&tx.calldata, &a[0], &a[1], &a[2]));
            }
            CODESIZE => out.push(Word::from(self.code.len())),
            CODECOPY => {
                let code = self.code;
                return Ok(self.copy_to_memory(code, &a[0], &a[1], &a[2]));
            }
            GASPRICE => out.push(self.env.gas_price),
            RETURNDATASIZE => out.push(Word::zero()),
            RETURNDATACOPY => {
                // Stubbed calls never produce return data.
                let end = a[1].overflowing_add(a[2]);
                if end.1 || !end.0.is_zero() {
                    return Ok(Flow::Halt(Halt::ReturnDataOutOfBounds));
                }
            }
            COINBASE => out.push(self.env.coinbase.to_word()),
            TIMESTAMP => out.push(self.env.timestamp),
            NUMBER => out.push(self.env.number),
            DIFFICULTY => out.push(self.env.difficulty),
            GASLIMIT => out.push(self.env.block_gas_limit),
            CHAINID => out.push(self.env.chain_id),
            POP => {}
            MLOAD => match self.read_memory(&a[0], &Word::from(32)) {
                Some(bytes) => out.push(Word::from_big_endian(&bytes)),
                None => return Ok(Flow::Halt(Halt::OutOfGas)),
            },
            MSTORE => match self.touch_memory(&a[0], 32) {
                Some(off) => self.memory[off..off + 32].copy_from_slice(&word_to_bytes(&a[1])),
                None => return Ok(Flow::Halt(Halt::OutOfGas)),
            },
            MSTORE8 => match self.touch_memory(&a[0], 1) {
                Some(off) => self.memory[off] = a[1].byte(0),
                None => return Ok(Flow::Halt(Halt::OutOfGas)),
            },
            SLOAD => out.push(self.storage_read(&a[0])?),
            SSTORE => {
                self.overlay.storage.insert((self.tx.callee, a[0]), a[1]);
            }
            JUMP => return Ok(self.jump(&a[0])),
            JUMPI => {
                if !a[1].is_zero() {
                    return Ok(self.jump(&a[0]));
                }
            }
            PC => out.push(Word::from(self.pc)),
            MSIZE => out.push(Word::from(self.memory.len())),
            GAS => out.push(Word::from(self.gas_remaining)),
            JUMPDEST => {}
            PUSH1..=PUSH32 => {
                let n = op.immediate_len();
                let mut buf = [0u8; 32];
                let start = (self.pc + 1).min(self.code.len());
                let end = (self.pc + 1 + n).min(self.code.len());
                buf[32 - n..32 - n + (end - start)].copy_from_slice(&self.code[start..end]);
                out.push(Word::from_big_endian(&buf));
            }
            LOG0..=LOG4 => match self.read_memory(&a[0], &a[1]) {
                Some(data) => self.logs.push(LogRecord {
                    pc: self.pc,
                    topics: a[2..].to_vec(),
                    data,
                }),
                None => return Ok(Flow::Halt(Halt::OutOfGas)),
            },
            RETURN | REVERT => match self.read_memory(&a[0], &a[1]) {
                Some(data) => {
                    self.return_data = data;
                    return Ok(Flow::Halt(if op.0 == RETURN {
                        Halt::Return
                    } else {
                        Halt::Revert
                    }));
                }
                None => return Ok(Flow::Halt(Halt::OutOfGas)),
            },
            INVALID => return Ok(Flow::Halt(Halt::Invalid)),
            SELFDESTRUCT => {
                let me = self.tx.callee;
                let beneficiary = Address::from_word(&a[0]);
                let funds = self.balance_read(&me)?;
                if beneficiary != me {
                    let b = self.balance_read(&beneficiary)?;
                    self.overlay
                        .balances
                        .insert(beneficiary, b.overflowing_add(funds).0);
                }
                self.overlay.balances.remove(&me);
                self.overlay.storage.retain(|(addr, _), _| *addr != me);
                self.overlay.destroyed.insert(me);
                return Ok(Flow::Halt(Halt::SelfDestruct));
            }
            _ => {
                debug_assert_eq!(op.info().map(|i| i.support), Some(Support::Stubbed));
                self.stub_calls.push((self.pc, op));
                self.return_data.clear();
                out.push(Word::one());
            }
        }
        Ok(Flow::Next)
    }

    fn jump(&self, dest: &Word) -> Flow {
        match word_to_usize(dest) {
            Some(d) if d < self.jumpdests.len() && self.jumpdests[d] => Flow::Jump(d),
            _ => Flow::Halt(Halt::InvalidJump),
        }
    }
}

fn signed_lt(a: &Word, b: &Word) -> bool {
    match (is_negative(a), is_negative(b)) {
        (true, false) => true,
        (false, true) => false,
        _ => a < b,
    }
}

fn abs(w: Word) -> Word {
    if is_negative(&w) {
        negate(w)
    } else {
        w
    }
}

fn sdiv(a: Word, b: Word) -> Word {
    if b.is_zero() {
        return Word::zero();
    }
    let q = abs(a) / abs(b);
    if is_negative(&a) != is_negative(&b) {
        negate(q)
    } else {
        q
    }
}

fn smod(a: Word, b: Word) -> Word {
    if b.is_zero() {
        return Word::zero();
    }
    let r = abs(a) % abs(b);
    if is_negative(&a) {
        negate(r)
    } else {
        r
    }
}

fn signextend(k: Word, x: Word) -> Word {
    match word_to_usize(&k) {
        Some(k) if k < 31 => {
            let bit = k * 8 + 7;
            let mask = (Word::one() << bit) - 1;
            if x.bit(bit) {
                x | !mask
            } else {
                x & mask
            }
        }
        _ => x,
    }
}

fn sar(shift: Word, x: Word) -> Word {
    let neg = is_negative(&x);
    match word_to_usize(&shift) {
        Some(s) if s < 256 => {
            if neg {
                !((!x) >> s)
            } else {
                x >> s
            }
        }
        _ => {
            if neg {
                Word::MAX
            } else {
                Word::zero()
            }
        }
    }
}

/// Runs `code` for `tx` against `state` to a halt.
pub fn execute<I: Inspector>(
    code: &[u8],
    tx: &Transaction,
    state: &dyn StateReader,
    env: &Env,
    record_trace: bool,
    inspector: &mut I,
) -> Result<ExecutionOutcome, ExecError> {
    Machine::new(code, tx, state, env)
        .with_trace(record_trace)
        .run(inspector)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::assemble;
    use crate::state::WorldState;

    fn run_with(code: &[u8], calldata: Vec<u8>, state: &WorldState, gas: u64) -> ExecutionOutcome {
        let mut tx = Transaction::new(Address::from_low_u64(1), Address::from_low_u64(2), calldata, Word::zero());
        tx.gas_limit = gas;
        execute(code, &tx, state, &Env::default(), true, &mut NoopInspector).unwrap()
    }

    fn run(src: &str) -> ExecutionOutcome {
        run_with(&assemble(src).unwrap(), vec![], &WorldState::new(), DEFAULT_GAS_LIMIT)
    }

    #[test]
    fn minimal_return() {
        let out = run("PUSH1 0x00 PUSH1 0x00 RETURN");
        assert_eq!(out.halt, Halt::Return);
        assert!(out.return_data.is_empty());
        assert_eq!(out.steps, 3);
        assert_eq!(out.trace.len(), 3);
    }

    #[test]
    fn one_plus_two() {
        let out = run("PUSH1 0x01 PUSH1 0x02 ADD STOP");
        assert_eq!(out.halt, Halt::Stop);
        let before_stop = out.trace.last().unwrap();
        assert_eq!(before_stop.op, Opcode(opcode::STOP));
        assert_eq!(before_stop.stack, vec![Word::from(3)]);
    }

    #[test]
    fn dup_and_jumpi_fallthrough() {
        let out = run("PUSH1 5 DUP1 STOP");
        assert_eq!(out.trace[2].stack, vec![Word::from(5), Word::from(5)]);
        let out = run("PUSH1 0 PUSH1 0x20 JUMPI PC STOP");
        // JUMPI at pc 4, falls through to PC at 5.
        assert_eq!(out.trace[3].pc, 5);
        assert_eq!(out.trace[4].stack, vec![Word::from(5)]);
    }

    #[test]
    fn calldataload_reads_word_at_offset() {
        let mut data = vec![0xa9, 0x05, 0x9c, 0xbb];
        let mut word = [0u8; 32];
        word[31] = 0x2a;
        word[0] = 0x80;
        data.extend_from_slice(&word);
        let code = assemble("PUSH1 4 CALLDATALOAD STOP").unwrap();
        let out = run_with(&code, data, &WorldState::new(), 100);
        assert_eq!(out.trace[2].stack[0], Word::from_big_endian(&word));
        // Reads past the end are zero padded.
        let code = assemble("PUSH1 20 CALLDATALOAD STOP").unwrap();
        let out = run_with(&code, vec![0xff; 24], &WorldState::new(), 100);
        assert_eq!(out.trace[2].stack[0], Word::from(0xffffffffu64) << 224);
    }

    #[test]
    fn infinite_loop_runs_out_of_gas_at_exact_budget() {
        let code = assemble("top: JUMPDEST PUSH @top JUMP").unwrap();
        for gas in [1u64, 2, 3, 1000, 1001] {
            let out = run_with(&code, vec![], &WorldState::new(), gas);
            assert_eq!(out.halt, Halt::OutOfGas);
            assert_eq!(out.steps, gas);
        }
    }

    #[test]
    fn memory_expansion_costs_gas() {
        let out = run("PUSH1 1 PUSH1 0x40 MSTORE STOP");
        // 4 instructions + 3 words of expansion.
        assert_eq!(out.gas_used, 7);
        let code = assemble("PUSH1 1 PUSH1 0x40 MSTORE STOP").unwrap();
        let out = run_with(&code, vec![], &WorldState::new(), 5);
        assert_eq!(out.halt, Halt::OutOfGas);
        assert!(out.steps <= 5);
    }

    #[test]
    fn revert_discards_writes() {
        let out = run("PUSH1 9 PUSH1 1 SSTORE PUSH1 0 DUP1 REVERT");
        assert_eq!(out.halt, Halt::Revert);
        assert!(out.delta.is_empty());
        let out = run("PUSH1 9 PUSH1 1 SSTORE INVALID");
        assert_eq!(out.halt, Halt::Invalid);
        assert!(out.delta.is_empty());
        let out = run("PUSH1 9 PUSH1 1 SSTORE STOP");
        assert_eq!(
            out.delta.storage.get(&(Address::from_low_u64(2), Word::one())),
            Some(&Word::from(9))
        );
    }

    #[test]
    fn exceptional_halts() {
        assert_eq!(run("ADD").halt, Halt::StackUnderflow);
        assert_eq!(run("PUSH1 2 JUMP JUMPDEST").halt, Halt::InvalidJump);
        assert_eq!(run("PUSH1 3 JUMP JUMPDEST").halt, Halt::Stop);
        // JUMPDEST byte inside push data is not a destination.
        assert_eq!(run("PUSH1 0x5b PUSH1 1 JUMP").halt, Halt::InvalidJump);
        assert_eq!(run_with(&[0x0c], vec![], &WorldState::new(), 10).halt, Halt::InvalidOpcode);
        assert_eq!(run("PUSH1 1 PUSH1 0 PUSH1 0 RETURNDATACOPY").halt, Halt::ReturnDataOutOfBounds);
        assert_eq!(run("top: JUMPDEST PUSH1 1 PUSH @top JUMP").halt, Halt::StackOverflow);
    }

    #[test]
    fn truncated_push_is_zero_padded() {
        let out = run_with(&[0x61, 0x01], vec![], &WorldState::new(), 10);
        assert_eq!(out.halt, Halt::Stop);
        assert_eq!(out.trace.len(), 1);
    }

    #[test]
    fn selfdestruct_clears_account() {
        let mut state = WorldState::new();
        let me = Address::from_low_u64(2);
        state.set_balance(me, Word::from(50));
        state.set_storage(me, Word::one(), Word::from(3));
        let code = assemble("PUSH1 7 PUSH1 2 SSTORE PUSH1 0x99 SELFDESTRUCT").unwrap();
        let out = run_with(&code, vec![], &state, 100);
        assert_eq!(out.halt, Halt::SelfDestruct);
        assert!(out.delta.destroyed.contains(&me));
        assert_eq!(out.delta.balances.get(&Address::from_low_u64(0x99)), Some(&Word::from(50)));
        let mut committed = state.clone();
        committed.apply(&out.delta);
        assert!(!committed.contains(&me));
    }

    #[test]
    fn stub_calls_push_success() {
        let out = run("PUSH1 0 DUP1 DUP1 DUP1 DUP1 DUP1 DUP1 CALL RETURNDATASIZE STOP");
        assert_eq!(out.stub_calls.len(), 1);
        assert_eq!(out.trace.last().unwrap().stack[..2], [Word::zero(), Word::one()]);
    }

    #[test]
    fn signed_and_modular_ops() {
        let neg1 = Word::MAX;
        assert_eq!(sdiv(negate(Word::from(10)), Word::from(3)), negate(Word::from(3)));
        assert_eq!(smod(negate(Word::from(10)), Word::from(3)), negate(Word::one()));
        assert_eq!(sar(Word::from(4), neg1), neg1);
        assert_eq!(sar(Word::from(300), Word::from(5)), Word::zero());
        assert_eq!(signextend(Word::zero(), Word::from(0xff)), neg1);
        assert_eq!(signextend(Word::zero(), Word::from(0x7f)), Word::from(0x7f));
        assert!(signed_lt(&neg1, &Word::zero()));
        let out = run("PUSH1 7 PUSH32 0xffffffffffffffffffffffffffffffffffffffffffffffffffffffffffffffff DUP1 ADDMOD STOP");
        // (2^256 - 1) * 2 mod 7
        let expected = (U512::from(Word::MAX) * U512::from(2u8)) % U512::from(7u8);
        assert_eq!(out.trace.last().unwrap().stack[0], Word::try_from(expected).unwrap());
    }

    #[test]
    fn every_supported_opcode_executes() {
        // Enough stack for any arity; memory ops use zero offsets and lengths.
        for op in Opcode::supported() {
            let mut code = Vec::new();
            for _ in 0..17 {
                code.extend_from_slice(&[opcode::PUSH1, 0]);
            }
            code.push(op.0);
            code.extend_from_slice(&[0; 32]);
            let out = run_with(&code, vec![], &WorldState::new(), 1000);
            assert_ne!(out.halt, Halt::InvalidOpcode, "{op}");
        }
        for b in 0u8..=255 {
            if Opcode(b).is_supported() {
                continue;
            }
            assert_eq!(run_with(&[b], vec![], &WorldState::new(), 10).halt, Halt::InvalidOpcode);
        }
    }

    #[test]
    fn deterministic() {
        let code = assemble("PUSH1 4 CALLDATALOAD DUP1 MUL PUSH1 0 SSTORE TIMESTAMP GAS STOP").unwrap();
        let a = run_with(&code, vec![1; 36], &WorldState::new(), 100);
        let b = run_with(&code, vec![1; 36], &WorldState::new(), 100);
        assert_eq!(a, b);
    }
}
