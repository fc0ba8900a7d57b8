//! Independent oracles shared by the property and acceptance tests.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use easyflow_core::evm::{execute, Env, InspectError, Inspector, PostStep, Transaction};
use easyflow_core::opcode::{self as op, Opcode};
use easyflow_core::state::WorldState;
use easyflow_core::taint::TaintTracker;
use easyflow_core::word::{Address, Word};
use num_bigint::BigUint;
use rand::Rng;

pub fn to_big(w: Word) -> BigUint {
    let mut b = [0u8; 32];
    w.to_big_endian(&mut b);
    BigUint::from_bytes_be(&b)
}

pub fn from_big(b: &BigUint) -> Word {
    let bytes = b.to_bytes_be();
    Word::from_big_endian(&bytes[bytes.len().saturating_sub(32)..])
}

fn modulus() -> BigUint {
    BigUint::from(1u8) << 256
}

/// (result mod 2^256, wrapped) computed with unbounded integers.
pub fn big_wrap(opcode: u8, a: Word, b: Word) -> (Word, bool) {
    let (x, y) = (to_big(a), to_big(b));
    let m = modulus();
    match opcode {
        op::ADD => {
            let r = x + y;
            (from_big(&(&r % &m)), r >= m)
        }
        op::SUB => {
            if x >= y {
                (from_big(&(x - y)), false)
            } else {
                (from_big(&(&m + x - y)), true)
            }
        }
        op::MUL => {
            let r = x * y;
            (from_big(&(&r % &m)), r >= m)
        }
        op::EXP => {
            let result = x.modpow(&y, &m);
            // x >= 2^(bits-1), so x^y >= 2^((bits-1)*y); only small powers
            // need to be computed in full.
            let wrapped = if y == BigUint::from(0u8) || x <= BigUint::from(1u8) {
                false
            } else if y.bits() > 16 || (x.bits() - 1) * u64::try_from(&y).unwrap() >= 256 {
                true
            } else {
                x.pow(u32::try_from(&y).unwrap()) >= m
            };
            (from_big(&result), wrapped)
        }
        _ => unreachable!("not susceptible"),
    }
}

/// Operand mix: uniform words, small values, values near the maximum and
/// powers of two.
pub fn random_operand<R: Rng>(rng: &mut R) -> Word {
    match rng.gen_range(0..5) {
        0 => {
            let mut b = [0u8; 32];
            rng.fill(&mut b);
            Word::from_big_endian(&b)
        }
        1 => Word::from(rng.gen_range(0u64..300)),
        2 => Word::MAX - Word::from(rng.gen_range(0u64..300)),
        3 => Word::one() << rng.gen_range(0..256),
        _ => {
            let mut b = [0u8; 32];
            let n = rng.gen_range(1..=32);
            rng.fill(&mut b[32 - n..]);
            Word::from_big_endian(&b)
        }
    }
}

/// One generated instruction.
#[derive(Debug, Clone, Copy)]
pub struct Gen {
    pub op: u8,
    pub imm: Option<u8>,
}

const BINARY: [u8; 20] = [
    op::ADD, op::MUL, op::SUB, op::DIV, op::SDIV, op::MOD, op::SMOD, op::EXP, op::SIGNEXTEND, op::LT,
    op::GT, op::SLT, op::SGT, op::EQ, op::AND, op::OR, op::XOR, op::BYTE, op::SHL, op::SAR,
];
const NULLARY: [u8; 6] = [op::CALLVALUE, op::CALLER, op::ADDRESS, op::TIMESTAMP, op::CALLDATASIZE, op::MSIZE];

/// A random straight-line program of `len` instructions ending in STOP.
/// Memory and storage operations always take constant operands pushed
/// immediately before them.
pub fn random_program<R: Rng>(rng: &mut R, len: usize) -> Vec<Gen> {
    let mut out: Vec<Gen> = Vec::new();
    let mut depth = 0usize;
    let g = |op, imm| Gen { op, imm };
    while out.len() < len {
        let choice = rng.gen_range(0..100);
        match choice {
            0..=14 => {
                out.push(g(op::PUSH1, Some(rng.gen())));
                depth += 1;
            }
            15..=22 => {
                out.push(g(NULLARY[rng.gen_range(0..NULLARY.len())], None));
                depth += 1;
            }
            23..=30 if depth >= 1 => out.push(g(op::CALLDATALOAD, None)),
            31..=50 if depth >= 2 => {
                out.push(g(BINARY[rng.gen_range(0..BINARY.len())], None));
                depth -= 1;
            }
            51..=54 if depth >= 3 => {
                out.push(g(if rng.gen() { op::ADDMOD } else { op::MULMOD }, None));
                depth -= 2;
            }
            55..=58 if depth >= 1 => out.push(g(if rng.gen() { op::NOT } else { op::ISZERO }, None)),
            59..=66 if depth >= 1 => {
                let n = rng.gen_range(1..=depth.min(16));
                out.push(g(op::DUP1 + n as u8 - 1, None));
                depth += 1;
            }
            67..=74 if depth >= 2 => {
                let n = rng.gen_range(1..=(depth - 1).min(16));
                out.push(g(op::SWAP1 + n as u8 - 1, None));
            }
            75..=77 if depth >= 1 => {
                out.push(g(op::POP, None));
                depth -= 1;
            }
            78..=82 if depth >= 1 => {
                let store = if rng.gen_range(0..4) == 0 { op::MSTORE8 } else { op::MSTORE };
                out.push(g(op::PUSH1, Some(rng.gen_range(0..96))));
                out.push(g(store, None));
                depth -= 1;
            }
            83..=86 => {
                out.push(g(op::PUSH1, Some(rng.gen_range(0..96))));
                out.push(g(op::MLOAD, None));
                depth += 1;
            }
            87..=88 => {
                out.push(g(op::PUSH1, Some(rng.gen_range(0..64))));
                out.push(g(op::PUSH1, Some(rng.gen_range(0..96))));
                out.push(g(op::KECCAK256, None));
                depth += 1;
            }
            89..=91 if depth >= 1 => {
                out.push(g(op::PUSH1, Some(rng.gen_range(0..4))));
                out.push(g(op::SSTORE, None));
                depth -= 1;
            }
            92..=94 => {
                out.push(g(op::PUSH1, Some(rng.gen_range(0..4))));
                out.push(g(op::SLOAD, None));
                depth += 1;
            }
            95..=99 => {
                out.push(g(op::PUSH1, Some(rng.gen_range(0..40))));
                out.push(g(op::PUSH1, Some(rng.gen_range(0..40))));
                out.push(g(op::PUSH1, Some(rng.gen_range(0..96))));
                out.push(g(op::CALLDATACOPY, None));
            }
            _ => {}
        }
    }
    out.push(g(op::STOP, None));
    out
}

pub fn encode(program: &[Gen]) -> Vec<u8> {
    let mut code = Vec::new();
    for g in program {
        code.push(g.op);
        if let Some(i) = g.imm {
            code.push(i);
        }
    }
    code
}

type Prov = BTreeSet<usize>;

#[derive(Clone)]
struct Entry {
    prov: Prov,
    known: Option<usize>,
}

/// Brute-force shadow simulator: every value carries the set of source
/// instructions (by program index) it was computed from. Returns the
/// tainted flags of the full stack (bottom first) after each instruction.
pub fn simulate_provenance(program: &[Gen]) -> Vec<Vec<bool>> {
    let mut stack: Vec<Entry> = Vec::new();
    let mut memory: HashMap<usize, Prov> = HashMap::new();
    let mut storage: HashMap<usize, Prov> = HashMap::new();
    let mut snaps = Vec::new();
    let clean = |known| Entry {
        prov: Prov::new(),
        known,
    };
    for (idx, g) in program.iter().enumerate() {
        let o = g.op;
        match o {
            op::PUSH1 => stack.push(clean(g.imm.map(usize::from))),
            op::CALLVALUE => stack.push(Entry {
                prov: [idx].into(),
                known: None,
            }),
            op::CALLDATALOAD => {
                let mut e = stack.pop().unwrap();
                e.prov.insert(idx);
                e.known = None;
                stack.push(e);
            }
            x if NULLARY.contains(&x) => stack.push(clean(None)),
            x if (op::DUP1..=op::DUP16).contains(&x) => {
                let n = (x - op::DUP1 + 1) as usize;
                stack.push(stack[stack.len() - n].clone());
            }
            x if (op::SWAP1..=op::SWAP16).contains(&x) => {
                let n = (x - op::SWAP1 + 1) as usize;
                let l = stack.len();
                stack.swap(l - 1, l - 1 - n);
            }
            op::POP => {
                stack.pop();
            }
            op::MSTORE | op::MSTORE8 => {
                let off = stack.pop().unwrap().known.unwrap();
                let v = stack.pop().unwrap();
                let width = if o == op::MSTORE { 32 } else { 1 };
                for i in off..off + width {
                    memory.insert(i, v.prov.clone());
                }
            }
            op::MLOAD => {
                let off = stack.pop().unwrap().known.unwrap();
                let mut p = Prov::new();
                for i in off..off + 32 {
                    p.extend(memory.get(&i).into_iter().flatten().copied());
                }
                stack.push(Entry { prov: p, known: None });
            }
            op::KECCAK256 => {
                let off = stack.pop().unwrap().known.unwrap();
                let size = stack.pop().unwrap().known.unwrap();
                let mut p = Prov::new();
                for i in off..off + size {
                    p.extend(memory.get(&i).into_iter().flatten().copied());
                }
                stack.push(Entry { prov: p, known: None });
            }
            op::SSTORE => {
                let key = stack.pop().unwrap().known.unwrap();
                let v = stack.pop().unwrap();
                storage.insert(key, v.prov);
            }
            op::SLOAD => {
                let key = stack.pop().unwrap().known.unwrap();
                stack.push(Entry {
                    prov: storage.get(&key).cloned().unwrap_or_default(),
                    known: None,
                });
            }
            op::CALLDATACOPY => {
                let dest = stack.pop().unwrap().known.unwrap();
                let _src = stack.pop().unwrap();
                let len = stack.pop().unwrap().known.unwrap();
                for i in dest..dest + len {
                    memory.insert(i, [idx].into());
                }
            }
            op::STOP => {}
            _ => {
                let arity = Opcode(o).info().unwrap().inputs as usize;
                let mut p = Prov::new();
                for _ in 0..arity {
                    p.extend(stack.pop().unwrap().prov);
                }
                stack.push(Entry { prov: p, known: None });
            }
        }
        snaps.push(stack.iter().map(|e| !e.prov.is_empty()).collect());
    }
    snaps
}

/// Taint tracker that records the full shadow stack after every step.
#[derive(Default)]
pub struct Recorder {
    pub tracker: TaintTracker,
    pub snaps: Vec<Vec<bool>>,
}

impl Inspector for Recorder {
    fn after_step(&mut self, post: &PostStep<'_>) -> Result<(), InspectError> {
        self.tracker.after_step(post)?;
        self.snaps
            .push(self.tracker.shadow.stack.iter().map(|m| m.is_tainted()).collect());
        Ok(())
    }
}

/// Shadow stack flags from the real taint engine, one entry per step.
pub fn engine_snapshots(code: &[u8], calldata: Vec<u8>, value: Word) -> Vec<Vec<bool>> {
    let tx = Transaction::new(Address::from_low_u64(1), Address::from_low_u64(2), calldata, value);
    let mut rec = Recorder::default();
    let out = execute(code, &tx, &WorldState::new(), &Env::default(), false, &mut rec).unwrap();
    assert!(out.halt.is_success(), "generated program halted with {:?}", out.halt);
    rec.snaps
}

/// Runs one random program through both and returns the first step where
/// they disagree.
pub fn taint_differential<R: Rng>(rng: &mut R) -> Result<(), String> {
    let program = random_program(rng, 50);
    let code = encode(&program);
    let mut calldata = vec![0u8; rng.gen_range(0..80)];
    rng.fill(&mut calldata[..]);
    let engine = engine_snapshots(&code, calldata, Word::from(rng.gen_range(0u64..1000)));
    let oracle = simulate_provenance(&program);
    if engine.len() != oracle.len() {
        return Err(format!("step counts differ: {} vs {}", engine.len(), oracle.len()));
    }
    for (i, (e, o)) in engine.iter().zip(&oracle).enumerate() {
        if e != o {
            return Err(format!(
                "step {i} ({}): engine {e:?}, oracle {o:?}",
                Opcode(program[i].op).name()
            ));
        }
    }
    Ok(())
}
