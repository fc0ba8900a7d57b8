//! Opcode table for the supported instruction subset.

use std::fmt;

pub const STOP: u8 = 0x00;
pub const ADD: u8 = 0x01;
pub const MUL: u8 = 0x02;
pub const SUB: u8 = 0x03;
pub const DIV: u8 = 0x04;
pub const SDIV: u8 = 0x05;
pub const MOD: u8 = 0x06;
pub const SMOD: u8 = 0x07;
pub const ADDMOD: u8 = 0x08;
pub const MULMOD: u8 = 0x09;
pub const EXP: u8 = 0x0a;
pub const SIGNEXTEND: u8 = 0x0b;
pub const LT: u8 = 0x10;
pub const GT: u8 = 0x11;
pub const SLT: u8 = 0x12;
pub const SGT: u8 = 0x13;
pub const EQ: u8 = 0x14;
pub const ISZERO: u8 = 0x15;
pub const AND: u8 = 0x16;
pub const OR: u8 = 0x17;
pub const XOR: u8 = 0x18;
pub const NOT: u8 = 0x19;
pub const BYTE: u8 = 0x1a;
pub const SHL: u8 = 0x1b;
pub const SHR: u8 = 0x1c;
pub const SAR: u8 = 0x1d;
pub const KECCAK256: u8 = 0x20;
pub const ADDRESS: u8 = 0x30;
pub const BALANCE: u8 = 0x31;
pub const ORIGIN: u8 = 0x32;
pub const CALLER: u8 = 0x33;
pub const CALLVALUE: u8 = 0x34;
pub const CALLDATALOAD: u8 = 0x35;
pub const CALLDATASIZE: u8 = 0x36;
pub const CALLDATACOPY: u8 = 0x37;
pub const CODESIZE: u8 = 0x38;
pub const CODECOPY: u8 = 0x39;
pub const GASPRICE: u8 = 0x3a;
pub const RETURNDATASIZE: u8 = 0x3d;
pub const RETURNDATACOPY: u8 = 0x3e;
pub const COINBASE: u8 = 0x41;
pub const TIMESTAMP: u8 = 0x42;
pub const NUMBER: u8 = 0x43;
pub const DIFFICULTY: u8 = 0x44;
pub const GASLIMIT: u8 = 0x45;
pub const CHAINID: u8 = 0x46;
pub const POP: u8 = 0x50;
pub const MLOAD: u8 = 0x51;
pub const MSTORE: u8 = 0x52;
pub const MSTORE8: u8 = 0x53;
pub const SLOAD: u8 = 0x54;
pub const SSTORE: u8 = 0x55;
pub const JUMP: u8 = 0x56;
pub const JUMPI: u8 = 0x57;
pub const PC: u8 = 0x58;
pub const MSIZE: u8 = 0x59;
pub const GAS: u8 = 0x5a;
pub const JUMPDEST: u8 = 0x5b;
pub const PUSH1: u8 = 0x60;
pub const PUSH32: u8 = 0x7f;
pub const DUP1: u8 = 0x80;
pub const DUP16: u8 = 0x8f;
pub const SWAP1: u8 = 0x90;
pub const SWAP16: u8 = 0x9f;
pub const LOG0: u8 = 0xa0;
pub const LOG4: u8 = 0xa4;
pub const CREATE: u8 = 0xf0;
pub const CALL: u8 = 0xf1;
pub const CALLCODE: u8 = 0xf2;
pub const RETURN: u8 = 0xf3;
pub const DELEGATECALL: u8 = 0xf4;
pub const STATICCALL: u8 = 0xfa;
pub const REVERT: u8 = 0xfd;
pub const INVALID: u8 = 0xfe;
pub const SELFDESTRUCT: u8 = 0xff;

/// How an opcode is supported by the interpreter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Support {
    Implemented,
    /// Executed as a stub: pushes success and produces no return data.
    Stubbed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpInfo {
    pub name: &'static str,
    pub inputs: u8,
    pub outputs: u8,
    pub support: Support,
}

const fn imp(name: &'static str, inputs: u8, outputs: u8) -> Option<OpInfo> {
    Some(OpInfo {
        name,
        inputs,
        outputs,
        support: Support::Implemented,
    })
}

const fn stub(name: &'static str, inputs: u8, outputs: u8) -> Option<OpInfo> {
    Some(OpInfo {
        name,
        inputs,
        outputs,
        support: Support::Stubbed,
    })
}

const PUSH_NAMES: [&str; 32] = [
    "PUSH1", "PUSH2", "PUSH3", "PUSH4", "PUSH5", "PUSH6", "PUSH7", "PUSH8", "PUSH9", "PUSH10",
    "PUSH11", "PUSH12", "PUSH13", "PUSH14", "PUSH15", "PUSH16", "PUSH17", "PUSH18", "PUSH19",
    "PUSH20", "PUSH21", "PUSH22", "PUSH23", "PUSH24", "PUSH25", "PUSH26", "PUSH27", "PUSH28",
    "PUSH29", "PUSH30", "PUSH31", "PUSH32",
];
const DUP_NAMES: [&str; 16] = [
    "DUP1", "DUP2", "DUP3", "DUP4", "DUP5", "DUP6", "DUP7", "DUP8", "DUP9", "DUP10", "DUP11",
    "DUP12", "DUP13", "DUP14", "DUP15", "DUP16",
];
const SWAP_NAMES: [&str; 16] = [
    "SWAP1", "SWAP2", "SWAP3", "SWAP4", "SWAP5", "SWAP6", "SWAP7", "SWAP8", "SWAP9", "SWAP10",
    "SWAP11", "SWAP12", "SWAP13", "SWAP14", "SWAP15", "SWAP16",
];
const LOG_NAMES: [&str; 5] = ["LOG0", "LOG1", "LOG2", "LOG3", "LOG4"];

/// A raw opcode byte.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Opcode(pub u8);

impl Opcode {
    pub fn info(self) -> Option<OpInfo> {
        let b = self.0;
        match b {
            STOP => imp("STOP", 0, 0),
            ADD => imp("ADD", 2, 1),
            MUL => imp("MUL", 2, 1),
            SUB => imp("SUB", 2, 1),
            DIV => imp("DIV", 2, 1),
            SDIV => imp("SDIV", 2, 1),
            MOD => imp("MOD", 2, 1),
            SMOD => imp("SMOD", 2, 1),
            ADDMOD => imp("ADDMOD", 3, 1),
            MULMOD => imp("MULMOD", 3, 1),
            EXP => imp("EXP", 2, 1),
            SIGNEXTEND => imp("SIGNEXTEND", 2, 1),
            LT => imp("LT", 2, 1),
            GT => imp("GT", 2, 1),
            SLT => imp("SLT", 2, 1),
            SGT => imp("SGT", 2, 1),
            EQ => imp("EQ", 2, 1),
            ISZERO => imp("ISZERO", 1, 1),
            AND => imp("AND", 2, 1),
            OR => imp("OR", 2, 1),
            XOR => imp("XOR", 2, 1),
            NOT => imp("NOT", 1, 1),
            BYTE => imp("BYTE", 2, 1),
            SHL => imp("SHL", 2, 1),
            SHR => imp("SHR", 2, 1),
            SAR => imp("SAR", 2, 1),
            KECCAK256 => imp("KECCAK256", 2, 1),
            ADDRESS => imp("ADDRESS", 0, 1),
            BALANCE => imp("BALANCE", 1, 1),
            ORIGIN => imp("ORIGIN", 0, 1),
            CALLER => imp("CALLER", 0, 1),
            CALLVALUE => imp("CALLVALUE", 0, 1),
            CALLDATALOAD => imp("CALLDATALOAD", 1, 1),
            CALLDATASIZE => imp("CALLDATASIZE", 0, 1),
            CALLDATACOPY => imp("CALLDATACOPY", 3, 0),
            CODESIZE => imp("CODESIZE", 0, 1),
            CODECOPY => imp("CODECOPY", 3, 0),
            GASPRICE => imp("GASPRICE", 0, 1),
            RETURNDATASIZE => imp("RETURNDATASIZE", 0, 1),
            RETURNDATACOPY => imp("RETURNDATACOPY", 3, 0),
            COINBASE => imp("COINBASE", 0, 1),
            TIMESTAMP => imp("TIMESTAMP", 0, 1),
            NUMBER => imp("NUMBER", 0, 1),
            DIFFICULTY => imp("DIFFICULTY", 0, 1),
            GASLIMIT => imp("GASLIMIT", 0, 1),
            CHAINID => imp("CHAINID", 0, 1),
            POP => imp("POP", 1, 0),
            MLOAD => imp("MLOAD", 1, 1),
            MSTORE => imp("MSTORE", 2, 0),
            MSTORE8 => imp("MSTORE8", 2, 0),
            SLOAD => imp("SLOAD", 1, 1),
            SSTORE => imp("SSTORE", 2, 0),
            JUMP => imp("JUMP", 1, 0),
            JUMPI => imp("JUMPI", 2, 0),
            PC => imp("PC", 0, 1),
            MSIZE => imp("MSIZE", 0, 1),
            GAS => imp("GAS", 0, 1),
            JUMPDEST => imp("JUMPDEST", 0, 0),
            PUSH1..=PUSH32 => imp(PUSH_NAMES[(b - PUSH1) as usize], 0, 1),
            DUP1..=DUP16 => {
                let n = b - DUP1 + 1;
                imp(DUP_NAMES[(n - 1) as usize], n, n + 1)
            }
            SWAP1..=SWAP16 => {
                let n = b - SWAP1 + 1;
                imp(SWAP_NAMES[(n - 1) as usize], n + 1, n + 1)
            }
            LOG0..=LOG4 => imp(LOG_NAMES[(b - LOG0) as usize], 2 + (b - LOG0), 0),
            CREATE => stub("CREATE", 3, 1),
            CALL => stub("CALL", 7, 1),
            CALLCODE => stub("CALLCODE", 7, 1),
            RETURN => imp("RETURN", 2, 0),
            DELEGATECALL => stub("DELEGATECALL", 6, 1),
            STATICCALL => stub("STATICCALL", 6, 1),
            REVERT => imp("REVERT", 2, 0),
            INVALID => imp("INVALID", 0, 0),
            SELFDESTRUCT => imp("SELFDESTRUCT", 1, 0),
            _ => None,
        }
    }

    pub fn is_supported(self) -> bool {
        self.info().is_some()
    }

    /// Mnemonic, or `UNKNOWN_0x..` for bytes outside the subset.
    pub fn name(self) -> String {
        match self.info() {
            Some(i) => i.name.to_string(),
            None => format!("UNKNOWN_{:#04x}", self.0),
        }
    }

    /// Number of immediate bytes following the opcode.
    pub fn immediate_len(self) -> usize {
        if (PUSH1..=PUSH32).contains(&self.0) {
            (self.0 - PUSH1 + 1) as usize
        } else {
            0
        }
    }

    pub fn is_push(self) -> bool {
        (PUSH1..=PUSH32).contains(&self.0)
    }

    pub fn is_dup(self) -> bool {
        (DUP1..=DUP16).contains(&self.0)
    }

    pub fn is_swap(self) -> bool {
        (SWAP1..=SWAP16).contains(&self.0)
    }

    /// ADD, SUB, MUL and EXP.
    pub fn is_susceptible(self) -> bool {
        matches!(self.0, ADD | SUB | MUL | EXP)
    }

    pub fn from_name(name: &str) -> Option<Opcode> {
        let upper = name.to_ascii_uppercase();
        let upper = match upper.as_str() {
            "SHA3" => "KECCAK256".to_string(),
            "PREVRANDAO" => "DIFFICULTY".to_string(),
            _ => upper,
        };
        (0u8..=255)
            .map(Opcode)
            .find(|op| op.info().map(|i| i.name == upper).unwrap_or(false))
    }

    /// Every supported opcode, in byte order.
    pub fn supported() -> impl Iterator<Item = Opcode> {
        (0u8..=255).map(Opcode).filter(|o| o.is_supported())
    }
}

impl fmt::Debug for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Renders the support matrix as a Markdown table (mnemonic, byte, gas,
/// status).
pub fn support_matrix_markdown() -> String {
    let mut out = String::from("| Mnemonic | Byte | Gas | Status |\n|---|---|---|---|\n");
    for op in Opcode::supported() {
        let info = op.info().unwrap();
        let status = match info.support {
            Support::Implemented => "implemented",
            Support::Stubbed => "stubbed",
        };
        let gas = if matches!(
            op.0,
            MLOAD | MSTORE | MSTORE8 | KECCAK256 | CALLDATACOPY | CODECOPY | RETURNDATACOPY
                | RETURN | REVERT
        ) || (LOG0..=LOG4).contains(&op.0)
        {
            "1 + mem"
        } else {
            "1"
        };
        out.push_str(&format!(
            "| {} | {:#04x} | {} | {} |\n",
            info.name, op.0, gas, status
        ));
    }
    out
}

/// One decoded instruction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction {
    pub pc: usize,
    pub op: Opcode,
    /// Immediate bytes, zero padded when the code is truncated.
    pub immediate: Vec<u8>,
}

/// Linear-sweep disassembly. Trailing truncated PUSH immediates are
/// zero-padded.
pub fn disassemble(code: &[u8]) -> Vec<Instruction> {
    let mut out = Vec::new();
    let mut pc = 0;
    while pc < code.len() {
        let op = Opcode(code[pc]);
        let n = op.immediate_len();
        let start = (pc + 1).min(code.len());
        let end = (pc + 1 + n).min(code.len());
        let mut immediate = code[start..end].to_vec();
        immediate.resize(n, 0);
        out.push(Instruction { pc, op, immediate });
        pc += 1 + n;
    }
    out
}
