//! A small assembler for hand-written EVM programs.
//!
//! Syntax: whitespace-separated mnemonics, `;` comments, `name:` labels,
//! `PUSHn <value>`, `PUSH <value>` (smallest width) and `PUSH @name`
//! (two-byte label reference).

use std::collections::HashMap;

use crate::opcode::{Opcode, PUSH1};
use crate::word::{parse_word, word_to_bytes};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AsmError {
    #[error("line {line}: unknown mnemonic {token:?}")]
    UnknownMnemonic { line: usize, token: String },
    #[error("line {line}: {mnemonic} needs an operand")]
    MissingOperand { line: usize, mnemonic: String },
    #[error("line {line}: bad operand {token:?}")]
    BadOperand { line: usize, token: String },
    #[error("undefined label {0:?}")]
    UndefinedLabel(String),
    #[error("duplicate label {0:?}")]
    DuplicateLabel(String),
}

enum Item {
    Bytes(Vec<u8>),
    LabelRef(String),
}

pub fn assemble(source: &str) -> Result<Vec<u8>, AsmError> {
    let mut items = Vec::new();
    let mut labels = HashMap::new();
    let mut offset = 0usize;

    let mut tokens = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let code = line.split(';').next().unwrap_or("");
        tokens.extend(code.split_whitespace().map(|t| (i + 1, t)));
    }
    let mut it = tokens.into_iter();
    while let Some((line, tok)) = it.next() {
        if let Some(name) = tok.strip_suffix(':') {
            if labels.insert(name.to_string(), offset).is_some() {
                return Err(AsmError::DuplicateLabel(name.to_string()));
            }
            continue;
        }
        let upper = tok.to_ascii_uppercase();
        if upper == "PUSH" || (upper.starts_with("PUSH") && upper != "PUSH0") {
            let (_, operand) = it.next().ok_or_else(|| AsmError::MissingOperand {
                line,
                mnemonic: tok.to_string(),
            })?;
            if let Some(label) = operand.strip_prefix('@') {
                items.push(Item::Bytes(vec![PUSH1 + 1]));
                items.push(Item::LabelRef(label.to_string()));
                offset += 3;
                continue;
            }
            let value = parse_word(operand).map_err(|_| AsmError::BadOperand {
                line,
                token: operand.to_string(),
            })?;
            let width = if upper == "PUSH" {
                value.bits().div_ceil(8).max(1)
            } else {
                let op = Opcode::from_name(&upper).ok_or_else(|| AsmError::UnknownMnemonic {
                    line,
                    token: tok.to_string(),
                })?;
                op.immediate_len()
            };
            if value.bits() > width * 8 {
                return Err(AsmError::BadOperand {
                    line,
                    token: operand.to_string(),
                });
            }
            let bytes = word_to_bytes(&value);
            let mut out = vec![PUSH1 + (width as u8) - 1];
            out.extend_from_slice(&bytes[32 - width..]);
            offset += out.len();
            items.push(Item::Bytes(out));
            continue;
        }
        let op = Opcode::from_name(tok).ok_or_else(|| AsmError::UnknownMnemonic {
            line,
            token: tok.to_string(),
        })?;
        items.push(Item::Bytes(vec![op.0]));
        offset += 1;
    }

    let mut code = Vec::with_capacity(offset);
    for item in items {
        match item {
            Item::Bytes(b) => code.extend(b),
            Item::LabelRef(name) => {
                let target = *labels
                    .get(&name)
                    .ok_or_else(|| AsmError::UndefinedLabel(name.clone()))?;
                code.extend_from_slice(&(target as u16).to_be_bytes());
            }
        }
    }
    Ok(code)
}
