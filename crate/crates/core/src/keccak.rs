//! Keccak-256 with the original Keccak padding, as used by the KECCAK256
//! opcode.

use sha3::{Digest, Keccak256};

use crate::word::Word;

pub fn keccak256(data: &[u8]) -> Word {
    Word::from_big_endian(&Keccak256::digest(data))
}
