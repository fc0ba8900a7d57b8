//! 256-bit machine words, addresses and the wrap-detecting arithmetic used by
//! the overflow detector.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use primitive_types::U256 as Word;

/// 2^256 - 1.
pub const MAX_WORD: Word = Word::MAX;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HexError {
    #[error("invalid hex string {0:?}")]
    Invalid(String),
    #[error("value {0:?} does not fit in {1} bytes")]
    TooLong(String, usize),
    #[error("invalid decimal string {0:?}")]
    Decimal(String),
}

/// Decodes a hex string with an optional `0x` prefix. Odd-length input is
/// left-padded with a zero nibble.
pub fn decode_hex(s: &str) -> Result<Vec<u8>, HexError> {
    let t = s.trim();
    let t = t
        .strip_prefix("0x")
        .or_else(|| t.strip_prefix("0X"))
        .unwrap_or(t);
    let padded;
    let t = if t.len() % 2 == 1 {
        padded = format!("0{t}");
        padded.as_str()
    } else {
        t
    };
    hex::decode(t).map_err(|_| HexError::Invalid(s.to_string()))
}

pub fn encode_hex(bytes: &[u8]) -> String {
    format!("0x{}", hex::encode(bytes))
}

/// Parses a word from `0x`-hex.
pub fn parse_word_hex(s: &str) -> Result<Word, HexError> {
    let bytes = decode_hex(s)?;
    let start = bytes.iter().position(|b| *b != 0).unwrap_or(bytes.len());
    if bytes.len() - start > 32 {
        return Err(HexError::TooLong(s.to_string(), 32));
    }
    Ok(Word::from_big_endian(&bytes[start..]))
}

/// Parses either `0x`-hex or a decimal string.
pub fn parse_word(s: &str) -> Result<Word, HexError> {
    let t = s.trim();
    if t.starts_with("0x") || t.starts_with("0X") {
        parse_word_hex(t)
    } else {
        Word::from_dec_str(t).map_err(|_| HexError::Decimal(s.to_string()))
    }
}

/// Minimal lowercase `0x` form, `0x0` for zero.
pub fn word_hex(w: &Word) -> String {
    format!("{w:#x}")
}

pub fn word_to_bytes(w: &Word) -> [u8; 32] {
    let mut out = [0u8; 32];
    w.to_big_endian(&mut out);
    out
}

/// Saturating conversion to usize, used for memory offsets and lengths.
pub fn word_to_usize(w: &Word) -> Option<usize> {
    if w.bits() > 64 {
        return None;
    }
    usize::try_from(w.low_u64()).ok()
}

/// A 20-byte account address.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Address(pub [u8; 20]);

impl Address {
    pub const ZERO: Address = Address([0; 20]);

    /// The low 160 bits of a word.
    pub fn from_word(w: &Word) -> Self {
        let bytes = word_to_bytes(w);
        let mut a = [0u8; 20];
        a.copy_from_slice(&bytes[12..]);
        Address(a)
    }

    pub fn to_word(&self) -> Word {
        Word::from_big_endian(&self.0)
    }

    /// Convenience constructor for test and fixture addresses.
    pub fn from_low_u64(v: u64) -> Self {
        Self::from_word(&Word::from(v))
    }
}

impl FromStr for Address {
    type Err = HexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let body = t
            .strip_prefix("0x")
            .or_else(|| t.strip_prefix("0X"))
            .ok_or_else(|| HexError::Invalid(s.to_string()))?;
        if body.len() != 40 {
            return Err(HexError::Invalid(s.to_string()));
        }
        let bytes = hex::decode(body).map_err(|_| HexError::Invalid(s.to_string()))?;
        let mut a = [0u8; 20];
        a.copy_from_slice(&bytes);
        Ok(Address(a))
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{}", hex::encode(self.0))
    }
}

impl fmt::Debug for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl Serialize for Address {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Address {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Serde adapter for words as minimal `0x`-hex strings.
pub mod serde_word {
    use super::*;

    pub fn serialize<S: Serializer>(w: &Word, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&word_hex(w))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Word, D::Error> {
        let s = String::deserialize(d)?;
        parse_word_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// Serde adapter for byte strings as `0x`-hex.
pub mod serde_bytes_hex {
    use super::*;

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&encode_hex(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        decode_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// `a + b` mod 2^256; wraps iff the result is below `a`.
pub fn wrap_add(a: Word, b: Word) -> (Word, bool) {
    let r = a.overflowing_add(b).0;
    (r, r < a)
}

/// `a - b` mod 2^256 (top of stack minus next); wraps iff `a < b`.
pub fn wrap_sub(a: Word, b: Word) -> (Word, bool) {
    (a.overflowing_sub(b).0, a < b)
}

/// `a * b` mod 2^256; wraps iff `a != 0` and `result / a != b`.
pub fn wrap_mul(a: Word, b: Word) -> (Word, bool) {
    let r = a.overflowing_mul(b).0;
    let wrapped = !a.is_zero() && r / a != b;
    (r, wrapped)
}

/// `base ^ exponent` mod 2^256; wraps iff the exact power reaches 2^256.
pub fn wrap_exp(base: Word, exponent: Word) -> (Word, bool) {
    let result = modular_pow(base, exponent);
    (result, exp_exceeds_word(base, exponent))
}

fn modular_pow(mut base: Word, mut exp: Word) -> Word {
    let mut acc = Word::one();
    while !exp.is_zero() {
        if exp.bit(0) {
            acc = acc.overflowing_mul(base).0;
        }
        exp >>= 1;
        base = base.overflowing_mul(base).0;
    }
    acc
}

/// Square-and-multiply with early exit once the accumulator reaches 2^256.
/// A squared term that overflows only matters if it is multiplied in later.
fn exp_exceeds_word(base: Word, exponent: Word) -> bool {
    if exponent.is_zero() || base <= Word::one() {
        return false;
    }
    if exponent >= Word::from(256u32) {
        return true;
    }
    let e = exponent.low_u32();
    let mut acc = Word::one();
    let mut sq = base;
    let mut sq_overflowed = false;
    let mut bit = e;
    while bit != 0 {
        if bit & 1 == 1 {
            if sq_overflowed {
                return true;
            }
            let (next, of) = acc.overflowing_mul(sq);
            if of {
                return true;
            }
            acc = next;
        }
        bit >>= 1;
        if bit != 0 && !sq_overflowed {
            let (next, of) = sq.overflowing_mul(sq);
            sq = next;
            sq_overflowed = of;
        }
    }
    false
}

/// Two's-complement helpers for the signed opcodes.
pub(crate) fn is_negative(w: &Word) -> bool {
    w.bit(255)
}

pub(crate) fn negate(w: Word) -> Word {
    (!w).overflowing_add(Word::one()).0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pow2(n: usize) -> Word {
        Word::one() << n
    }

    #[test]
    fn bec_multiplication_wraps_to_zero() {
        assert_eq!(wrap_mul(pow2(255), Word::from(2)), (Word::zero(), true));
        assert_eq!(wrap_mul(Word::from(2), pow2(255)), (Word::zero(), true));
    }

    #[test]
    fn trivial_wraps() {
        assert_eq!(wrap_add(MAX_WORD, Word::one()), (Word::zero(), true));
        assert_eq!(wrap_sub(Word::zero(), Word::one()), (MAX_WORD, true));
        assert_eq!(wrap_exp(Word::from(2), Word::from(256)), (Word::zero(), true));
        assert_eq!(wrap_mul(Word::from(3), Word::from(5)), (Word::from(15), false));
        assert_eq!(wrap_mul(Word::zero(), MAX_WORD), (Word::zero(), false));
    }

    #[test]
    fn exp_boundaries() {
        assert_eq!(wrap_exp(Word::from(2), Word::from(255)), (pow2(255), false));
        assert_eq!(wrap_exp(MAX_WORD, Word::zero()), (Word::one(), false));
        assert_eq!(wrap_exp(Word::one(), MAX_WORD), (Word::one(), false));
        assert_eq!(wrap_exp(Word::zero(), MAX_WORD), (Word::zero(), false));
        // 16^64 = 2^256
        assert!(wrap_exp(Word::from(16), Word::from(64)).1);
        assert!(!wrap_exp(Word::from(16), Word::from(63)).1);
        // (2^128)^2
        assert_eq!(wrap_exp(pow2(128), Word::from(2)), (Word::zero(), true));
        assert!(!wrap_exp(pow2(128) - 1, Word::from(2)).1);
    }

    #[test]
    fn max_plus_one_is_zero() {
        assert_eq!(MAX_WORD.overflowing_add(Word::one()).0, Word::zero());
    }

    #[test]
    fn hex_parsing() {
        assert_eq!(parse_word("0x00").unwrap(), Word::zero());
        assert_eq!(parse_word("1000000000000000000").unwrap(), Word::exp10(18));
        assert_eq!(parse_word("0xff").unwrap(), Word::from(255));
        assert!(parse_word_hex(&format!("0x01{}", "00".repeat(32))).is_err());
        assert_eq!(word_hex(&Word::zero()), "0x0");
        assert_eq!(decode_hex("0xabc").unwrap(), vec![0x0a, 0xbc]);
        assert!("0x12".parse::<Address>().is_err());
        let a: Address = "0x00000000000000000000000000000000000000ff".parse().unwrap();
        assert_eq!(a, Address::from_low_u64(255));
    }
}
