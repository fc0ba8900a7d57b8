//! Bundled example contracts, one or more per verdict, hand-assembled from
//! the mnemonic sources below.

use crate::asm::assemble;
use crate::driver::Verdict;
use crate::evm::{Transaction, DEFAULT_CALLEE, DEFAULT_SENDER};
use crate::keccak::keccak256;
use crate::state::WorldState;
use crate::word::{word_to_bytes, Address, Word, MAX_WORD};

#[derive(Debug, Clone)]
pub struct Fixture {
    pub name: &'static str,
    pub description: &'static str,
    pub source: &'static str,
    pub code: Vec<u8>,
    pub tx: Transaction,
    pub state: WorldState,
    pub expected: Verdict,
}

/// `batchTransfer(address[] receivers, uint256 value)`: debits
/// `receivers.length * value` from the sender and credits `value` to each
/// receiver, with no overflow check on the product.
pub const BEC_ANALOG: &str = "
    PUSH1 0x24 CALLDATALOAD                 ; value
    PUSH1 4 CALLDATALOAD PUSH1 4 ADD CALLDATALOAD   ; value cnt
    DUP2 DUP2 MUL                           ; value cnt amount
    DUP2 ISZERO PUSH @fail JUMPI            ; require(cnt > 0)
    PUSH1 20 DUP3 GT PUSH @fail JUMPI       ; require(cnt <= 20)
    DUP3 ISZERO PUSH @fail JUMPI            ; require(value > 0)
    CALLER PUSH1 0 MSTORE PUSH1 0 PUSH1 32 MSTORE PUSH1 64 PUSH1 0 SHA3
    DUP1 SLOAD                              ; value cnt amount slot bal
    DUP3 DUP2 LT PUSH @fail JUMPI           ; require(bal >= amount)
    DUP3 SWAP1 SUB SWAP1 SSTORE POP         ; value cnt
    PUSH1 0
loop:
    JUMPDEST DUP2 DUP2 LT ISZERO PUSH @done JUMPI
    DUP1 PUSH1 32 MUL PUSH1 4 CALLDATALOAD PUSH1 0x24 ADD ADD CALLDATALOAD
    PUSH1 0 MSTORE PUSH1 0 PUSH1 32 MSTORE PUSH1 64 PUSH1 0 SHA3
    DUP1 SLOAD DUP5 ADD SWAP1 SSTORE
    PUSH1 1 ADD PUSH @loop JUMP
done:
    JUMPDEST STOP
fail:
    JUMPDEST PUSH1 0 DUP1 REVERT
";

/// The same transfer with the product checked by `c / a == b`.
pub const SAFEMATH_MUL: &str = "
    PUSH1 0x24 CALLDATALOAD
    PUSH1 4 CALLDATALOAD PUSH1 4 ADD CALLDATALOAD   ; value cnt
    DUP1 ISZERO PUSH @fail JUMPI
    PUSH1 20 DUP2 GT PUSH @fail JUMPI
    DUP2 DUP2 MUL                           ; value cnt c
    DUP2 DUP2 DIV DUP4 EQ PUSH @mulok JUMPI INVALID
mulok:
    JUMPDEST DUP3 ISZERO PUSH @fail JUMPI
    CALLER PUSH1 0 MSTORE PUSH1 0 PUSH1 32 MSTORE PUSH1 64 PUSH1 0 SHA3
    DUP1 SLOAD
    DUP3 DUP2 LT PUSH @fail JUMPI
    DUP3 SWAP1 SUB SWAP1 SSTORE
    STOP
fail:
    JUMPDEST PUSH1 0 DUP1 REVERT
";

/// `redeem(uint256 card, uint256 amount)`: adds to a running total with
/// no check and records the card.
pub const GIFT_CARD: &str = "
    PUSH1 0x24 CALLDATALOAD PUSH1 0 SLOAD ADD PUSH1 0 SSTORE
    PUSH1 0x24 CALLDATALOAD
    PUSH1 4 CALLDATALOAD PUSH1 0 MSTORE PUSH1 1 PUSH1 32 MSTORE PUSH1 64 PUSH1 0 SHA3
    SSTORE
    STOP
";

/// `deposit() payable`: adds the message value to a pot.
pub const RED_ENVELOPE: &str = "
    CALLVALUE ISZERO PUSH @fail JUMPI
    CALLVALUE PUSH1 0 SLOAD ADD PUSH1 0 SSTORE
    STOP
fail:
    JUMPDEST PUSH1 0 DUP1 REVERT
";

/// `transfer(address to, uint256 amount)` with `require(amount <= 10^6)`
/// ahead of the addition.
pub const HBTOKEN_GUARDED: &str = "
    PUSH1 0x24 CALLDATALOAD
    DUP1 PUSH3 0x0f4240 LT PUSH @fail JUMPI
    PUSH1 4 CALLDATALOAD PUSH1 0 MSTORE PUSH1 0 PUSH1 32 MSTORE PUSH1 64 PUSH1 0 SHA3
    DUP1 SLOAD DUP3 ADD SWAP1 SSTORE POP
    STOP
fail:
    JUMPDEST PUSH1 0 DUP1 REVERT
";

/// `rate(uint256 score)`: stores the score per sender and bumps a counter.
pub const RATING_SAFE: &str = "
    PUSH1 4 CALLDATALOAD
    CALLER PUSH1 0 MSTORE PUSH1 2 PUSH1 32 MSTORE PUSH1 64 PUSH1 0 SHA3
    SSTORE
    PUSH1 3 SLOAD PUSH1 1 ADD PUSH1 3 SSTORE
    STOP
";

pub const SAFE_NOOP: &str = "STOP";

/// `play(uint256 n)`: n = 0 pays the owner out by self-destructing,
/// otherwise `require(n <= 100)` and the pot grows by n.
pub const LOTTO_SELFDESTRUCT: &str = "
    PUSH1 4 CALLDATALOAD
    DUP1 ISZERO PUSH @payout JUMPI
    DUP1 PUSH1 100 LT PUSH @fail JUMPI
    PUSH1 1 SLOAD ADD PUSH1 1 SSTORE
    STOP
payout:
    JUMPDEST PUSH1 0 SLOAD SELFDESTRUCT
fail:
    JUMPDEST PUSH1 0 DUP1 REVERT
";

fn word(w: Word) -> [u8; 32] {
    word_to_bytes(&w)
}

fn calldata(selector: [u8; 4], words: &[Word]) -> Vec<u8> {
    let mut out = selector.to_vec();
    for w in words {
        out.extend_from_slice(&word(*w));
    }
    out
}

/// Storage slot of `mapping[key]` for a mapping declared at `slot`.
pub fn mapping_slot(key: Word, slot: u64) -> Word {
    let mut buf = word(key).to_vec();
    buf.extend_from_slice(&word(Word::from(slot)));
    keccak256(&buf)
}

fn tx(calldata: Vec<u8>, value: Word) -> Transaction {
    Transaction::new(DEFAULT_SENDER, DEFAULT_CALLEE, calldata, value)
}

fn with_storage(pairs: &[(Word, Word)]) -> WorldState {
    let mut s = WorldState::new();
    s.set_balance(DEFAULT_SENDER, Word::from(10u64).pow(Word::from(18)));
    for (k, v) in pairs {
        s.set_storage(DEFAULT_CALLEE, *k, *v);
    }
    s
}

fn fixture(
    name: &'static str,
    description: &'static str,
    source: &'static str,
    tx: Transaction,
    state: WorldState,
    expected: Verdict,
) -> Fixture {
    let code = assemble(source).unwrap_or_else(|e| panic!("fixture {name}: {e}"));
    let mut state = state;
    state.set_code(DEFAULT_CALLEE, code.clone());
    Fixture {
        name,
        description,
        source,
        code,
        tx,
        state,
        expected,
    }
}

/// Calldata of a two-receiver batch transfer of 2^255 each.
pub fn bec_calldata() -> Vec<u8> {
    calldata(
        [0x83, 0xf1, 0x2f, 0xec],
        &[
            Word::from(0x40),
            Word::one() << 255,
            Word::from(2),
            Address::from_low_u64(0xb0b).to_word(),
            Address::from_low_u64(0xca401).to_word(),
        ],
    )
}

pub fn all() -> Vec<Fixture> {
    let sender_balance_slot = mapping_slot(DEFAULT_SENDER.to_word(), 0);
    let bec_state = with_storage(&[(sender_balance_slot, Word::from(10_000))]);
    vec![
        fixture(
            "bec-analog",
            "batch transfer whose receivers * value product wraps to 0",
            BEC_ANALOG,
            tx(bec_calldata(), Word::zero()),
            bec_state.clone(),
            Verdict::ManifestedOverflow,
        ),
        fixture(
            "safemath-mul",
            "the same batch transfer with a division check on the product",
            SAFEMATH_MUL,
            tx(bec_calldata(), Word::zero()),
            bec_state,
            Verdict::ProtectedOverflow,
        ),
        fixture(
            "gift-card",
            "unchecked running total, triggered by a maximal amount word",
            GIFT_CARD,
            tx(calldata([0xdb, 0x00, 0x6a, 0x75], &[Word::from(7), Word::from(100)]), Word::zero()),
            with_storage(&[(Word::zero(), Word::from(500))]),
            Verdict::PotentialOverflowTriggered,
        ),
        fixture(
            "red-envelope",
            "pot increased by the message value, triggered by a maximal value",
            RED_ENVELOPE,
            tx(vec![0xd0, 0xe3, 0x0d, 0xb0], Word::from(10u64).pow(Word::from(18))),
            with_storage(&[(Word::zero(), Word::from(500))]),
            Verdict::PotentialOverflowTriggered,
        ),
        fixture(
            "hbtoken-guarded",
            "addition behind an amount bound that rejects every extreme input",
            HBTOKEN_GUARDED,
            tx(
                calldata(
                    [0xa9, 0x05, 0x9c, 0xbb],
                    &[Address::from_low_u64(0xbeef).to_word(), Word::from(250)],
                ),
                Word::zero(),
            ),
            with_storage(&[(mapping_slot(Address::from_low_u64(0xbeef).to_word(), 0), Word::from(5000))]),
            Verdict::PotentialOverflowNotTriggered,
        ),
        fixture(
            "rating-safe",
            "stores a caller-supplied score; the only arithmetic is on a counter",
            RATING_SAFE,
            tx(calldata([0x8d, 0x33, 0x7b, 0x81], &[Word::from(4)]), Word::zero()),
            with_storage(&[(Word::from(3), Word::from(17))]),
            Verdict::Safe,
        ),
        fixture(
            "safe-noop",
            "a single STOP",
            SAFE_NOOP,
            tx(vec![], Word::zero()),
            WorldState::new(),
            Verdict::Safe,
        ),
        fixture(
            "lotto-selfdestruct",
            "bounded pot increment; a zero argument self-destructs the contract",
            LOTTO_SELFDESTRUCT,
            tx(calldata([0x69, 0x89, 0x81, 0x9e], &[Word::from(5)]), Word::zero()),
            {
                let mut s = with_storage(&[
                    (Word::zero(), Address::from_low_u64(0x0e4e).to_word()),
                    (Word::one(), Word::from(42)),
                ]);
                s.set_balance(DEFAULT_CALLEE, Word::from(10u64).pow(Word::from(18)));
                s
            },
            Verdict::PotentialOverflowNotTriggered,
        ),
    ]
}

pub fn by_name(name: &str) -> Option<Fixture> {
    all().into_iter().find(|f| f.name == name)
}

/// Calldata words set to the maximum word, for checking which candidate
/// triggered.
pub fn max_words(calldata: &[u8]) -> Vec<usize> {
    crate::txgen::split_calldata(calldata)
        .words
        .iter()
        .enumerate()
        .filter(|(_, w)| **w == MAX_WORD)
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::{analyze, AnalysisConfig};

    #[test]
    fn every_fixture_meets_its_verdict() {
        for f in all() {
            let a = analyze(&f.code, &f.tx, &f.state, &AnalysisConfig::default()).unwrap();
            assert_eq!(a.report.verdict, f.expected, "{}: {:#?}", f.name, a.report);
        }
    }

    #[test]
    fn no_execution_hits_malformed_code() {
        let config = AnalysisConfig {
            early_exit: false,
            ..AnalysisConfig::default()
        };
        for f in all() {
            let r = analyze(&f.code, &f.tx, &f.state, &config).unwrap().report;
            let outcomes = std::iter::once(r.outcome.as_str()).chain(r.candidates.iter().filter_map(|c| c.outcome.as_deref()));
            for o in outcomes {
                assert!(
                    matches!(o, "stop" | "return" | "revert" | "invalid" | "selfdestruct"),
                    "{}: {o}",
                    f.name
                );
            }
        }
    }

    #[test]
    fn names_are_unique() {
        let names: std::collections::BTreeSet<_> = all().iter().map(|f| f.name).collect();
        assert_eq!(names.len(), all().len());
        assert!(by_name("bec-analog").is_some());
        assert!(by_name("nope").is_none());
    }
}
