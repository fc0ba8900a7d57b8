//! Candidate transactions for triggering potential overflows.
//!
//! Candidate 1 repeats the original calldata with the maximum message value.
//! The rest assign every calldata word either 0 or the maximum word (and
//! optionally its original value), keeping the selector and the original
//! message value.

use crate::evm::Transaction;
use crate::word::{Word, MAX_WORD};

/// Default candidate cap: the max-value transaction plus 2^10 combinations.
pub const DEFAULT_CAP: usize = 1025;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CalldataLayout {
    /// First four bytes, or all of the calldata when it is shorter.
    pub selector: Vec<u8>,
    pub words: Vec<Word>,
    /// The last word was a short chunk, right-padded with zeros.
    pub ragged: bool,
    pub raw: Vec<u8>,
}

impl CalldataLayout {
    /// selector followed by every word as 32 bytes.
    pub fn assemble(&self, words: &[Word]) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.selector.len() + 32 * words.len());
        out.extend_from_slice(&self.selector);
        for w in words {
            let mut buf = [0u8; 32];
            w.to_big_endian(&mut buf);
            out.extend_from_slice(&buf);
        }
        out
    }
}

pub fn split_calldata(data: &[u8]) -> CalldataLayout {
    let cut = data.len().min(4);
    let body = &data[cut..];
    let words = body
        .chunks(32)
        .map(|c| {
            let mut buf = [0u8; 32];
            buf[..c.len()].copy_from_slice(c);
            Word::from_big_endian(&buf)
        })
        .collect();
    CalldataLayout {
        selector: data[..cut].to_vec(),
        words,
        ragged: !body.len().is_multiple_of(32),
        raw: data.to_vec(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CandidateConfig {
    pub cap: usize,
    /// Also try each word's original value.
    pub keep_original_words: bool,
}

impl Default for CandidateConfig {
    fn default() -> Self {
        Self {
            cap: DEFAULT_CAP,
            keep_original_words: false,
        }
    }
}

/// Lazily enumerated candidates, in their fixed order.
#[derive(Debug, Clone)]
pub struct Candidates {
    tx: Transaction,
    layout: CalldataLayout,
    /// Values tried for each word, in enumeration order.
    choices: Vec<Vec<Word>>,
    odometer: Vec<usize>,
    started: bool,
    exhausted: bool,
    emitted: usize,
    cap: usize,
    total: u128,
}

/// Number of combinations over `choices`, minus the original assignment
/// when it is one of them. Saturates.
fn combination_count(choices: &[Vec<Word>], original: &[Word]) -> u128 {
    let mut total: u128 = 1;
    for c in choices {
        total = total.saturating_mul(c.len() as u128);
    }
    let original_in_set = choices.iter().zip(original).all(|(c, w)| c.contains(w));
    if original_in_set && total != u128::MAX {
        total - 1
    } else {
        total
    }
}

impl Candidates {
    /// Candidates that would be produced without a cap.
    pub fn total(&self) -> u128 {
        self.total
    }

    /// Number of candidates the iterator yields in all.
    pub fn len(&self) -> usize {
        self.total.min(self.cap as u128) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn truncated(&self) -> bool {
        self.total > self.cap as u128
    }

    fn current_words(&self) -> Vec<Word> {
        self.odometer
            .iter()
            .zip(&self.choices)
            .map(|(&i, c)| c[i])
            .collect()
    }

    /// Advances the odometer; the last word varies fastest.
    fn advance(&mut self) -> bool {
        for i in (0..self.odometer.len()).rev() {
            self.odometer[i] += 1;
            if self.odometer[i] < self.choices[i].len() {
                return true;
            }
            self.odometer[i] = 0;
        }
        false
    }

    fn next_combination(&mut self) -> Option<Vec<Word>> {
        loop {
            if self.exhausted {
                return None;
            }
            if self.started {
                if !self.advance() {
                    self.exhausted = true;
                    return None;
                }
            } else {
                self.started = true;
            }
            let words = self.current_words();
            if words != self.layout.words {
                return Some(words);
            }
        }
    }
}

impl Iterator for Candidates {
    type Item = Transaction;

    fn next(&mut self) -> Option<Transaction> {
        if self.emitted >= self.cap {
            return None;
        }
        let tx = if self.emitted == 0 {
            Transaction {
                value: MAX_WORD,
                ..self.tx.clone()
            }
        } else {
            let words = self.next_combination()?;
            Transaction {
                calldata: self.layout.assemble(&words),
                ..self.tx.clone()
            }
        };
        self.emitted += 1;
        Some(tx)
    }
}

pub fn generate_candidates(tx: &Transaction, config: CandidateConfig) -> Candidates {
    let layout = split_calldata(&tx.calldata);
    let choices: Vec<Vec<Word>> = layout
        .words
        .iter()
        .map(|&w| {
            let mut c = vec![Word::zero(), MAX_WORD];
            if config.keep_original_words && !c.contains(&w) {
                c.push(w);
            }
            c
        })
        .collect();
    let total = 1u128.saturating_add(combination_count(&choices, &layout.words));
    Candidates {
        odometer: vec![0; choices.len()],
        tx: tx.clone(),
        layout,
        choices,
        started: false,
        exhausted: false,
        emitted: 0,
        cap: config.cap.max(1),
        total,
    }
}
