//! World state: accounts with balance, nonce, code and storage, a journal for
//! snapshot/rollback, and the JSON state-file format.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde_json::{Map, Value};

use crate::word::{decode_hex, encode_hex, parse_word, parse_word_hex, word_hex, Address, Word};

#[derive(Debug, thiserror::Error)]
pub enum StateError {
    #[error("cannot reach node at {endpoint}: {message}")]
    Network { endpoint: String, message: String },
    #[error("node returned error {code}: {message}")]
    Remote { code: i64, message: String },
    #[error("malformed node response: {0}")]
    Decode(String),
}

#[derive(Debug, thiserror::Error)]
pub enum StateFileError {
    #[error("cannot read state file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed state file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("state file schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("invalid hex at {path}: {value:?}")]
    InvalidHex { path: String, value: String },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SnapshotError {
    #[error("snapshot belongs to a different state lineage")]
    ForeignSnapshot,
    #[error("snapshot was already rolled back past")]
    StaleSnapshot,
}

/// Read access to accounts. Absent accounts read as zero balance, empty code
/// and all-zero storage.
pub trait StateReader {
    fn balance(&self, address: &Address) -> Result<Word, StateError>;
    fn code(&self, address: &Address) -> Result<Vec<u8>, StateError>;
    fn storage(&self, address: &Address, key: &Word) -> Result<Word, StateError>;
}

impl<T: StateReader + ?Sized> StateReader for &T {
    fn balance(&self, address: &Address) -> Result<Word, StateError> {
        (**self).balance(address)
    }
    fn code(&self, address: &Address) -> Result<Vec<u8>, StateError> {
        (**self).code(address)
    }
    fn storage(&self, address: &Address, key: &Word) -> Result<Word, StateError> {
        (**self).storage(address, key)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Account {
    pub balance: Word,
    pub nonce: u64,
    pub code: Vec<u8>,
    /// Zero values are never stored.
    pub storage: BTreeMap<Word, Word>,
}

/// Storage writes, balance changes and destroyed accounts produced by one
/// successful execution.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StateDelta {
    pub storage: BTreeMap<(Address, Word), Word>,
    pub balances: BTreeMap<Address, Word>,
    pub destroyed: BTreeSet<Address>,
}

impl StateDelta {
    pub fn is_empty(&self) -> bool {
        self.storage.is_empty() && self.balances.is_empty() && self.destroyed.is_empty()
    }
}

#[derive(Debug, Clone)]
enum JournalEntry {
    Created(Address),
    Balance(Address, Word),
    Nonce(Address, u64),
    Code(Address, Vec<u8>),
    Storage(Address, Word, Option<Word>),
    Destroyed(Address, Account),
}

/// Opaque restore point for a [`WorldState`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateSnapshot {
    lineage: u64,
    depth: usize,
    top: u64,
}

static NEXT_LINEAGE: AtomicU64 = AtomicU64::new(1);

fn next_lineage() -> u64 {
    NEXT_LINEAGE.fetch_add(1, Ordering::Relaxed)
}

/// In-memory account store. Equality compares accounts only.
#[derive(Debug)]
pub struct WorldState {
    accounts: BTreeMap<Address, Account>,
    journal: Vec<(u64, JournalEntry)>,
    lineage: u64,
    seq: u64,
}

impl Default for WorldState {
    fn default() -> Self {
        Self::new()
    }
}

/// A clone starts a new lineage: snapshots of the original cannot be
/// restored on it.
impl Clone for WorldState {
    fn clone(&self) -> Self {
        Self {
            accounts: self.accounts.clone(),
            journal: Vec::new(),
            lineage: next_lineage(),
            seq: 0,
        }
    }
}

impl PartialEq for WorldState {
    fn eq(&self, other: &Self) -> bool {
        self.accounts == other.accounts
    }
}

impl Eq for WorldState {}

impl WorldState {
    pub fn new() -> Self {
        Self {
            accounts: BTreeMap::new(),
            journal: Vec::new(),
            lineage: next_lineage(),
            seq: 0,
        }
    }

    pub fn accounts(&self) -> &BTreeMap<Address, Account> {
        &self.accounts
    }

    pub fn account(&self, address: &Address) -> Option<&Account> {
        self.accounts.get(address)
    }

    pub fn contains(&self, address: &Address) -> bool {
        self.accounts.contains_key(address)
    }

    fn record(&mut self, entry: JournalEntry) {
        self.seq += 1;
        self.journal.push((self.seq, entry));
    }

    fn top_seq(&self) -> u64 {
        self.journal.last().map(|(seq, _)| *seq).unwrap_or(0)
    }

    fn entry(&mut self, address: Address) -> &mut Account {
        if !self.accounts.contains_key(&address) {
            self.record(JournalEntry::Created(address));
        }
        self.accounts.entry(address).or_default()
    }

    pub fn set_balance(&mut self, address: Address, balance: Word) {
        let old = self.entry(address).balance;
        self.record(JournalEntry::Balance(address, old));
        self.entry(address).balance = balance;
    }

    pub fn set_nonce(&mut self, address: Address, nonce: u64) {
        let old = self.entry(address).nonce;
        self.record(JournalEntry::Nonce(address, old));
        self.entry(address).nonce = nonce;
    }

    pub fn set_code(&mut self, address: Address, code: Vec<u8>) {
        let old = std::mem::replace(&mut self.entry(address).code, code);
        self.record(JournalEntry::Code(address, old));
    }

    /// Writing zero removes the key.
    pub fn set_storage(&mut self, address: Address, key: Word, value: Word) {
        let account = self.entry(address);
        let old = if value.is_zero() {
            account.storage.remove(&key)
        } else {
            account.storage.insert(key, value)
        };
        self.record(JournalEntry::Storage(address, key, old));
    }

    pub fn destroy(&mut self, address: Address) {
        if let Some(old) = self.accounts.remove(&address) {
            self.record(JournalEntry::Destroyed(address, old));
        }
    }

    /// Commits an execution's state delta.
    pub fn apply(&mut self, delta: &StateDelta) {
        for ((address, key), value) in &delta.storage {
            self.set_storage(*address, *key, *value);
        }
        for (address, balance) in &delta.balances {
            self.set_balance(*address, *balance);
        }
        for address in &delta.destroyed {
            self.destroy(*address);
        }
    }

    pub fn snapshot(&self) -> StateSnapshot {
        StateSnapshot {
            lineage: self.lineage,
            depth: self.journal.len(),
            top: self.top_seq(),
        }
    }

    /// Rewinds every mutation made after `snap` was taken.
    pub fn restore(&mut self, snap: StateSnapshot) -> Result<(), SnapshotError> {
        if snap.lineage != self.lineage {
            return Err(SnapshotError::ForeignSnapshot);
        }
        let top = match snap.depth {
            0 => 0,
            d => self.journal.get(d - 1).map(|(seq, _)| *seq).unwrap_or(u64::MAX),
        };
        if top != snap.top {
            return Err(SnapshotError::StaleSnapshot);
        }
        while self.journal.len() > snap.depth {
            let (_, entry) = self.journal.pop().expect("journal length checked");
            match entry {
                JournalEntry::Created(a) => {
                    self.accounts.remove(&a);
                }
                JournalEntry::Balance(a, v) => self.accounts.get_mut(&a).unwrap().balance = v,
                JournalEntry::Nonce(a, v) => self.accounts.get_mut(&a).unwrap().nonce = v,
                JournalEntry::Code(a, v) => self.accounts.get_mut(&a).unwrap().code = v,
                JournalEntry::Storage(a, k, old) => {
                    let storage = &mut self.accounts.get_mut(&a).unwrap().storage;
                    match old {
                        Some(v) => storage.insert(k, v),
                        None => storage.remove(&k),
                    };
                }
                JournalEntry::Destroyed(a, account) => {
                    self.accounts.insert(a, account);
                }
            }
        }
        Ok(())
    }

    pub fn load_file(path: impl AsRef<Path>) -> Result<Self, StateFileError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn from_json_str(text: &str) -> Result<Self, StateFileError> {
        let doc: Value = serde_json::from_str(text)?;
        Self::from_json(&doc)
    }

    pub fn from_json(doc: &Value) -> Result<Self, StateFileError> {
        let root = as_object(doc, "$")?;
        let mut state = WorldState::new();
        for (key, value) in root {
            if key != "accounts" {
                return Err(schema(format!("$.{key}"), "unknown key"));
            }
            let accounts = as_object(value, "$.accounts")?;
            for (addr_text, body) in accounts {
                let path = format!("$.accounts.{addr_text}");
                let address: Address = addr_text.parse().map_err(|_| StateFileError::InvalidHex {
                    path: path.clone(),
                    value: addr_text.clone(),
                })?;
                let account = parse_account(body, &path)?;
                state.accounts.insert(address, account);
            }
        }
        Ok(state)
    }

    /// Serializes to the state-file format with canonical key order.
    pub fn to_json(&self) -> Value {
        let mut accounts = Map::new();
        for (address, account) in &self.accounts {
            let mut body = Map::new();
            body.insert("balance".into(), Value::String(word_hex(&account.balance)));
            if account.nonce != 0 {
                body.insert("nonce".into(), Value::from(account.nonce));
            }
            if !account.code.is_empty() {
                body.insert("code".into(), Value::String(encode_hex(&account.code)));
            }
            if !account.storage.is_empty() {
                let storage: Map<String, Value> = account
                    .storage
                    .iter()
                    .map(|(k, v)| (word_hex32(k), Value::String(word_hex32(v))))
                    .collect();
                body.insert("storage".into(), Value::Object(storage));
            }
            accounts.insert(address.to_string(), Value::Object(body));
        }
        let mut root = Map::new();
        root.insert("accounts".into(), Value::Object(accounts));
        Value::Object(root)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("state serializes")
    }
}

fn word_hex32(w: &Word) -> String {
    encode_hex(&crate::word::word_to_bytes(w))
}

fn schema(path: String, message: &str) -> StateFileError {
    StateFileError::Schema {
        path,
        message: message.to_string(),
    }
}

fn as_object<'a>(v: &'a Value, path: &str) -> Result<&'a Map<String, Value>, StateFileError> {
    v.as_object()
        .ok_or_else(|| schema(path.to_string(), "expected an object"))
}

fn as_str<'a>(v: &'a Value, path: &str) -> Result<&'a str, StateFileError> {
    v.as_str()
        .ok_or_else(|| schema(path.to_string(), "expected a string"))
}

fn parse_account(body: &Value, path: &str) -> Result<Account, StateFileError> {
    let mut account = Account::default();
    for (key, value) in as_object(body, path)? {
        let field = format!("{path}.{key}");
        match key.as_str() {
            "balance" => {
                let text = as_str(value, &field)?;
                account.balance = parse_word(text).map_err(|_| StateFileError::InvalidHex {
                    path: field.clone(),
                    value: text.to_string(),
                })?;
            }
            "nonce" => {
                account.nonce = match value {
                    Value::Number(n) => n.as_u64(),
                    Value::String(s) => s.parse().ok(),
                    _ => None,
                }
                .ok_or_else(|| schema(field.clone(), "expected a decimal nonce"))?;
            }
            "code" => {
                let text = as_str(value, &field)?;
                if !text.starts_with("0x") {
                    return Err(StateFileError::InvalidHex {
                        path: field,
                        value: text.to_string(),
                    });
                }
                account.code = decode_hex(text).map_err(|_| StateFileError::InvalidHex {
                    path: field.clone(),
                    value: text.to_string(),
                })?;
            }
            "storage" => {
                for (k, v) in as_object(value, &field)? {
                    let entry = format!("{field}.{k}");
                    let bad = |value: &str| StateFileError::InvalidHex {
                        path: entry.clone(),
                        value: value.to_string(),
                    };
                    if !k.starts_with("0x") {
                        return Err(bad(k));
                    }
                    let key = parse_word_hex(k).map_err(|_| bad(k))?;
                    let text = as_str(v, &entry)?;
                    if !text.starts_with("0x") {
                        return Err(bad(text));
                    }
                    let val = parse_word_hex(text).map_err(|_| bad(text))?;
                    if !val.is_zero() {
                        account.storage.insert(key, val);
                    }
                }
            }
            _ => return Err(schema(field, "unknown key")),
        }
    }
    Ok(account)
}

impl StateReader for WorldState {
    fn balance(&self, address: &Address) -> Result<Word, StateError> {
        Ok(self
            .accounts
            .get(address)
            .map(|a| a.balance)
            .unwrap_or_default())
    }

    fn code(&self, address: &Address) -> Result<Vec<u8>, StateError> {
        Ok(self
            .accounts
            .get(address)
            .map(|a| a.code.clone())
            .unwrap_or_default())
    }

    fn storage(&self, address: &Address, key: &Word) -> Result<Word, StateError> {
        Ok(self
            .accounts
            .get(address)
            .and_then(|a| a.storage.get(key).copied())
            .unwrap_or_default())
    }
}

/// A local state layered over a fallback (typically a remote node).
///
/// Accounts present in the local state are authoritative for balance and
/// code. Storage keys present locally are authoritative; other keys of the
/// same account fall through to the fallback.
pub struct LayeredState<'a, R> {
    pub local: &'a WorldState,
    pub fallback: R,
}

impl<'a, R: StateReader> StateReader for LayeredState<'a, R> {
    fn balance(&self, address: &Address) -> Result<Word, StateError> {
        match self.local.account(address) {
            Some(a) => Ok(a.balance),
            None => self.fallback.balance(address),
        }
    }

    fn code(&self, address: &Address) -> Result<Vec<u8>, StateError> {
        match self.local.account(address) {
            Some(a) => Ok(a.code.clone()),
            None => self.fallback.code(address),
        }
    }

    fn storage(&self, address: &Address, key: &Word) -> Result<Word, StateError> {
        match self.local.account(address).and_then(|a| a.storage.get(key)) {
            Some(v) => Ok(*v),
            None => self.fallback.storage(address, key),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn addr(n: u64) -> Address {
        Address::from_low_u64(n)
    }

    #[test]
    fn empty_document() {
        let s = WorldState::from_json_str("{}").unwrap();
        assert!(s.accounts().is_empty());
        assert_eq!(s.balance(&addr(1)).unwrap(), Word::zero());
        assert!(s.code(&addr(1)).unwrap().is_empty());
    }

    #[test]
    fn one_account_reads_back() {
        let doc = r#"{"accounts": {"0x00000000000000000000000000000000000000aa": {
            "balance": "1000000000000000000",
            "storage": {"0x0000000000000000000000000000000000000000000000000000000000000001":
                        "0x0000000000000000000000000000000000000000000000000000000000000007"}}}}"#;
        let s = WorldState::from_json_str(doc).unwrap();
        assert_eq!(s.balance(&addr(0xaa)).unwrap(), Word::exp10(18));
        assert_eq!(s.storage(&addr(0xaa), &Word::one()).unwrap(), Word::from(7));
        assert_eq!(s.storage(&addr(0xaa), &Word::from(2)).unwrap(), Word::zero());
    }

    #[test]
    fn zero_storage_is_absent() {
        let doc = r#"{"accounts": {"0x00000000000000000000000000000000000000aa": {
            "storage": {"0x01": "0x00"}}}}"#;
        let s = WorldState::from_json_str(doc).unwrap();
        assert!(s.account(&addr(0xaa)).unwrap().storage.is_empty());
    }

    #[test]
    fn schema_errors_name_the_key() {
        let err = WorldState::from_json_str(r#"{"acounts": {}}"#).unwrap_err();
        assert!(err.to_string().contains("$.acounts"), "{err}");
        let doc = r#"{"accounts": {"0x00000000000000000000000000000000000000aa": {"bal": "1"}}}"#;
        let err = WorldState::from_json_str(doc).unwrap_err();
        assert!(err.to_string().contains(".bal"), "{err}");
        let doc = r#"{"accounts": {"0xzz": {}}}"#;
        assert!(matches!(
            WorldState::from_json_str(doc),
            Err(StateFileError::InvalidHex { .. })
        ));
        assert!(matches!(
            WorldState::from_json_str("{"),
            Err(StateFileError::Parse(_))
        ));
        let doc = r#"{"accounts": {"0x00000000000000000000000000000000000000aa": {"code": "0xgg"}}}"#;
        assert!(matches!(
            WorldState::from_json_str(doc),
            Err(StateFileError::InvalidHex { .. })
        ));
    }

    #[test]
    fn round_trip_is_fixed_point() {
        let mut s = WorldState::new();
        s.set_balance(addr(1), Word::from(5));
        s.set_nonce(addr(1), 3);
        s.set_code(addr(2), vec![0x60, 0x00]);
        s.set_storage(addr(2), Word::from(9), Word::MAX);
        let text = s.to_json_string();
        let back = WorldState::from_json_str(&text).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_json_string(), text);
    }

    #[test]
    fn snapshot_restore() {
        let mut s = WorldState::new();
        s.set_storage(addr(1), Word::one(), Word::from(4));
        let snap = s.snapshot();
        s.set_storage(addr(1), Word::one(), Word::from(9));
        assert_eq!(s.storage(&addr(1), &Word::one()).unwrap(), Word::from(9));
        s.restore(snap).unwrap();
        assert_eq!(s.storage(&addr(1), &Word::one()).unwrap(), Word::from(4));

        let before = s.clone();
        let snap = s.snapshot();
        s.restore(snap).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn restore_undoes_destroy() {
        let mut s = WorldState::new();
        s.set_balance(addr(1), Word::from(10));
        s.set_storage(addr(1), Word::one(), Word::one());
        let before = s.clone();
        let snap = s.snapshot();
        s.destroy(addr(1));
        assert!(!s.contains(&addr(1)));
        s.restore(snap).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn foreign_and_stale_snapshots() {
        let a = WorldState::new();
        let mut b = WorldState::new();
        assert_eq!(b.restore(a.snapshot()), Err(SnapshotError::ForeignSnapshot));
        let mut c = a.clone();
        assert_eq!(c.restore(a.snapshot()), Err(SnapshotError::ForeignSnapshot));

        let base = b.snapshot();
        b.set_balance(addr(1), Word::one());
        let inner = b.snapshot();
        b.restore(base).unwrap();
        b.set_balance(addr(2), Word::one());
        // Same journal depth as `inner`, different history.
        assert_eq!(b.restore(inner), Err(SnapshotError::StaleSnapshot));
        b.restore(base).unwrap();
        assert_eq!(b.restore(inner), Err(SnapshotError::StaleSnapshot));
    }

    #[test]
    fn layered_prefers_local() {
        let mut local = WorldState::new();
        local.set_storage(addr(1), Word::one(), Word::from(5));
        let mut remote = WorldState::new();
        remote.set_storage(addr(1), Word::one(), Word::from(6));
        remote.set_storage(addr(1), Word::from(2), Word::from(7));
        remote.set_balance(addr(1), Word::from(100));
        remote.set_balance(addr(9), Word::from(100));
        let layered = LayeredState {
            local: &local,
            fallback: &remote,
        };
        assert_eq!(layered.storage(&addr(1), &Word::one()).unwrap(), Word::from(5));
        assert_eq!(layered.storage(&addr(1), &Word::from(2)).unwrap(), Word::from(7));
        assert_eq!(layered.balance(&addr(1)).unwrap(), Word::zero());
        assert_eq!(layered.balance(&addr(9)).unwrap(), Word::from(100));
    }
}
