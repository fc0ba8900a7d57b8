//! World state read from a node over JSON-RPC.
//!
//! Balances, code and storage slots are fetched on first read and cached,
//! so a slot read twice costs one request.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, MutexGuard};
use std::time::Duration;

use serde_json::{json, Value};

use crate::state::{StateError, StateReader};
use crate::word::{decode_hex, parse_word_hex, word_hex, Address, Word};

pub const DEFAULT_BLOCK_TAG: &str = "latest";

#[derive(Debug, Default)]
struct Cache {
    balances: HashMap<Address, Word>,
    code: HashMap<Address, Vec<u8>>,
    storage: HashMap<(Address, Word), Word>,
}

/// What [`RemoteState::fetch`] should load ahead of execution.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Needed {
    pub code: bool,
    pub balance: bool,
    pub storage: Vec<Word>,
}

#[derive(Debug)]
pub struct RemoteState {
    endpoint: String,
    block: String,
    agent: ureq::Agent,
    cache: Mutex<Cache>,
    next_id: AtomicU64,
    requests: AtomicU64,
}

impl RemoteState {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            block: DEFAULT_BLOCK_TAG.to_string(),
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(30)).build(),
            cache: Mutex::default(),
            next_id: AtomicU64::new(1),
            requests: AtomicU64::new(0),
        }
    }

    /// Block tag or number passed to every query.
    pub fn with_block(mut self, block: impl Into<String>) -> Self {
        self.block = block.into();
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    /// Requests sent so far.
    pub fn request_count(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    fn cache(&self) -> MutexGuard<'_, Cache> {
        // The cache only holds fully decoded values, so a poisoned lock
        // still holds consistent data.
        self.cache.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn call(&self, method: &str, params: Value) -> Result<Value, StateError> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let body = json!({"jsonrpc": "2.0", "id": id, "method": method, "params": params});
        self.requests.fetch_add(1, Ordering::Relaxed);
        let network = |message: String| StateError::Network {
            endpoint: self.endpoint.clone(),
            message,
        };
        let text = match self
            .agent
            .post(&self.endpoint)
            .set("Content-Type", "application/json")
            .send_string(&body.to_string())
        {
            Ok(resp) => resp.into_string().map_err(|e| network(e.to_string()))?,
            // Nodes often send the error object with a non-200 status.
            Err(ureq::Error::Status(code, resp)) => {
                let text = resp.into_string().unwrap_or_default();
                if serde_json::from_str::<Value>(&text).map(|v| v.get("error").is_none()).unwrap_or(true) {
                    return Err(network(format!("HTTP status {code}")));
                }
                text
            }
            Err(e) => return Err(network(e.to_string())),
        };
        let mut reply: Value = serde_json::from_str(&text).map_err(|e| StateError::Decode(e.to_string()))?;
        if let Some(err) = reply.get("error") {
            return Err(StateError::Remote {
                code: err.get("code").and_then(Value::as_i64).unwrap_or(0),
                message: err
                    .get("message")
                    .and_then(Value::as_str)
                    .unwrap_or("unknown error")
                    .to_string(),
            });
        }
        match reply.get_mut("result").map(Value::take) {
            Some(Value::String(s)) => Ok(Value::String(s)),
            Some(other) => Err(StateError::Decode(format!("{method}: expected a hex string, got {other}"))),
            None => Err(StateError::Decode(format!("{method}: reply has no result"))),
        }
    }

    fn call_word(&self, method: &str, params: Value) -> Result<Word, StateError> {
        let v = self.call(method, params)?;
        let s = v.as_str().unwrap_or_default();
        parse_word_hex(s).map_err(|e| StateError::Decode(format!("{method}: {e}")))
    }

    /// Loads the requested parts of one account into the cache.
    pub fn fetch(&self, address: &Address, needed: &Needed) -> Result<(), StateError> {
        if needed.code {
            self.code(address)?;
        }
        if needed.balance {
            self.balance(address)?;
        }
        for key in &needed.storage {
            self.storage(address, key)?;
        }
        Ok(())
    }
}

impl StateReader for RemoteState {
    fn balance(&self, address: &Address) -> Result<Word, StateError> {
        if let Some(b) = self.cache().balances.get(address) {
            return Ok(*b);
        }
        let b = self.call_word("eth_getBalance", json!([address.to_string(), self.block]))?;
        self.cache().balances.insert(*address, b);
        Ok(b)
    }

    fn code(&self, address: &Address) -> Result<Vec<u8>, StateError> {
        if let Some(c) = self.cache().code.get(address) {
            return Ok(c.clone());
        }
        let v = self.call("eth_getCode", json!([address.to_string(), self.block]))?;
        let code = decode_hex(v.as_str().unwrap_or_default())
            .map_err(|e| StateError::Decode(format!("eth_getCode: {e}")))?;
        self.cache().code.insert(*address, code.clone());
        Ok(code)
    }

    fn storage(&self, address: &Address, key: &Word) -> Result<Word, StateError> {
        if let Some(v) = self.cache().storage.get(&(*address, *key)) {
            return Ok(*v);
        }
        let v = self.call_word(
            "eth_getStorageAt",
            json!([address.to_string(), word_hex(key), self.block]),
        )?;
        self.cache().storage.insert((*address, *key), v);
        Ok(v)
    }
}
