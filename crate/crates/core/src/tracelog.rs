//! Per-transaction trace logs: every executed step with its stack and taint
//! flags, plus the arithmetic events.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{ArithmeticEvent, EventKind, Protection};
use crate::evm::{ExecutionOutcome, Transaction};
use crate::word::{serde_bytes_hex, serde_word, word_hex, Address, Word};

pub const TRACE_LOG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxSummary {
    pub to: Address,
    pub from: Address,
    #[serde(with = "serde_bytes_hex")]
    pub data: Vec<u8>,
    #[serde(with = "serde_word")]
    pub value: Word,
}

impl From<&Transaction> for TxSummary {
    fn from(tx: &Transaction) -> Self {
        Self {
            to: tx.callee,
            from: tx.sender,
            data: tx.calldata.clone(),
            value: tx.value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub pc: usize,
    pub op: String,
    #[serde(with = "serde_word")]
    pub a: Word,
    #[serde(with = "serde_word")]
    pub b: Word,
    #[serde(with = "serde_word")]
    pub result: Word,
    pub tainted: [bool; 2],
    pub wrapped: bool,
    pub kind: EventKind,
    pub protection: Protection,
}

impl From<&ArithmeticEvent> for EventRecord {
    fn from(e: &ArithmeticEvent) -> Self {
        Self {
            pc: e.pc,
            op: e.op.name().to_string(),
            a: e.a,
            b: e.b,
            result: e.result,
            tainted: e.tainted(),
            wrapped: e.wrapped,
            kind: e.kind,
            protection: e.protection,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStep {
    pub pc: usize,
    pub op: String,
    pub gas: u64,
    /// Top of stack first.
    #[serde(with = "word_list")]
    pub stack: Vec<Word>,
    pub taint: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceLog {
    pub version: u32,
    pub tx: TxSummary,
    pub outcome: String,
    pub steps: Vec<TraceStep>,
    pub events: Vec<EventRecord>,
}

mod word_list {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ws: &[Word], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(ws.iter().map(word_hex))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Word>, D::Error> {
        #[derive(Deserialize)]
        struct W(#[serde(with = "serde_word")] Word);
        Ok(Vec::<W>::deserialize(d)?.into_iter().map(|w| w.0).collect())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TraceLogError {
    #[error("trace log schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("cannot write trace log to {path}: {source}")]
    Sink {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Builds the log of one execution. `outcome.trace` must have been recorded.
pub fn emit_trace_log(tx: &Transaction, outcome: &ExecutionOutcome, events: &[ArithmeticEvent]) -> TraceLog {
    TraceLog {
        version: TRACE_LOG_VERSION,
        tx: tx.into(),
        outcome: outcome.halt.as_str().to_string(),
        steps: outcome
            .trace
            .iter()
            .map(|s| TraceStep {
                pc: s.pc,
                op: s.op.name().to_string(),
                gas: s.gas,
                stack: s.stack.clone(),
                taint: s.taint.clone(),
            })
            .collect(),
        events: events.iter().map(EventRecord::from).collect(),
    }
}

impl TraceLog {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace log serializes")
    }

    pub fn write(&self, path: &Path) -> Result<(), TraceLogError> {
        std::fs::write(path, self.to_json() + "\n").map_err(|source| TraceLogError::Sink {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Parses a trace log. Unknown top-level keys are ignored.
pub fn parse_trace_log(text: &str) -> Result<TraceLog, TraceLogError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let log: TraceLog = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let message = inner.to_string();
        // Missing fields are reported at their parent; name them instead.
        let path = match message.strip_prefix("missing field `").and_then(|m| m.split('`').next()) {
            Some(field) if path == "." => field.to_string(),
            Some(field) => format!("{path}.{field}"),
            None => path,
        };
        TraceLogError::Schema { path, message }
    })?;
    if log.version != TRACE_LOG_VERSION {
        return Err(TraceLogError::Schema {
            path: "version".into(),
            message: format!("unsupported version {}", log.version),
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::assemble;
    use crate::detector::OverflowInspector;
    use crate::evm::{execute, Env};
    use crate::state::WorldState;

    fn run(src: &str, calldata: Vec<u8>) -> TraceLog {
        let code = assemble(src).unwrap();
        let tx = Transaction::new(Address::from_low_u64(1), Address::from_low_u64(2), calldata, Word::zero());
        let mut insp = OverflowInspector::new();
        let out = execute(&code, &tx, &WorldState::new(), &Env::default(), true, &mut insp).unwrap();
        emit_trace_log(&tx, &out, &insp.events)
    }

    #[test]
    fn three_steps() {
        let log = run("PUSH1 1 PUSH1 2 STOP", vec![]);
        assert_eq!(log.steps.len(), 3);
        assert!(log.events.is_empty());
        assert_eq!(log.outcome, "stop");
        assert_eq!(log.steps[2].stack, vec![Word::from(2), Word::from(1)]);
    }

    #[test]
    fn round_trip_and_taint_flags() {
        let log = run("PUSH1 0 CALLDATALOAD PUSH1 1 ADD STOP", vec![0xff; 32]);
        assert_eq!(log.events.len(), 1);
        assert_eq!(log.events[0].kind, EventKind::TaintedWrap);
        assert_eq!(log.steps[3].taint, vec![false, true]);
        assert_eq!(parse_trace_log(&log.to_json()).unwrap(), log);
    }

    #[test]
    fn missing_steps_names_the_field() {
        let mut v: serde_json::Value = serde_json::from_str(&run("STOP", vec![]).to_json()).unwrap();
        v.as_object_mut().unwrap().remove("steps");
        match parse_trace_log(&v.to_string()) {
            Err(TraceLogError::Schema { path, .. }) => assert_eq!(path, "steps"),
            other => panic!("{other:?}"),
        }
        v["steps"] = serde_json::json!([{"pc": 0, "op": "STOP", "gas": "x", "stack": [], "taint": []}]);
        match parse_trace_log(&v.to_string()) {
            Err(TraceLogError::Schema { path, .. }) => assert_eq!(path, "steps[0].gas"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_top_level_keys_are_ignored() {
        let log = run("STOP", vec![]);
        let mut v: serde_json::Value = serde_json::from_str(&log.to_json()).unwrap();
        v["producer"] = "someone else".into();
        assert_eq!(parse_trace_log(&v.to_string()).unwrap(), log);
    }

    #[test]
    fn unwritable_sink() {
        let dir = tempfile::tempdir().unwrap();
        let err = run("STOP", vec![]).write(&dir.path().join("missing/dir/log.json"));
        assert!(matches!(err, Err(TraceLogError::Sink { .. })));
    }
}
