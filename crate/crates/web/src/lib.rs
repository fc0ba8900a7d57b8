//! wasm bindings for the static demo page in `www/`.
//!
//! Every export takes and returns strings: hex for bytecode and calldata,
//! JSON for structured results. Errors come back as thrown strings.

use easyflow_core::asm::assemble;
use easyflow_core::driver::{analyze, run_tainted, AnalysisConfig, Format};
use easyflow_core::evm::{Env, Transaction, DEFAULT_CALLEE, DEFAULT_SENDER};
use easyflow_core::fixtures;
use easyflow_core::state::WorldState;
use easyflow_core::tracelog::TxSummary;
use easyflow_core::txgen::{generate_candidates, CandidateConfig};
use easyflow_core::word::{decode_hex, encode_hex, parse_word, word_hex};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn transaction(data: &str, value: &str) -> Result<Transaction, String> {
    let calldata = decode_hex(data.trim()).map_err(|e| format!("calldata: {e}"))?;
    let value = parse_word(if value.trim().is_empty() { "0" } else { value.trim() })
        .map_err(|e| format!("value: {e}"))?;
    Ok(Transaction::new(DEFAULT_SENDER, DEFAULT_CALLEE, calldata, value))
}

fn state(json: &str) -> Result<WorldState, String> {
    if json.trim().is_empty() {
        return Ok(WorldState::new());
    }
    WorldState::from_json_str(json).map_err(|e| format!("state: {e}"))
}

/// Accepts hex bytecode, or assembly when the text is not hex.
fn bytecode(code: &str) -> Result<Vec<u8>, String> {
    match decode_hex(code.trim()) {
        Ok(b) => Ok(b),
        Err(_) => assemble(code).map_err(|e| format!("code: {e}")),
    }
}

pub fn examples_json() -> String {
    let list: Vec<_> = fixtures::all()
        .into_iter()
        .map(|f| {
            json!({
                "name": f.name,
                "description": f.description,
                "expected": f.expected.as_str(),
                "abbreviation": f.expected.abbreviation(),
                "source": f.source,
                "code": encode_hex(&f.code),
                "data": encode_hex(&f.tx.calldata),
                "value": word_hex(&f.tx.value),
                "state": if f.state.accounts().is_empty() { String::new() } else { f.state.to_json_string() },
            })
        })
        .collect();
    serde_json::to_string(&list).expect("examples serialize")
}

pub fn analyze_text(code: &str, data: &str, value: &str, state_json: &str, human: bool) -> Result<String, String> {
    let code = bytecode(code)?;
    let tx = transaction(data, value)?;
    let state = state(state_json)?;
    let analysis = analyze(&code, &tx, &state, &AnalysisConfig::default()).map_err(err)?;
    let format = if human { Format::Human } else { Format::Machine };
    Ok(easyflow_core::driver::render_report(&analysis.report, format))
}

pub fn trace_text(code: &str, data: &str, value: &str, state_json: &str) -> Result<String, String> {
    let code = bytecode(code)?;
    let tx = transaction(data, value)?;
    let state = state(state_json)?;
    let run = run_tainted(&code, &tx, &state, &Env::default(), true).map_err(err)?;
    Ok(run.trace_log(&tx).to_json())
}

pub fn candidates_text(data: &str, value: &str, cap: usize) -> Result<String, String> {
    let tx = transaction(data, value)?;
    let config = CandidateConfig {
        cap: cap.max(1),
        ..CandidateConfig::default()
    };
    let generated = generate_candidates(&tx, config);
    let total = generated.total();
    let list: Vec<TxSummary> = generated.map(|t| TxSummary::from(&t)).collect();
    Ok(serde_json::to_string(&json!({
        "total": total.to_string(),
        "candidates": list,
    }))
    .expect("candidates serialize"))
}

#[wasm_bindgen]
pub fn examples() -> String {
    examples_json()
}

/// Runs the full analysis and returns the report, JSON or human text.
#[wasm_bindgen(js_name = analyze)]
pub fn analyze_js(code: &str, data: &str, value: &str, state_json: &str, human: bool) -> Result<String, JsValue> {
    analyze_text(code, data, value, state_json, human).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn trace(code: &str, data: &str, value: &str, state_json: &str) -> Result<String, JsValue> {
    trace_text(code, data, value, state_json).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn candidates(data: &str, value: &str, cap: usize) -> Result<String, JsValue> {
    candidates_text(data, value, cap).map_err(|e| JsValue::from_str(&e))
}
