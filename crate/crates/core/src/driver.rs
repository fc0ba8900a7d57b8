//! The analysis pipeline: run the transaction with taint tracking, classify
//! its arithmetic events, and when only potential overflows were seen,
//! re-execute generated candidates to try to trigger them.
//!
//! Executions never write to the supplied state, so every candidate starts
//! from the same pre-state and the caller's state is untouched afterwards.

use std::fmt::Write as _;
#[cfg(not(all(target_arch = "wasm32", target_os = "unknown")))]
use std::time::Instant;

/// No clock on bare wasm; timings read as zero there.
#[cfg(all(target_arch = "wasm32", target_os = "unknown"))]
struct Instant;

#[cfg(all(target_arch = "wasm32", target_os = "unknown"))]
impl Instant {
    fn now() -> Self {
        Instant
    }

    fn elapsed(&self) -> std::time::Duration {
        std::time::Duration::ZERO
    }
}

use serde::{Deserialize, Serialize};

use crate::detector::{ArithmeticEvent, EventKind, OverflowInspector, Protection};
use crate::evm::{execute, Env, ExecError, ExecutionOutcome, NoopInspector, Transaction};
use crate::protection::{builtin_templates, classify_all, match_templates, ProtectionTemplate};
use crate::state::StateReader;
use crate::tracelog::{emit_trace_log, EventRecord, TraceLog, TxSummary};
use crate::txgen::{generate_candidates, CandidateConfig};
use crate::word::encode_hex;

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Safe,
    ManifestedOverflow,
    ProtectedOverflow,
    PotentialOverflowTriggered,
    PotentialOverflowNotTriggered,
}

impl Verdict {
    pub const ALL: [Verdict; 5] = [
        Verdict::Safe,
        Verdict::ManifestedOverflow,
        Verdict::ProtectedOverflow,
        Verdict::PotentialOverflowTriggered,
        Verdict::PotentialOverflowNotTriggered,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Safe => "safe",
            Verdict::ManifestedOverflow => "manifested_overflow",
            Verdict::ProtectedOverflow => "protected_overflow",
            Verdict::PotentialOverflowTriggered => "potential_overflow_triggered",
            Verdict::PotentialOverflowNotTriggered => "potential_overflow_not_triggered",
        }
    }

    pub fn abbreviation(self) -> &'static str {
        match self {
            Verdict::Safe => "S",
            Verdict::ManifestedOverflow => "MO",
            Verdict::ProtectedOverflow => "PO",
            Verdict::PotentialOverflowTriggered => "POT",
            Verdict::PotentialOverflowNotTriggered => "PONT",
        }
    }
}

/// What one execution's events say on their own, before any re-execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Finding {
    Manifested,
    Protected,
    Potential,
    Safe,
}

/// Strongest finding among `(kind, protection)` pairs: an unprotected wrap
/// beats a protected one, which beats a tainted operation that did not wrap.
pub fn finding<I: IntoIterator<Item = (EventKind, Protection)>>(events: I) -> Finding {
    events
        .into_iter()
        .map(|(kind, protection)| match kind {
            EventKind::TaintedWrap if protection == Protection::Protected => Finding::Protected,
            EventKind::TaintedWrap => Finding::Manifested,
            EventKind::TaintedNoWrap => Finding::Potential,
            EventKind::Untainted => Finding::Safe,
        })
        .min()
        .unwrap_or(Finding::Safe)
}

/// [`finding`] for a stored trace log.
pub fn offline_finding(log: &TraceLog) -> Finding {
    finding(log.events.iter().map(|e| (e.kind, e.protection)))
}

#[derive(Debug, Clone)]
pub struct AnalysisConfig {
    pub env: Env,
    pub candidates: CandidateConfig,
    /// Stop executing candidates after the first one that triggers.
    pub early_exit: bool,
    /// Keep full step traces and return trace logs.
    pub record_traces: bool,
    pub templates: Vec<ProtectionTemplate>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            env: Env::default(),
            candidates: CandidateConfig::default(),
            early_exit: true,
            record_traces: false,
            templates: builtin_templates(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportEvent {
    #[serde(flatten)]
    pub event: EventRecord,
    /// Static guard template matched around the instruction, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateReport {
    /// 1-based position in generation order.
    pub index: usize,
    pub tx: TxSummary,
    /// Halt reason; absent for skipped candidates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<String>,
    pub events: Vec<ReportEvent>,
    pub triggering: bool,
    pub skipped: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Steps of the original transaction without instrumentation.
    pub steps_plain: u64,
    pub steps_tainted: u64,
    pub step_ratio: f64,
    /// Wall time of the original transaction, plain and instrumented.
    pub plain_us: u64,
    pub tainted_us: u64,
    /// Whole analysis including candidates.
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub version: u32,
    pub verdict: Verdict,
    pub original: TxSummary,
    pub outcome: String,
    pub events: Vec<ReportEvent>,
    pub candidates: Vec<CandidateReport>,
    pub truncated: bool,
    pub timing: Timing,
    /// Findings outranked by the verdict, and other remarks.
    #[serde(default)]
    pub notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<String>,
}

impl AnalysisReport {
    /// 1-based index of the first triggering candidate.
    pub fn triggering_candidate(&self) -> Option<usize> {
        self.candidates.iter().find(|c| c.triggering).map(|c| c.index)
    }

    /// The report with all timing fields zeroed, for comparing runs.
    pub fn without_timing(&self) -> AnalysisReport {
        AnalysisReport {
            timing: Timing {
                steps_plain: self.timing.steps_plain,
                steps_tainted: self.timing.steps_tainted,
                step_ratio: self.timing.step_ratio,
                plain_us: 0,
                tainted_us: 0,
                wall_ms: 0,
            },
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub report: AnalysisReport,
    /// (trace id, log) for every executed transaction when traces were
    /// requested.
    pub traces: Vec<(String, TraceLog)>,
}

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("analysis aborted: {0}")]
    Execution(#[from] ExecError),
}

/// One instrumented execution with classified events.
#[derive(Debug, Clone)]
pub struct TaintedRun {
    pub outcome: ExecutionOutcome,
    pub events: Vec<ArithmeticEvent>,
}

impl TaintedRun {
    pub fn finding(&self) -> Finding {
        finding(self.events.iter().map(|e| (e.kind, e.protection)))
    }

    pub fn trace_log(&self, tx: &Transaction) -> TraceLog {
        emit_trace_log(tx, &self.outcome, &self.events)
    }
}

/// Executes `tx` with taint tracking and classifies protection of every
/// tainted wrap.
pub fn run_tainted(
    code: &[u8],
    tx: &Transaction,
    state: &dyn StateReader,
    env: &Env,
    record_trace: bool,
) -> Result<TaintedRun, ExecError> {
    let mut inspector = OverflowInspector::new();
    let outcome = execute(code, tx, state, env, record_trace, &mut inspector)?;
    let (mut events, evidence, _) = inspector.into_parts();
    if let Some(evidence) = evidence {
        classify_all(&mut events, &evidence);
    }
    Ok(TaintedRun { outcome, events })
}

fn report_events(code: &[u8], events: &[ArithmeticEvent], templates: &[ProtectionTemplate]) -> Vec<ReportEvent> {
    events
        .iter()
        .map(|e| ReportEvent {
            event: e.into(),
            template: if e.kind == EventKind::TaintedWrap {
                match_templates(code, e.pc, templates)
            } else {
                None
            },
        })
        .collect()
}

fn trace_id(index: usize) -> String {
    format!("tx-{index:04}")
}

fn pcs(events: &[ArithmeticEvent], pred: impl Fn(&ArithmeticEvent) -> bool) -> String {
    events
        .iter()
        .filter(|e| pred(e))
        .map(|e| format!("{} at pc {}", e.op.name(), e.pc))
        .collect::<Vec<_>>()
        .join(", ")
}

fn secondary_notes(events: &[ArithmeticEvent], primary: Finding) -> Vec<String> {
    let mut notes = Vec::new();
    let protected = |e: &ArithmeticEvent| e.kind == EventKind::TaintedWrap && e.protection == Protection::Protected;
    let potential = |e: &ArithmeticEvent| e.kind == EventKind::TaintedNoWrap;
    if primary == Finding::Manifested && events.iter().any(protected) {
        notes.push(format!("secondary finding: protected overflow ({})", pcs(events, protected)));
    }
    if primary < Finding::Potential && events.iter().any(potential) {
        notes.push(format!(
            "secondary finding: potential overflow ({}) not re-executed",
            pcs(events, potential)
        ));
    }
    let untainted = |e: &ArithmeticEvent| e.kind == EventKind::Untainted;
    if events.iter().any(untainted) {
        notes.push(format!("informational: wrap on untainted operands ({})", pcs(events, untainted)));
    }
    notes
}

pub fn analyze(
    code: &[u8],
    tx: &Transaction,
    state: &dyn StateReader,
    config: &AnalysisConfig,
) -> Result<Analysis, AnalysisError> {
    let started = Instant::now();
    let env = &config.env;

    let t = Instant::now();
    let plain = execute(code, tx, state, env, false, &mut NoopInspector)?;
    let plain_us = t.elapsed().as_micros() as u64;

    let t = Instant::now();
    let original = run_tainted(code, tx, state, env, config.record_traces)?;
    let tainted_us = t.elapsed().as_micros() as u64;

    let mut traces = Vec::new();
    let record = |traces: &mut Vec<(String, TraceLog)>, index: usize, tx: &Transaction, run: &TaintedRun| {
        if config.record_traces {
            traces.push((trace_id(index), run.trace_log(tx)));
            Some(trace_id(index))
        } else {
            None
        }
    };
    let original_trace = record(&mut traces, 0, tx, &original);

    let primary = original.finding();
    let mut notes = secondary_notes(&original.events, primary);
    let mut candidates = Vec::new();
    let mut truncated = false;
    let verdict = match primary {
        Finding::Manifested => Verdict::ManifestedOverflow,
        Finding::Protected => Verdict::ProtectedOverflow,
        Finding::Safe => Verdict::Safe,
        Finding::Potential => {
            let generated = generate_candidates(tx, config.candidates);
            truncated = generated.truncated();
            if truncated {
                notes.push(format!(
                    "candidate set truncated to {} of {}",
                    generated.len(),
                    generated.total()
                ));
            }
            let mut triggered = false;
            for (i, ctx) in generated.enumerate() {
                let index = i + 1;
                if triggered && config.early_exit {
                    candidates.push(CandidateReport {
                        index,
                        tx: (&ctx).into(),
                        outcome: None,
                        events: vec![],
                        triggering: false,
                        skipped: true,
                        trace: None,
                    });
                    continue;
                }
                let entry = match run_tainted(code, &ctx, state, env, config.record_traces) {
                    Ok(run) => {
                        let triggering = run.finding() == Finding::Manifested;
                        triggered |= triggering;
                        CandidateReport {
                            index,
                            tx: (&ctx).into(),
                            outcome: Some(run.outcome.halt.as_str().to_string()),
                            events: report_events(code, &run.events, &config.templates),
                            triggering,
                            skipped: false,
                            trace: record(&mut traces, index, &ctx, &run),
                        }
                    }
                    // A candidate that cannot run to a halt does not trigger.
                    Err(e) => CandidateReport {
                        index,
                        tx: (&ctx).into(),
                        outcome: Some(format!("error: {e}")),
                        events: vec![],
                        triggering: false,
                        skipped: false,
                        trace: None,
                    },
                };
                candidates.push(entry);
            }
            if triggered {
                Verdict::PotentialOverflowTriggered
            } else {
                Verdict::PotentialOverflowNotTriggered
            }
        }
    };

    let steps_tainted = original.outcome.steps;
    let report = AnalysisReport {
        version: REPORT_VERSION,
        verdict,
        original: tx.into(),
        outcome: original.outcome.halt.as_str().to_string(),
        events: report_events(code, &original.events, &config.templates),
        candidates,
        truncated,
        timing: Timing {
            steps_plain: plain.steps,
            steps_tainted,
            step_ratio: if plain.steps == 0 {
                1.0
            } else {
                steps_tainted as f64 / plain.steps as f64
            },
            plain_us,
            tainted_us,
            wall_ms: started.elapsed().as_millis() as u64,
        },
        notes,
        trace: original_trace,
    };
    Ok(Analysis { report, traces })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Machine,
    Human,
}

fn first_event(events: &[ReportEvent], kind: EventKind, protection: Option<Protection>) -> Option<&EventRecord> {
    events
        .iter()
        .map(|e| &e.event)
        .find(|e| e.kind == kind && protection.is_none_or(|p| e.protection == p))
}

fn describe(e: Option<&EventRecord>) -> String {
    match e {
        Some(e) => format!("{} at pc {}", e.op, e.pc),
        None => "an arithmetic instruction".into(),
    }
}

/// One sentence summarizing the verdict.
pub fn conclusion(report: &AnalysisReport) -> String {
    let executed = report.candidates.iter().filter(|c| !c.skipped).count();
    match report.verdict {
        Verdict::Safe => "The transaction is safe: no susceptible arithmetic ran on tainted operands.".into(),
        Verdict::ManifestedOverflow => format!(
            "The transaction manifests an integer overflow: {} wrapped on tainted operands and nothing reverted it.",
            describe(first_event(&report.events, EventKind::TaintedWrap, Some(Protection::Unprotected)))
        ),
        Verdict::ProtectedOverflow => format!(
            "The transaction contains a protected overflow: {} wrapped, and a check on its result reverted the transaction.",
            describe(first_event(&report.events, EventKind::TaintedWrap, Some(Protection::Protected)))
        ),
        Verdict::PotentialOverflowTriggered => format!(
            "The transaction has a potential overflow at {}, triggered by generated candidate {}.",
            describe(first_event(&report.events, EventKind::TaintedNoWrap, None)),
            report.triggering_candidate().unwrap_or(0)
        ),
        Verdict::PotentialOverflowNotTriggered => format!(
            "The transaction has a potential overflow at {}, but none of the {executed} generated candidates triggered it.",
            describe(first_event(&report.events, EventKind::TaintedNoWrap, None))
        ),
    }
}

fn event_cell(events: &[ReportEvent]) -> String {
    if events.is_empty() {
        return "-".into();
    }
    events
        .iter()
        .map(|e| {
            let mut s = format!("{}@{} {}", e.event.op, e.event.pc, e.event.kind.as_str());
            if e.event.protection != Protection::Unknown {
                let _ = write!(s, " ({})", e.event.protection.as_str());
            }
            s
        })
        .collect::<Vec<_>>()
        .join("; ")
}

pub fn render_report(report: &AnalysisReport, format: Format) -> String {
    match format {
        Format::Machine => serde_json::to_string_pretty(report).expect("report serializes") + "\n",
        Format::Human => render_human(report),
    }
}

/// Parses a machine-format report.
pub fn parse_report(text: &str) -> Result<AnalysisReport, serde_json::Error> {
    serde_json::from_str(text)
}

fn render_human(r: &AnalysisReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{}", conclusion(r));
    let _ = writeln!(out, "verdict: {} ({})", r.verdict.as_str(), r.verdict.abbreviation());
    let _ = writeln!(out);
    let _ = writeln!(out, "| # | input data | value | outcome | events | trace |");
    let _ = writeln!(out, "|---|---|---|---|---|---|");
    let mut row = |label: String, tx: &TxSummary, outcome: &str, events: &[ReportEvent], trace: Option<&str>| {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} |",
            label,
            encode_hex(&tx.data),
            crate::word::word_hex(&tx.value),
            outcome,
            event_cell(events),
            trace.unwrap_or("-")
        );
    };
    row("original".into(), &r.original, &r.outcome, &r.events, r.trace.as_deref());
    for c in &r.candidates {
        let mut label = c.index.to_string();
        if c.triggering {
            label.push_str(" (triggering)");
        }
        row(
            label,
            &c.tx,
            c.outcome.as_deref().unwrap_or("skipped"),
            &c.events,
            c.trace.as_deref(),
        );
    }
    if r.truncated {
        let _ = writeln!(out, "\ncandidate set was truncated");
    }
    for n in &r.notes {
        let _ = writeln!(out, "note: {n}");
    }
    let _ = writeln!(
        out,
        "\nsteps: {} plain, {} tainted (ratio {:.2}); time: {} us plain, {} us tainted, {} ms total",
        r.timing.steps_plain,
        r.timing.steps_tainted,
        r.timing.step_ratio,
        r.timing.plain_us,
        r.timing.tainted_us,
        r.timing.wall_ms
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const KINDS: [(EventKind, Protection); 4] = [
        (EventKind::Untainted, Protection::Unknown),
        (EventKind::TaintedWrap, Protection::Unprotected),
        (EventKind::TaintedWrap, Protection::Protected),
        (EventKind::TaintedNoWrap, Protection::Unknown),
    ];

    #[test]
    fn precedence_over_every_subset() {
        for mask in 0u8..16 {
            let present: Vec<_> = (0..4).filter(|i| mask & (1 << i) != 0).map(|i| KINDS[i]).collect();
            let has = |i: usize| mask & (1 << i) != 0;
            let expected = if has(1) {
                Finding::Manifested
            } else if has(2) {
                Finding::Protected
            } else if has(3) {
                Finding::Potential
            } else {
                Finding::Safe
            };
            assert_eq!(finding(present.iter().copied()), expected, "mask {mask:04b}");
            // Order and repetition do not matter.
            let mut shuffled: Vec<_> = present.iter().rev().copied().collect();
            shuffled.extend(present.iter().copied());
            assert_eq!(finding(shuffled), expected);
        }
    }

    #[test]
    fn verdict_strings_are_serde_names() {
        for v in Verdict::ALL {
            assert_eq!(serde_json::to_value(v).unwrap(), v.as_str());
        }
    }
}
