//! `easyflow`: classify a transaction by integer overflow behavior.
//!
//! Exit status: 0 safe, 10 manifested overflow, 11 protected overflow,
//! 12 potential overflow triggered, 13 potential overflow not triggered,
//! 2 usage error, 3 runtime error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use easyflow_core::driver::{analyze, run_tainted, Analysis, AnalysisConfig, Format, Verdict};
use easyflow_core::evm::{Env, Transaction, DEFAULT_CALLEE, DEFAULT_GAS_LIMIT, DEFAULT_SENDER};
use easyflow_core::fixtures;
use easyflow_core::protection::{builtin_templates, parse_templates};
use easyflow_core::rpc::{RemoteState, DEFAULT_BLOCK_TAG};
use easyflow_core::state::{LayeredState, StateReader, WorldState};
use easyflow_core::txgen::{CandidateConfig, DEFAULT_CAP};
use easyflow_core::word::{decode_hex, parse_word, Address, Word};

const EXIT_USAGE: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn exit_code(v: Verdict) -> u8 {
    match v {
        Verdict::Safe => 0,
        Verdict::ManifestedOverflow => 10,
        Verdict::ProtectedOverflow => 11,
        Verdict::PotentialOverflowTriggered => 12,
        Verdict::PotentialOverflowNotTriggered => 13,
    }
}

#[derive(Parser)]
#[command(name = "easyflow", version, about = "Taint-tracking overflow analysis of EVM transactions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analyze one transaction and, for potential overflows, generated
    /// candidates.
    Analyze {
        #[command(flatten)]
        tx: TxArgs,
        #[command(flatten)]
        analysis: AnalysisArgs,
        #[command(flatten)]
        out: OutputArgs,
    },
    /// Execute one transaction with taint tracking and write its trace log.
    Trace {
        #[command(flatten)]
        tx: TxArgs,
        /// Write the log to this directory instead of stdout.
        #[arg(long)]
        trace_dir: Option<PathBuf>,
    },
    /// List the bundled examples, or analyze one.
    Examples {
        name: Option<String>,
        #[command(flatten)]
        analysis: AnalysisArgs,
        #[command(flatten)]
        out: OutputArgs,
    },
}

#[derive(Args)]
struct TxArgs {
    /// Runtime bytecode as hex.
    #[arg(long, required_unless_present = "code_file", conflicts_with = "code_file")]
    code: Option<String>,
    /// File holding runtime bytecode, as hex text or raw bytes.
    #[arg(long)]
    code_file: Option<PathBuf>,
    /// Calldata as 0x-hex.
    #[arg(long, default_value = "0x")]
    data: String,
    /// Message value, decimal or 0x-hex.
    #[arg(long, default_value = "0")]
    value: String,
    #[arg(long, default_value_t = DEFAULT_SENDER)]
    sender: Address,
    /// Address the code runs at.
    #[arg(long, default_value_t = DEFAULT_CALLEE)]
    to: Address,
    /// State file; entries here take precedence over the node.
    #[arg(long)]
    state: Option<PathBuf>,
    /// JSON-RPC endpoint used for state missing from the state file.
    #[arg(long, env = "EASYFLOW_RPC")]
    rpc: Option<String>,
    /// Block tag or number for node queries.
    #[arg(long, default_value = DEFAULT_BLOCK_TAG)]
    rpc_block: String,
    #[arg(long, default_value_t = DEFAULT_GAS_LIMIT)]
    gas: u64,
    #[arg(long)]
    block_number: Option<String>,
    #[arg(long)]
    block_time: Option<String>,
}

#[derive(Args)]
struct AnalysisArgs {
    /// Maximum number of generated candidates.
    #[arg(long, default_value_t = DEFAULT_CAP, value_parser = clap::value_parser!(usize))]
    cap: usize,
    /// Also try each calldata word's original value.
    #[arg(long)]
    keep_original_words: bool,
    /// Execute every candidate even after one triggers.
    #[arg(long)]
    no_early_exit: bool,
    /// Protection template file (TOML) replacing the built-in set.
    #[arg(long)]
    templates: Option<PathBuf>,
}

#[derive(Args)]
struct OutputArgs {
    /// Write the report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write one trace log per executed transaction into this directory.
    #[arg(long)]
    trace_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Human)]
    format: OutputFormat,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutputFormat {
    Machine,
    Human,
}

/// Errors that should exit with the usage status.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn parse_hex_arg(name: &str, s: &str) -> Result<Vec<u8>> {
    decode_hex(s.trim()).map_err(|e| usage(format!("--{name}: {e}")))
}

fn parse_word_arg(name: &str, s: &str) -> Result<Word> {
    parse_word(s.trim()).map_err(|e| usage(format!("--{name}: {e}")))
}

fn load_code(args: &TxArgs) -> Result<Vec<u8>> {
    if let Some(hex) = &args.code {
        return parse_hex_arg("code", hex);
    }
    let path = args.code_file.as_ref().expect("clap requires a code source");
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    match std::str::from_utf8(&bytes).ok().map(|t| decode_hex(t.trim())) {
        Some(Ok(code)) => Ok(code),
        _ => Ok(bytes),
    }
}

struct Setup {
    code: Vec<u8>,
    tx: Transaction,
    env: Env,
    local: WorldState,
    remote: Option<RemoteState>,
}

impl Setup {
    fn from_args(args: &TxArgs) -> Result<Self> {
        let code = load_code(args)?;
        let mut tx = Transaction::new(
            args.sender,
            args.to,
            parse_hex_arg("data", &args.data)?,
            parse_word_arg("value", &args.value)?,
        );
        tx.gas_limit = args.gas;
        let mut env = Env::default();
        if let Some(n) = &args.block_number {
            env.number = parse_word_arg("block-number", n)?;
        }
        if let Some(t) = &args.block_time {
            env.timestamp = parse_word_arg("block-time", t)?;
        }
        let local = match &args.state {
            Some(p) => WorldState::load_file(p).with_context(|| format!("state file {}", p.display()))?,
            None => WorldState::new(),
        };
        let remote = args
            .rpc
            .as_ref()
            .map(|url| RemoteState::new(url.clone()).with_block(args.rpc_block.clone()));
        Ok(Self {
            code,
            tx,
            env,
            local,
            remote,
        })
    }

    fn with_state<T>(&self, f: impl FnOnce(&dyn StateReader) -> T) -> T {
        match &self.remote {
            Some(remote) => f(&LayeredState {
                local: &self.local,
                fallback: remote,
            }),
            None => f(&self.local),
        }
    }
}

fn analysis_config(args: &AnalysisArgs, env: Env, record_traces: bool) -> Result<AnalysisConfig> {
    if args.cap == 0 {
        bail!(usage("--cap must be at least 1"));
    }
    let templates = match &args.templates {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            parse_templates(&text).map_err(|e| usage(format!("--templates: {e}")))?
        }
        None => builtin_templates(),
    };
    Ok(AnalysisConfig {
        env,
        candidates: CandidateConfig {
            cap: args.cap,
            keep_original_words: args.keep_original_words,
        },
        early_exit: !args.no_early_exit,
        record_traces,
        templates,
    })
}

fn write_traces(dir: &Path, analysis: &Analysis) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    for (id, log) in &analysis.traces {
        log.write(&dir.join(format!("{id}.json")))?;
    }
    Ok(())
}

fn emit_report(analysis: &Analysis, out: &OutputArgs) -> Result<u8> {
    let format = match out.format {
        OutputFormat::Machine => Format::Machine,
        OutputFormat::Human => Format::Human,
    };
    if let Some(dir) = &out.trace_dir {
        write_traces(dir, analysis)?;
    }
    let text = easyflow_core::driver::render_report(&analysis.report, format);
    match &out.report {
        Some(p) => fs::write(p, &text).with_context(|| format!("cannot write {}", p.display()))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(exit_code(analysis.report.verdict))
}

fn cmd_analyze(tx: &TxArgs, analysis: &AnalysisArgs, out: &OutputArgs) -> Result<u8> {
    let setup = Setup::from_args(tx)?;
    let config = analysis_config(analysis, setup.env.clone(), out.trace_dir.is_some())?;
    let result = setup.with_state(|state| analyze(&setup.code, &setup.tx, state, &config))?;
    emit_report(&result, out)
}

fn cmd_trace(tx: &TxArgs, trace_dir: Option<&Path>) -> Result<u8> {
    let setup = Setup::from_args(tx)?;
    let run = setup.with_state(|state| run_tainted(&setup.code, &setup.tx, state, &setup.env, true))?;
    let log = run.trace_log(&setup.tx);
    match trace_dir {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
            let path = dir.join("tx-0000.json");
            log.write(&path)?;
            eprintln!("wrote {}", path.display());
        }
        None => println!("{}", log.to_json()),
    }
    Ok(0)
}

fn cmd_examples(name: Option<&str>, analysis: &AnalysisArgs, out: &OutputArgs) -> Result<u8> {
    let Some(name) = name else {
        for f in fixtures::all() {
            println!("{:<20} {:<5} {}", f.name, f.expected.abbreviation(), f.description);
        }
        return Ok(0);
    };
    let f = fixtures::by_name(name).ok_or_else(|| {
        let names: Vec<_> = fixtures::all().iter().map(|f| f.name).collect();
        usage(format!("unknown example {name:?}; available: {}", names.join(", ")))
    })?;
    let config = analysis_config(analysis, Env::default(), out.trace_dir.is_some())?;
    let result = analyze(&f.code, &f.tx, &f.state, &config)?;
    emit_report(&result, out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Analyze { tx, analysis, out } => cmd_analyze(tx, analysis, out),
        Command::Trace { tx, trace_dir } => cmd_trace(tx, trace_dir.as_deref()),
        Command::Examples { name, analysis, out } => cmd_examples(name.as_deref(), analysis, out),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::from(EXIT_RUNTIME)
            }
        }
    }
}
