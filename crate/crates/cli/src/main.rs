//! `ttk`: key generation, identity registration, policy commitment, trace
//! logging, anchoring, verification, audit reports, ledger inspection and
//! scenario generation.
//!
//! Exit codes: 0 success or VALID; 1 a negative verdict (violations,
//! unverifiable evidence, invalid policy, refused operation); 2 usage error;
//! 3 unreadable or corrupt input.

mod commands;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "ttk", version, about = "Verifiable agent traces, policy commitments and audits")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate an Ed25519 key file.
    Keygen {
        #[arg(long)]
        out: PathBuf,
        /// 32-byte seed as 64 hex characters (deterministic, for testing).
        #[arg(long, value_parser = parse_seed)]
        seed_hex: Option<[u8; 32]>,
    },
    /// Identity registration and lookup.
    #[command(subcommand)]
    Id(IdCommand),
    /// Policy validation and commitment.
    #[command(subcommand)]
    Policy(PolicyCommand),
    /// Behavioral trace logging.
    #[command(subcommand)]
    Log(LogCommand),
    /// Merkle-batched anchoring of trace entries.
    #[command(subcommand)]
    Anchor(AnchorCommand),
    /// Ledger integrity and checkpoints.
    #[command(subcommand)]
    Ledger(LedgerCommand),
    /// Audit traces and print only the non-VALID findings.
    Verify(AuditArgs),
    /// Full audit reports.
    #[command(subcommand)]
    Audit(AuditCommand),
    /// Deterministic scenario generation.
    #[command(subcommand)]
    Scenario(ScenarioCommand),
}

#[derive(Debug, Args)]
struct LedgerArg {
    #[arg(long, env = "TTK_LEDGER")]
    ledger: PathBuf,
}

#[derive(Debug, Args)]
struct StoreArg {
    #[arg(long, env = "TTK_STORE")]
    store: PathBuf,
}

#[derive(Debug, Subcommand)]
enum IdCommand {
    /// Record a signed identity on the ledger.
    Register {
        #[arg(long)]
        key: PathBuf,
        #[command(flatten)]
        ledger: LedgerArg,
        /// JSON object with descriptive metadata.
        #[arg(long)]
        metadata: Option<PathBuf>,
        #[arg(long)]
        ts_ms: Option<i64>,
    },
    /// Look up a DID's registration state.
    Resolve {
        #[arg(long)]
        did: String,
        #[command(flatten)]
        ledger: LedgerArg,
    },
    /// Record a signed revocation on the ledger.
    Revoke {
        #[arg(long)]
        key: PathBuf,
        #[command(flatten)]
        ledger: LedgerArg,
        #[arg(long)]
        reason: String,
        #[arg(long)]
        ts_ms: Option<i64>,
    },
}

#[derive(Debug, Subcommand)]
enum PolicyCommand {
    /// Check a policy document for structural problems.
    Validate {
        #[arg(long)]
        policy: PathBuf,
    },
    /// Store a policy and record its signed hash on the ledger.
    Commit {
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[command(flatten)]
        ledger: LedgerArg,
        #[command(flatten)]
        store: StoreArg,
        #[arg(long)]
        ts_ms: Option<i64>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Class {
    Critical,
    Routine,
}

#[derive(Debug, Subcommand)]
enum LogCommand {
    /// Seal one action and append it to the agent's trace.
    Append {
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        policy_hash: String,
        #[arg(long)]
        action: String,
        /// JSON object of action parameters.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        ts_ms: Option<i64>,
        /// JSON object of context (e.g. jurisdiction, data_labels).
        #[arg(long)]
        ctx: Option<PathBuf>,
        /// Upstream entry as `<did>:<seq>:<hash>`; repeatable.
        #[arg(long = "ref", value_name = "AGENT:SEQ:HASH")]
        refs: Vec<String>,
        #[arg(long, value_enum, default_value = "routine")]
        anchor_class: Class,
    },
}

#[derive(Debug, Subcommand)]
enum AnchorCommand {
    /// Anchor entries not yet covered by the ledger.
    Flush {
        /// Glob matching trace files.
        #[arg(long)]
        traces: String,
        #[command(flatten)]
        ledger: LedgerArg,
        /// Submitter key file.
        #[arg(long)]
        key: PathBuf,
        /// `every-n:N`, `critical[:N]` or `manual`.
        #[arg(long, default_value = "manual")]
        strategy: String,
        #[arg(long)]
        ts_ms: Option<i64>,
    },
}

#[derive(Debug, Subcommand)]
enum LedgerCommand {
    /// Recompute every record hash and link.
    Verify {
        #[command(flatten)]
        ledger: LedgerArg,
    },
    /// Print the latest record's index and hash.
    Checkpoint {
        #[command(flatten)]
        ledger: LedgerArg,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Interchange,
    Text,
}

#[derive(Debug, Args)]
struct AuditArgs {
    /// Glob matching trace files.
    #[arg(long)]
    traces: String,
    #[command(flatten)]
    ledger: LedgerArg,
    #[command(flatten)]
    store: StoreArg,
    #[arg(long, value_enum, default_value = "interchange")]
    format: Format,
}

#[derive(Debug, Subcommand)]
enum AuditCommand {
    /// Audit traces and emit the full report.
    Report {
        #[command(flatten)]
        audit: AuditArgs,
        /// Write the report here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScenarioName {
    Pharma,
    Legal,
}

#[derive(Debug, Subcommand)]
enum ScenarioCommand {
    /// Generate a scenario directory with its expected-findings manifest.
    Run {
        #[arg(value_enum)]
        name: ScenarioName,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Inject a named fault; repeatable.
        #[arg(long = "fault", value_parser = clap::builder::PossibleValuesParser::new(ttk_core::scenarios::FAULT_NAMES))]
        faults: Vec<String>,
    },
}

fn parse_seed(s: &str) -> Result<[u8; 32], String> {
    ttk_core::canonical::parse_lower_hex::<32>(s).map_err(|e| e.to_string())
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match commands::dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("ttk: {}", e.message);
            e.code
        }
    }
}

fn main() {
    std::process::exit(run(std::env::args_os()));
}
