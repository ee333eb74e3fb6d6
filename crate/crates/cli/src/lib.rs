//! `tracechain` command-line front end.
//!
//! Every command returns an [`Outcome`] holding its text and JSON renderings
//! and an exit code; `main` only prints it. Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success, or verification passed |
//! | 1 | verification ran and failed (anomaly, failed verdict, unanchored file, chain integrity) |
//! | 2 | operational error: bad input, refused command, missing files |

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use thiserror::Error;
use tracechain_core::identity::IdentityError;
use tracechain_core::ledger::LedgerError;
use tracechain_core::record::{RecordError, Timestamp};
use tracechain_core::store::StoreError;
use tracechain_core::trace::TraceError;
use tracechain_core::{Digest32, Exec, IdentityId, ProductId};

pub use config::{CliConfig, OutputFormat, Settings};

pub const EXIT_OK: u8 = 0;
pub const EXIT_VERIFY_FAILED: u8 = 1;
pub const EXIT_ERROR: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "tracechain", version, about = "Anchor and verify signed product trace records")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Config file of `key = value` lines (default: <home>/config if present).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base directory for default store, chain and keystore paths.
    #[arg(long, global = true)]
    pub home: Option<PathBuf>,
    #[arg(long, global = true)]
    pub store: Option<PathBuf>,
    #[arg(long, global = true)]
    pub chain: Option<PathBuf>,
    #[arg(long, global = true)]
    pub keystore: Option<PathBuf>,
    /// Identity id used to sign records and attestations.
    #[arg(long, global = true)]
    pub signer: Option<IdentityId>,
    #[arg(long, global = true, value_enum)]
    pub output: Option<OutputFormat>,
    /// Attestations required before a signer may initialize a product.
    #[arg(long, global = true)]
    pub threshold: Option<usize>,
    #[arg(long, global = true)]
    pub block_interval: Option<u64>,
    #[arg(long, global = true)]
    pub confirmation_depth: Option<u64>,
    #[arg(long, global = true)]
    pub base_fee: Option<u64>,
    #[arg(long, global = true)]
    pub per_byte_fee: Option<u64>,
    /// Disable data-parallel verification.
    #[arg(long, global = true)]
    pub sequential: bool,
}

impl GlobalArgs {
    fn settings(&self) -> Settings {
        Settings {
            home: self.home.clone(),
            store: self.store.clone(),
            chain: self.chain.clone(),
            keystore: self.keystore.clone(),
            signer: self.signer,
            threshold: self.threshold,
            output: self.output,
            block_interval: self.block_interval,
            confirmation_depth: self.confirmation_depth,
            base_fee: self.base_fee,
            per_byte_fee: self.per_byte_fee,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create a key pair and signed profile; publish the public key.
    Keygen {
        /// Company name recorded in the profile.
        #[arg(long)]
        name: Option<String>,
        /// Extra profile attributes.
        #[arg(long = "info", value_parser = parse_pair)]
        info: Vec<(String, String)>,
    },
    /// Vouch for another identity as the current signer.
    Attest { subject: IdentityId, statement: String },
    #[command(subcommand)]
    Product(ProductCommand),
    /// Turn a JSON Lines file of device events into updates.
    Ingest { events: PathBuf },
    /// Verify a product's history, or find products by current state.
    Trace {
        #[arg(required_unless_present = "criteria", conflicts_with = "criteria")]
        product: Option<ProductId>,
        #[arg(long = "criteria", value_parser = parse_pair, num_args = 1..)]
        criteria: Vec<(String, String)>,
    },
    /// History of a state back to its product's init record.
    Backward { digest: Digest32 },
    /// Check a record file against the ledger by hash.
    Verify { file: PathBuf },
    #[command(subcommand)]
    Ledger(LedgerCommand),
}

#[derive(Debug, Subcommand)]
pub enum ProductCommand {
    /// Anchor a product's spec: the fields every update must carry.
    Init {
        product: ProductId,
        #[arg(long = "required")]
        required: Vec<String>,
        #[arg(long = "optional")]
        optional: Vec<String>,
        /// Record timestamp (default: now).
        #[arg(long)]
        at: Option<Timestamp>,
    },
    /// Anchor a new state for a product.
    Update {
        product: ProductId,
        #[arg(long = "set", value_parser = parse_pair, required = true)]
        fields: Vec<(String, String)>,
        #[arg(long)]
        at: Option<Timestamp>,
    },
    /// Declare an earlier update false.
    Revoke {
        product: ProductId,
        target: Digest32,
        #[arg(long)]
        reason: Option<String>,
        #[arg(long)]
        at: Option<Timestamp>,
    },
}

#[derive(Debug, Subcommand)]
pub enum LedgerCommand {
    /// Move the virtual clock forward, producing due blocks.
    Advance {
        #[arg(long)]
        seconds: u64,
    },
    /// Inclusion status and confirmations of a transaction.
    Status { txid: Digest32 },
    /// Re-hash the chain file from genesis.
    Integrity,
}

fn parse_pair(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected name=value, got {s:?}"))?;
    if k.is_empty() {
        return Err(format!("empty field name in {s:?}"));
    }
    Ok((k.to_string(), v.to_string()))
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("no signer given (use --signer or `signer` in the config file)")]
    NoSigner,
    #[error("signer {signer} has {score} attestation(s); {threshold} required")]
    ThresholdNotMet {
        signer: IdentityId,
        score: usize,
        threshold: usize,
    },
    #[error("product {0} already has an init record")]
    DuplicateInit(ProductId),
    #[error("signer {signer} is not the init signer {expected} of product {product}")]
    NotAuthorized {
        product: ProductId,
        signer: IdentityId,
        expected: IdentityId,
    },
    #[error("update for {product} is missing required field(s): {}", missing.join(", "))]
    SpecViolation { product: ProductId, missing: Vec<String> },
    #[error("{target} is not an update in the chain of product {product}")]
    UnknownTarget { product: ProductId, target: Digest32 },
    #[error("timestamp {at} precedes the chain tip at {tip}")]
    TimestampRegression { at: Timestamp, tip: Timestamp },
    #[error("chain of product {0} is forked; refusing to extend it")]
    Forked(ProductId),
    #[error("chain of product {0} cannot be read: {1}")]
    ChainUnreadable(ProductId, String),
    #[error("chain file {0} does not exist")]
    NoChain(PathBuf),
    #[error("cannot read {path}: {source}")]
    FileUnreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    InvalidEvent(String),
    #[error(transparent)]
    Identity(#[from] IdentityError),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::NoSigner => "no_signer",
            CliError::ThresholdNotMet { .. } => "threshold_not_met",
            CliError::DuplicateInit(_) => "duplicate_init",
            CliError::NotAuthorized { .. } => "not_authorized",
            CliError::SpecViolation { .. } => "spec_violation",
            CliError::UnknownTarget { .. } => "unknown_target",
            CliError::TimestampRegression { .. } => "timestamp_regression",
            CliError::Forked(_) => "forked",
            CliError::ChainUnreadable(..) => "chain_unreadable",
            CliError::NoChain(_) => "no_chain",
            CliError::FileUnreadable { .. } => "file_unreadable",
            CliError::InvalidEvent(_) => "invalid_event",
            CliError::Identity(IdentityError::UnknownIdentity(_)) => "unknown_identity",
            CliError::Identity(IdentityError::SelfAttestation(_)) => "self_attestation",
            CliError::Identity(_) => "identity",
            CliError::Record(_) => "record",
            CliError::Ledger(LedgerError::UnknownTx(_)) => "unknown_tx",
            CliError::Ledger(_) => "ledger",
            CliError::Store(_) => "store",
            CliError::Trace(TraceError::NoInitRecord(_)) => "no_init_record",
            CliError::Trace(TraceError::UnknownDigest(_)) => "unknown_digest",
            CliError::Trace(_) => "trace",
        }
    }

    pub fn to_json(&self) -> Value {
        let mut v = json!({ "kind": self.kind(), "message": self.to_string() });
        if let CliError::SpecViolation { missing, .. } = self {
            v["missing"] = json!(missing);
        }
        v
    }
}

/// A finished command: what to print and how to exit.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub command: &'static str,
    pub exit_code: u8,
    pub text: String,
    pub result: Result<Value, Value>,
}

impl Outcome {
    pub fn success(command: &'static str, exit_code: u8, text: String, result: Value) -> Self {
        Self {
            command,
            exit_code,
            text,
            result: Ok(result),
        }
    }

    pub fn failure(command: &'static str, err: &CliError) -> Self {
        Self {
            command,
            exit_code: EXIT_ERROR,
            text: format!("error: {err}\n"),
            result: Err(err.to_json()),
        }
    }

    /// Envelope shared by every command in JSON mode.
    pub fn to_json(&self) -> Value {
        let mut v = json!({
            "command": self.command,
            "ok": self.exit_code == EXIT_OK,
            "exit_code": self.exit_code,
        });
        match &self.result {
            Ok(r) => v["result"] = r.clone(),
            Err(e) => v["error"] = e.clone(),
        }
        v
    }

    /// `(stdout, stderr)` for the given format.
    pub fn render(&self, format: OutputFormat) -> (String, String) {
        match format {
            OutputFormat::Json => {
                let mut s = serde_json::to_string_pretty(&self.to_json()).expect("json value");
                s.push('\n');
                (s, String::new())
            }
            OutputFormat::Text if self.result.is_err() => (String::new(), self.text.clone()),
            OutputFormat::Text => (self.text.clone(), String::new()),
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Keygen { .. } => "keygen",
        Command::Attest { .. } => "attest",
        Command::Product(ProductCommand::Init { .. }) => "product init",
        Command::Product(ProductCommand::Update { .. }) => "product update",
        Command::Product(ProductCommand::Revoke { .. }) => "product revoke",
        Command::Ingest { .. } => "ingest",
        Command::Trace { .. } => "trace",
        Command::Backward { .. } => "backward",
        Command::Verify { .. } => "verify",
        Command::Ledger(LedgerCommand::Advance { .. }) => "ledger advance",
        Command::Ledger(LedgerCommand::Status { .. }) => "ledger status",
        Command::Ledger(LedgerCommand::Integrity) => "ledger integrity",
    }
}

/// Resolves configuration and runs one command. `env` supplies environment
/// variables so callers can isolate it from the process environment.
pub fn run(cli: Cli, env: &dyn Fn(&str) -> Option<String>) -> (Outcome, OutputFormat) {
    let name = command_name(&cli.command);
    let cfg = match CliConfig::resolve(cli.global.config.as_deref(), cli.global.settings(), env) {
        Ok(cfg) => cfg,
        Err(e) => return (Outcome::failure(name, &e), cli.global.output.unwrap_or_default()),
    };
    let exec = if cli.global.sequential { Exec::Sequential } else { Exec::default() };
    let ctx = commands::Context { cfg: &cfg, exec };
    let outcome = ctx.dispatch(cli.command).unwrap_or_else(|e| Outcome::failure(name, &e));
    (outcome, cfg.output)
}

/// Parses `args` (including the program name) and runs the command,
/// returning `(exit code, stdout, stderr)`.
pub fn run_args<I, T>(args: I, env: &dyn Fn(&str) -> Option<String>) -> (u8, String, String)
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => {
            let (outcome, format) = run(cli, env);
            let (out, err) = outcome.render(format);
            (outcome.exit_code, out, err)
        }
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let rendered = e.render().to_string();
            if e.use_stderr() {
                (code, String::new(), rendered)
            } else {
                (code, rendered, String::new())
            }
        }
    }
}
