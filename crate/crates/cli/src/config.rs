//! Settings resolution: built-in defaults, then the `key = value` config
//! file, then command-line flags, then environment variables.

use std::fs;
use std::path::{Path, PathBuf};

use tracechain_core::{IdentityId, LedgerConfig};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, clap::ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Text,
    Json,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CliConfig {
    pub store_root: PathBuf,
    pub chain_file: PathBuf,
    pub keystore: PathBuf,
    pub ledger: LedgerConfig,
    pub attestation_threshold: usize,
    pub output: OutputFormat,
    pub signer: Option<IdentityId>,
}

/// Values that may come from the config file or from flags.
#[derive(Clone, Debug, Default)]
pub struct Settings {
    pub home: Option<PathBuf>,
    pub store: Option<PathBuf>,
    pub chain: Option<PathBuf>,
    pub keystore: Option<PathBuf>,
    pub signer: Option<IdentityId>,
    pub threshold: Option<usize>,
    pub output: Option<OutputFormat>,
    pub block_interval: Option<u64>,
    pub confirmation_depth: Option<u64>,
    pub base_fee: Option<u64>,
    pub per_byte_fee: Option<u64>,
}

impl Settings {
    /// Fields set in `other` win.
    fn overlay(mut self, other: Settings) -> Settings {
        macro_rules! take {
            ($($f:ident),*) => { $( if other.$f.is_some() { self.$f = other.$f; } )* };
        }
        take!(home, store, chain, keystore, signer, threshold, output, block_interval, confirmation_depth, base_fee, per_byte_fee);
        self
    }
}

pub const ENV_HOME: &str = "TRACE_HOME";
pub const ENV_STORE: &str = "TRACE_STORE";
pub const ENV_CHAIN: &str = "TRACE_CHAIN";

fn config_err(path: &Path, line: usize, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{}:{line}: {msg}", path.display()))
}

/// Parses `key = value` lines. Blank lines and `#` comments are ignored;
/// relative paths are taken relative to the file's directory.
pub fn parse_config_file(path: &Path) -> Result<Settings, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::FileUnreadable {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut s = Settings::default();
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| config_err(path, n, "expected `key = value`"))?;
        let (key, value) = (key.trim(), value.trim());
        let path_val = || Some(base.join(value));
        let num = || value.parse::<u64>().map_err(|e| config_err(path, n, format!("{key}: {e}")));
        match key {
            "home" => s.home = path_val(),
            "store" => s.store = path_val(),
            "chain" => s.chain = path_val(),
            "keystore" => s.keystore = path_val(),
            "signer" => {
                s.signer = Some(value.parse().map_err(|e| config_err(path, n, format!("signer: {e}")))?)
            }
            "threshold" => s.threshold = Some(num()? as usize),
            "output" => {
                s.output = Some(match value {
                    "text" => OutputFormat::Text,
                    "json" => OutputFormat::Json,
                    other => return Err(config_err(path, n, format!("output must be text or json, not {other:?}"))),
                })
            }
            "block_interval" => s.block_interval = Some(num()?),
            "confirmation_depth" => s.confirmation_depth = Some(num()?),
            "base_fee" => s.base_fee = Some(num()?),
            "per_byte_fee" => s.per_byte_fee = Some(num()?),
            other => return Err(config_err(path, n, format!("unknown key {other:?}"))),
        }
    }
    Ok(s)
}

fn default_home(env: &dyn Fn(&str) -> Option<String>) -> PathBuf {
    env("HOME")
        .map(|h| PathBuf::from(h).join(".tracechain"))
        .unwrap_or_else(|| PathBuf::from(".tracechain"))
}

impl CliConfig {
    pub fn resolve(
        config_file: Option<&Path>,
        flags: Settings,
        env: &dyn Fn(&str) -> Option<String>,
    ) -> Result<Self, CliError> {
        let env_home = env(ENV_HOME).map(PathBuf::from);
        let file = match config_file {
            Some(p) => parse_config_file(p)?,
            None => {
                let guess = env_home.clone().or_else(|| flags.home.clone()).unwrap_or_else(|| default_home(env));
                let implicit = guess.join("config");
                if implicit.is_file() {
                    parse_config_file(&implicit)?
                } else {
                    Settings::default()
                }
            }
        };
        let mut s = file.overlay(flags);
        if env_home.is_some() {
            s.home = env_home;
        }
        if let Some(store) = env(ENV_STORE) {
            s.store = Some(store.into());
        }
        if let Some(chain) = env(ENV_CHAIN) {
            s.chain = Some(chain.into());
        }

        let home = s.home.unwrap_or_else(|| default_home(env));
        let defaults = LedgerConfig::default();
        let ledger = LedgerConfig {
            block_interval: s.block_interval.unwrap_or(defaults.block_interval),
            confirmation_depth: s.confirmation_depth.unwrap_or(defaults.confirmation_depth),
            base_fee: s.base_fee.unwrap_or(defaults.base_fee),
            per_byte_fee: s.per_byte_fee.unwrap_or(defaults.per_byte_fee),
        };
        ledger.validate()?;
        Ok(Self {
            store_root: s.store.unwrap_or_else(|| home.join("store")),
            chain_file: s.chain.unwrap_or_else(|| home.join("chain.jsonl")),
            keystore: s.keystore.unwrap_or_else(|| home.join("keys")),
            ledger,
            attestation_threshold: s.threshold.unwrap_or(tracechain_core::identity::DEFAULT_THRESHOLD),
            output: s.output.unwrap_or_default(),
            signer: s.signer,
        })
    }
}
