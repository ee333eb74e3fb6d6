//! Append-only simulated blockchain.
//!
//! Time is virtual: callers pass `now` (or advance the clock) explicitly, and
//! blocks are produced on a fixed schedule rather than mined. A transaction
//! is `Included` once it is in a block and `Verified` once it has
//! `confirmation_depth` confirmations.
//!
//! Persistence is a JSON Lines chain file (one block per line, append-only)
//! plus a small sidecar `<chain>.state` holding the virtual clock and the
//! mempool between invocations. An open ledger holds an exclusive lock on
//! `<chain>.lock`, so there is at most one writer per chain.

use std::cmp::Reverse;
use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::codec::{classify_payload, TxPayload, MAX_PAYLOAD};
use crate::digest::Digest32;
use crate::exec::Exec;

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("payload of {0} bytes exceeds the {MAX_PAYLOAD}-byte limit")]
    PayloadTooLarge(usize),
    #[error("unknown transaction {0}")]
    UnknownTx(Digest32),
    #[error("height range {from}..={to} outside chain 0..={tip}")]
    RangeOutOfBounds { from: u64, to: u64, tip: u64 },
    #[error("invalid ledger config: {0}")]
    InvalidConfig(String),
    #[error("chain file {path} unreadable at line {line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("ledger I/O failure at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> LedgerError + '_ {
    move |source| LedgerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerConfig {
    /// Seconds of virtual time between blocks.
    pub block_interval: u64,
    /// Confirmations required before a transaction counts as verified.
    pub confirmation_depth: u64,
    pub base_fee: u64,
    pub per_byte_fee: u64,
}

impl Default for LedgerConfig {
    fn default() -> Self {
        Self {
            block_interval: 600,
            confirmation_depth: 3,
            base_fee: 100,
            per_byte_fee: 10,
        }
    }
}

impl LedgerConfig {
    pub fn validate(&self) -> Result<(), LedgerError> {
        if self.block_interval == 0 {
            return Err(LedgerError::InvalidConfig("block_interval must be > 0".into()));
        }
        if self.confirmation_depth == 0 {
            return Err(LedgerError::InvalidConfig("confirmation_depth must be >= 1".into()));
        }
        Ok(())
    }

    pub fn fee_for(&self, payload_len: usize) -> u64 {
        self.base_fee + self.per_byte_fee * payload_len as u64
    }
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        if s.bytes().any(|b| b.is_ascii_uppercase()) {
            return Err(serde::de::Error::custom("hex must be lowercase"));
        }
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainTx {
    pub txid: Digest32,
    #[serde(with = "hex_bytes")]
    pub payload: Vec<u8>,
    pub fee: u64,
    pub submitted_at: u64,
}

impl ChainTx {
    fn write_canonical(hasher: &mut Sha256, payload: &[u8], fee: u64, submitted_at: u64) {
        hasher.update(b"tx1");
        hasher.update(submitted_at.to_be_bytes());
        hasher.update(fee.to_be_bytes());
        hasher.update((payload.len() as u32).to_be_bytes());
        hasher.update(payload);
    }

    pub fn compute_txid(payload: &[u8], fee: u64, submitted_at: u64) -> Digest32 {
        let mut h = Sha256::new();
        Self::write_canonical(&mut h, payload, fee, submitted_at);
        Digest32::from_bytes(h.finalize().into())
    }

    fn new(payload: Vec<u8>, fee: u64, submitted_at: u64) -> Self {
        Self {
            txid: Self::compute_txid(&payload, fee, submitted_at),
            payload,
            fee,
            submitted_at,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub height: u64,
    pub prev_block_hash: Digest32,
    pub timestamp: u64,
    pub txs: Vec<ChainTx>,
    pub block_hash: Digest32,
}

impl Block {
    fn sealed(height: u64, prev_block_hash: Digest32, timestamp: u64, txs: Vec<ChainTx>) -> Self {
        let mut block = Self {
            height,
            prev_block_hash,
            timestamp,
            txs,
            block_hash: Digest32::ZERO,
        };
        block.block_hash = block.compute_hash();
        block
    }

    /// SHA-256 over the header and every transaction field.
    pub fn compute_hash(&self) -> Digest32 {
        let mut h = Sha256::new();
        h.update(b"block1");
        h.update(self.height.to_be_bytes());
        h.update(self.prev_block_hash.as_bytes());
        h.update(self.timestamp.to_be_bytes());
        h.update((self.txs.len() as u32).to_be_bytes());
        for tx in &self.txs {
            h.update(tx.txid.as_bytes());
            ChainTx::write_canonical(&mut h, &tx.payload, tx.fee, tx.submitted_at);
        }
        Digest32::from_bytes(h.finalize().into())
    }

    /// Problems internal to this block (hash, txids, payload sizes).
    fn self_check(&self) -> Option<String> {
        for (i, tx) in self.txs.iter().enumerate() {
            if tx.payload.len() > MAX_PAYLOAD {
                return Some(format!("tx {i} payload exceeds {MAX_PAYLOAD} bytes"));
            }
            if ChainTx::compute_txid(&tx.payload, tx.fee, tx.submitted_at) != tx.txid {
                return Some(format!("tx {i} txid does not match its contents"));
            }
        }
        if self.compute_hash() != self.block_hash {
            return Some("block hash does not match block contents".into());
        }
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxStatus {
    Pending,
    Included,
    Verified,
}

/// A trace payload found on chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanEntry {
    pub height: u64,
    /// Index of the transaction inside its block.
    pub position: usize,
    pub txid: Digest32,
    pub payload: TxPayload,
}

/// Outcome of re-hashing the chain from genesis.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct IntegrityReport {
    pub blocks_checked: u64,
    pub first_bad_height: Option<u64>,
    pub reason: Option<String>,
}

impl IntegrityReport {
    pub fn is_ok(&self) -> bool {
        self.first_bad_height.is_none()
    }
}

/// The seam between trace logic and a chain implementation.
pub trait LedgerBackend {
    fn config(&self) -> &LedgerConfig;
    fn tip_height(&self) -> u64;
    fn submit(&mut self, payload: &[u8]) -> Result<Digest32, LedgerError>;
    fn confirmations(&self, txid: &Digest32) -> Result<u64, LedgerError>;
    fn status(&self, txid: &Digest32) -> Result<TxStatus, LedgerError>;
    fn scan(&self, from_height: u64, to_height: u64) -> Result<Vec<ScanEntry>, LedgerError>;

    /// `(txid, payload)` of transactions not yet in a block. Only the writer
    /// side sees these; read-only backends return nothing.
    fn mempool_payloads(&self) -> Vec<(Digest32, Vec<u8>)> {
        Vec::new()
    }
}

#[derive(Serialize, Deserialize, Default)]
struct SideState {
    clock: u64,
    mempool: Vec<ChainTx>,
}

#[derive(Debug, Clone)]
struct ChainFiles {
    chain: PathBuf,
    state: PathBuf,
    /// Held for the lifetime of the ledger (and its clones).
    _lock: Arc<File>,
}

#[derive(Debug, Clone)]
pub struct Ledger {
    config: LedgerConfig,
    blocks: Vec<Block>,
    mempool: Vec<ChainTx>,
    clock: u64,
    locations: HashMap<Digest32, (u64, usize)>,
    files: Option<ChainFiles>,
}

impl Ledger {
    /// In-memory chain holding only a genesis block at t = 0.
    pub fn new(config: LedgerConfig) -> Result<Self, LedgerError> {
        config.validate()?;
        Ok(Self {
            config,
            blocks: vec![Block::sealed(0, Digest32::ZERO, 0, Vec::new())],
            mempool: Vec::new(),
            clock: 0,
            locations: HashMap::new(),
            files: None,
        })
    }

    fn state_path(chain: &Path) -> PathBuf {
        let mut name = chain.as_os_str().to_os_string();
        name.push(".state");
        PathBuf::from(name)
    }

    /// Opens (or creates) a persisted chain.
    pub fn open(chain_path: impl Into<PathBuf>, config: LedgerConfig) -> Result<Self, LedgerError> {
        let chain = chain_path.into();
        let state = Self::state_path(&chain);
        let mut ledger = Self::new(config)?;
        if let Some(dir) = chain.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let lock_path = {
            let mut name = chain.as_os_str().to_os_string();
            name.push(".lock");
            PathBuf::from(name)
        };
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(io_err(&lock_path))?;
        lock.lock().map_err(io_err(&lock_path))?;
        let lock = Arc::new(lock);
        if chain.exists() {
            ledger.blocks = read_chain_file(&chain)?;
            if ledger.blocks.is_empty() {
                return Err(LedgerError::Corrupt {
                    path: chain,
                    line: 1,
                    message: "chain file has no genesis block".into(),
                });
            }
            for block in &ledger.blocks {
                for (pos, tx) in block.txs.iter().enumerate() {
                    ledger.locations.entry(tx.txid).or_insert((block.height, pos));
                }
            }
            if state.exists() {
                let text = fs::read_to_string(&state).map_err(io_err(&state))?;
                let side: SideState = serde_json::from_str(&text).map_err(|e| LedgerError::Corrupt {
                    path: state.clone(),
                    line: 1,
                    message: e.to_string(),
                })?;
                ledger.clock = side.clock.max(ledger.tip().timestamp);
                ledger.mempool = side
                    .mempool
                    .into_iter()
                    .filter(|tx| !ledger.locations.contains_key(&tx.txid))
                    .collect();
            } else {
                ledger.clock = ledger.tip().timestamp;
            }
            ledger.files = Some(ChainFiles { chain, state, _lock: lock });
        } else {
            ledger.files = Some(ChainFiles { chain, state, _lock: lock });
            let genesis = ledger.blocks[0].clone();
            ledger.append_to_file(&genesis)?;
            ledger.save_state()?;
        }
        Ok(ledger)
    }

    fn append_to_file(&self, block: &Block) -> Result<(), LedgerError> {
        let Some(files) = &self.files else { return Ok(()) };
        let mut line = serde_json::to_string(block).expect("block serializes");
        line.push('\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&files.chain)
            .map_err(io_err(&files.chain))?;
        f.write_all(line.as_bytes()).map_err(io_err(&files.chain))?;
        f.sync_data().map_err(io_err(&files.chain))
    }

    fn save_state(&self) -> Result<(), LedgerError> {
        let Some(files) = &self.files else { return Ok(()) };
        let side = SideState {
            clock: self.clock,
            mempool: self.mempool.clone(),
        };
        let dir = files
            .state
            .parent()
            .filter(|d| !d.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(&files.state))?;
        serde_json::to_writer(&mut tmp, &side).expect("state serializes");
        tmp.persist(&files.state).map_err(|e| LedgerError::Io {
            path: files.state.clone(),
            source: e.error,
        })?;
        Ok(())
    }

    pub fn config(&self) -> &LedgerConfig {
        &self.config
    }

    pub fn now(&self) -> u64 {
        self.clock
    }

    pub fn tip(&self) -> &Block {
        self.blocks.last().expect("genesis always present")
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Transactions awaiting inclusion. Writer-side view only.
    pub fn mempool(&self) -> &[ChainTx] {
        &self.mempool
    }

    pub fn chain_path(&self) -> Option<&Path> {
        self.files.as_ref().map(|f| f.chain.as_path())
    }

    pub fn find_tx(&self, txid: &Digest32) -> Option<(u64, &ChainTx)> {
        let (height, pos) = *self.locations.get(txid)?;
        Some((height, &self.blocks[height as usize].txs[pos]))
    }

    /// Produces the next block if one is due at `now`. The mempool is drained
    /// highest fee first, ties broken by ascending txid.
    pub fn produce_block(&mut self, now: u64) -> Result<Option<Block>, LedgerError> {
        let now = now.max(self.clock);
        self.clock = now;
        let (tip_height, tip_hash, tip_time) = {
            let tip = self.tip();
            (tip.height, tip.block_hash, tip.timestamp)
        };
        if now < tip_time + self.config.block_interval {
            self.save_state()?;
            return Ok(None);
        }
        let mut txs = std::mem::take(&mut self.mempool);
        txs.sort_by_key(|t| (Reverse(t.fee), t.txid));
        let block = Block::sealed(tip_height + 1, tip_hash, now, txs);
        for (pos, tx) in block.txs.iter().enumerate() {
            self.locations.insert(tx.txid, (block.height, pos));
        }
        self.append_to_file(&block)?;
        self.blocks.push(block.clone());
        self.save_state()?;
        Ok(Some(block))
    }

    /// Moves the clock forward, producing every block scheduled on the way.
    pub fn advance(&mut self, seconds: u64) -> Result<Vec<Block>, LedgerError> {
        let target = self.clock + seconds;
        let mut produced = Vec::new();
        loop {
            let next = self.tip().timestamp + self.config.block_interval;
            if next > target {
                break;
            }
            produced.extend(self.produce_block(next)?);
        }
        self.clock = target;
        self.save_state()?;
        Ok(produced)
    }

    pub fn verify_chain_integrity(&self) -> IntegrityReport {
        self.verify_chain_integrity_with(Exec::default())
    }

    pub fn verify_chain_integrity_with(&self, exec: Exec) -> IntegrityReport {
        check_blocks(&self.blocks, exec, None)
    }
}

fn read_chain_file(path: &Path) -> Result<Vec<Block>, LedgerError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str::<Block>(line).map_err(|e| LedgerError::Corrupt {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Hash checks run through `exec`; link checks are sequential. `unreadable`
/// is the first line of a persisted file that could not be decoded.
fn check_blocks(blocks: &[Block], exec: Exec, unreadable: Option<(u64, String)>) -> IntegrityReport {
    let self_checks = exec.map(blocks, Block::self_check);
    let mut bad: Option<(u64, String)> = None;
    let mut prev: Option<&Block> = None;
    for (i, (block, own)) in blocks.iter().zip(self_checks).enumerate() {
        let i = i as u64;
        let problem = if block.height != i {
            Some(format!("height field is {} at position {i}", block.height))
        } else if let Some(reason) = own {
            Some(reason)
        } else {
            match prev {
                None if block.prev_block_hash != Digest32::ZERO => {
                    Some("genesis prev hash is not zero".to_string())
                }
                Some(p) if block.prev_block_hash != p.block_hash => {
                    Some("prev hash does not match previous block".to_string())
                }
                Some(p) if block.timestamp < p.timestamp => {
                    Some("timestamp earlier than previous block".to_string())
                }
                _ => None,
            }
        };
        if let Some(reason) = problem {
            bad = Some((i, reason));
            break;
        }
        prev = Some(block);
    }
    if let Some((h, reason)) = unreadable {
        if bad.as_ref().is_none_or(|(b, _)| h < *b) {
            bad = Some((h, reason));
        }
    }
    if blocks.is_empty() && bad.is_none() {
        bad = Some((0, "chain has no genesis block".into()));
    }
    IntegrityReport {
        blocks_checked: blocks.len() as u64,
        first_bad_height: bad.as_ref().map(|(h, _)| *h),
        reason: bad.map(|(_, r)| r),
    }
}

/// Integrity check straight from a chain file; tolerates lines that no
/// longer decode, reporting the first one as the bad height.
pub fn verify_chain_file(path: &Path, exec: Exec) -> Result<IntegrityReport, LedgerError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (body, terminated) = match bytes.strip_suffix(b"\n") {
        Some(body) => (body, true),
        None => (&bytes[..], false),
    };
    let mut blocks = Vec::new();
    let mut unreadable = None;
    for (i, line) in body.split(|&b| b == b'\n').enumerate() {
        match std::str::from_utf8(line)
            .map_err(|e| e.to_string())
            .and_then(|s| serde_json::from_str::<Block>(s).map_err(|e| e.to_string()))
        {
            Ok(block) => blocks.push(block),
            Err(e) => {
                unreadable = Some((i as u64, format!("line {} does not decode: {e}", i + 1)));
                break;
            }
        }
    }
    if !terminated && unreadable.is_none() {
        let last = blocks.len().saturating_sub(1) as u64;
        unreadable = Some((last, "chain file does not end with a newline".into()));
    }
    Ok(check_blocks(&blocks, exec, unreadable))
}

impl LedgerBackend for Ledger {
    fn config(&self) -> &LedgerConfig {
        &self.config
    }

    fn tip_height(&self) -> u64 {
        self.tip().height
    }

    fn submit(&mut self, payload: &[u8]) -> Result<Digest32, LedgerError> {
        if payload.len() > MAX_PAYLOAD {
            return Err(LedgerError::PayloadTooLarge(payload.len()));
        }
        let tx = ChainTx::new(payload.to_vec(), self.config.fee_for(payload.len()), self.clock);
        let txid = tx.txid;
        if self.locations.contains_key(&txid) || self.mempool.iter().any(|t| t.txid == txid) {
            return Ok(txid);
        }
        self.mempool.push(tx);
        self.save_state()?;
        Ok(txid)
    }

    fn confirmations(&self, txid: &Digest32) -> Result<u64, LedgerError> {
        if let Some((height, _)) = self.locations.get(txid) {
            return Ok(self.tip().height - height + 1);
        }
        if self.mempool.iter().any(|t| t.txid == *txid) {
            return Ok(0);
        }
        Err(LedgerError::UnknownTx(*txid))
    }

    fn status(&self, txid: &Digest32) -> Result<TxStatus, LedgerError> {
        let c = self.confirmations(txid)?;
        Ok(if c == 0 {
            TxStatus::Pending
        } else if c < self.config.confirmation_depth {
            TxStatus::Included
        } else {
            TxStatus::Verified
        })
    }

    fn scan(&self, from_height: u64, to_height: u64) -> Result<Vec<ScanEntry>, LedgerError> {
        let tip = self.tip().height;
        if from_height > to_height || to_height > tip {
            return Err(LedgerError::RangeOutOfBounds {
                from: from_height,
                to: to_height,
                tip,
            });
        }
        let mut out = Vec::new();
        for block in &self.blocks[from_height as usize..=to_height as usize] {
            for (position, tx) in block.txs.iter().enumerate() {
                if let Some(payload) = classify_payload(&tx.payload) {
                    out.push(ScanEntry {
                        height: block.height,
                        position,
                        txid: tx.txid,
                        payload,
                    });
                }
            }
        }
        Ok(out)
    }

    fn mempool_payloads(&self) -> Vec<(Digest32, Vec<u8>)> {
        self.mempool.iter().map(|t| (t.txid, t.payload.clone())).collect()
    }
}
