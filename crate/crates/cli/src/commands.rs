use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Deserialize;
use serde_json::{json, Value};
use tracechain_core::codec::encode_payload;
use tracechain_core::identity::{
    finalize_profile, keygen, meets_threshold, trust_score, Attestation, KeyResolver, Keystore, PublicKey,
};
use tracechain_core::ledger::{verify_chain_file, IntegrityReport};
use tracechain_core::record::{canonicalize, check_conformance, FieldSpec, Schema, Timestamp};
use tracechain_core::trace::{
    backward_trace, build_index_with, forward_trace, resolve_chain, verify_file_against_chain, Anomaly,
    FileVerdict, TraceReport, VerifiedState, Visibility,
};
use tracechain_core::{
    BlobStore, Digest32, Exec, IdentityId, Ledger, LedgerBackend, ProductId, RecordKind, TraceRecord, TxCode,
    TxStatus,
};

use crate::{CliConfig, CliError, Command, LedgerCommand, Outcome, ProductCommand, EXIT_ERROR, EXIT_OK, EXIT_VERIFY_FAILED};

pub struct Context<'a> {
    pub cfg: &'a CliConfig,
    pub exec: Exec,
}

/// Keys from the local keystore first, then public keys published in the store.
struct Keys<'a> {
    local: HashMap<IdentityId, PublicKey>,
    store: &'a BlobStore,
}

impl KeyResolver for Keys<'_> {
    fn resolve(&self, id: &IdentityId) -> Option<PublicKey> {
        self.local.get(id).cloned().or_else(|| self.store.resolve(id))
    }
}

/// A record accepted by the company side.
struct Anchored {
    code: TxCode,
    digest: Digest32,
    txid: Digest32,
}

impl Anchored {
    fn json(&self) -> Value {
        json!({ "code": self.code.to_string(), "digest": self.digest, "txid": self.txid })
    }
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Source {
    Barcode,
    Rfid,
    Manual,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DeviceEvent {
    product: ProductId,
    #[allow(dead_code)]
    source: Source,
    fields: BTreeMap<String, String>,
    observed_at: Timestamp,
}

fn plural(n: u64, word: &str) -> String {
    if n == 1 {
        format!("{n} {word}")
    } else {
        format!("{n} {word}s")
    }
}

impl Context<'_> {
    pub fn dispatch(&self, command: Command) -> Result<Outcome, CliError> {
        match command {
            Command::Keygen { name, info } => self.keygen(name, info),
            Command::Attest { subject, statement } => self.attest(subject, &statement),
            Command::Product(ProductCommand::Init {
                product,
                required,
                optional,
                at,
            }) => self.product_init(product, required, optional, at),
            Command::Product(ProductCommand::Update { product, fields, at }) => {
                let a = self.with_writer(|store, keystore, ledger| {
                    self.update(store, keystore, ledger, &product, fields.into_iter().collect(), at)
                })?;
                Ok(Outcome::success("product update", EXIT_OK, anchored_text(&a), a.json()))
            }
            Command::Product(ProductCommand::Revoke {
                product,
                target,
                reason,
                at,
            }) => self.revoke(product, target, reason, at),
            Command::Ingest { events } => self.ingest(&events),
            Command::Trace { product, criteria } => match product {
                Some(p) => self.trace_product(&p),
                None => self.trace_forward(criteria.into_iter().collect()),
            },
            Command::Backward { digest } => self.backward(&digest),
            Command::Verify { file } => self.verify(&file),
            Command::Ledger(LedgerCommand::Advance { seconds }) => self.advance(seconds),
            Command::Ledger(LedgerCommand::Status { txid }) => self.status(&txid),
            Command::Ledger(LedgerCommand::Integrity) => self.integrity(),
        }
    }

    fn store(&self) -> Result<BlobStore, CliError> {
        Ok(BlobStore::open(&self.cfg.store_root)?)
    }

    fn keystore(&self) -> Result<Keystore, CliError> {
        Ok(Keystore::open(&self.cfg.keystore)?)
    }

    fn open_ledger(&self) -> Result<Ledger, CliError> {
        Ok(Ledger::open(&self.cfg.chain_file, self.cfg.ledger.clone())?)
    }

    fn existing_ledger(&self) -> Result<Ledger, CliError> {
        if !self.cfg.chain_file.exists() {
            return Err(CliError::NoChain(self.cfg.chain_file.clone()));
        }
        self.open_ledger()
    }

    fn signer(&self) -> Result<IdentityId, CliError> {
        self.cfg.signer.ok_or(CliError::NoSigner)
    }

    fn with_writer<T>(
        &self,
        f: impl FnOnce(&BlobStore, &Keystore, &mut Ledger) -> Result<T, CliError>,
    ) -> Result<T, CliError> {
        let store = self.store()?;
        let keystore = self.keystore()?;
        let mut ledger = self.open_ledger()?;
        f(&store, &keystore, &mut ledger)
    }

    fn keygen(&self, name: Option<String>, info: Vec<(String, String)>) -> Result<Outcome, CliError> {
        let keystore = self.keystore()?;
        let store = self.store()?;
        let (key, mut profile) = keygen()?;
        profile.info.extend(info);
        let name = name.unwrap_or_else(|| format!("id-{}", key.id().digest().short()));
        profile.info.insert("name".into(), name);
        let profile = finalize_profile(&key, profile)?;
        let key_path = keystore.save_key(&key)?;
        keystore.save_profile(&profile)?;
        store.publish_key(&key.public_key())?;
        let id = key.id();
        Ok(Outcome::success(
            "keygen",
            EXIT_OK,
            format!("{id}\n"),
            json!({
                "id": id,
                "public_key": key.public_key().to_hex(),
                "key_file": key_path,
                "info": profile.info,
            }),
        ))
    }

    fn attest(&self, subject: IdentityId, statement: &str) -> Result<Outcome, CliError> {
        let keystore = self.keystore()?;
        let store = self.store()?;
        let key = keystore.load_key(&self.signer()?)?;
        let attestation = Attestation::create(&key, subject, statement)?;
        keystore.append_attestation(attestation)?;
        let keys = Keys {
            local: keystore.known_keys()?,
            store: &store,
        };
        let score = trust_score(&subject, &keystore.attestations()?, &keys);
        Ok(Outcome::success(
            "attest",
            EXIT_OK,
            format!("{} attested {subject} (score {score})\n", key.id()),
            json!({ "attestor": key.id(), "subject": subject, "statement": statement, "score": score }),
        ))
    }

    fn submit(
        &self,
        store: &BlobStore,
        ledger: &mut Ledger,
        record: &TraceRecord,
    ) -> Result<Anchored, CliError> {
        let bytes = canonicalize(record, true)?;
        let digest = store.put(&bytes)?;
        let code = TxCode::for_kind(record.kind());
        let txid = ledger.submit(&encode_payload(code, &digest))?;
        Ok(Anchored { code, digest, txid })
    }

    fn product_init(
        &self,
        product: ProductId,
        required: Vec<String>,
        optional: Vec<String>,
        at: Option<Timestamp>,
    ) -> Result<Outcome, CliError> {
        let signer = self.signer()?;
        let a = self.with_writer(|store, keystore, ledger| {
            let key = keystore.load_key(&signer)?;
            let keys = Keys {
                local: keystore.known_keys()?,
                store,
            };
            let score = trust_score(&signer, &keystore.attestations()?, &keys);
            let threshold = self.cfg.attestation_threshold;
            if !meets_threshold(score, threshold) {
                return Err(CliError::ThresholdNotMet {
                    signer,
                    score,
                    threshold,
                });
            }
            let index = build_index_with(&*ledger, store, Visibility::Writer, self.exec)?;
            let has_init = index
                .by_product
                .get(&product)
                .is_some_and(|ds| ds.iter().any(|d| index.by_digest.get(d).is_some_and(|e| e.code == TxCode::IT)));
            if has_init {
                return Err(CliError::DuplicateInit(product.clone()));
            }
            let fields = required
                .into_iter()
                .map(FieldSpec::required)
                .chain(optional.into_iter().map(FieldSpec::optional))
                .collect();
            let record = TraceRecord::init(product.clone(), Schema::new(fields)?, at.unwrap_or_else(Timestamp::now), signer)
                .sign(&key)?;
            self.submit(store, ledger, &record)
        })?;
        Ok(Outcome::success("product init", EXIT_OK, anchored_text(&a), a.json()))
    }

    /// The product chain as the writer sees it, mempool included, checked
    /// for authorship by `signer`. Returns the report and the init record.
    fn writer_chain(
        &self,
        store: &BlobStore,
        ledger: &Ledger,
        product: &ProductId,
        signer: IdentityId,
    ) -> Result<(TraceReport, TraceRecord), CliError> {
        let index = build_index_with(ledger, store, Visibility::Writer, self.exec)?;
        let report = resolve_chain(product, &index, store)?;
        if report.anomalies.iter().any(|a| matches!(a, Anomaly::Fork { .. })) {
            return Err(CliError::Forked(product.clone()));
        }
        let init = report
            .init
            .record
            .clone()
            .ok_or_else(|| CliError::ChainUnreadable(product.clone(), "init record unreadable".into()))?;
        if init.signer != signer {
            return Err(CliError::NotAuthorized {
                product: product.clone(),
                signer,
                expected: init.signer,
            });
        }
        Ok((report, init))
    }

    fn tip_of(report: &TraceReport, at: Option<Timestamp>) -> Result<(Digest32, Timestamp), CliError> {
        let tip = report.chain().last().expect("chain has init");
        let tip_ts = tip.record.as_ref().map(|r| r.timestamp);
        let at = at.unwrap_or_else(Timestamp::now);
        match tip_ts {
            Some(t) if at < t => Err(CliError::TimestampRegression { at, tip: t }),
            _ => Ok((tip.digest, at)),
        }
    }

    fn update(
        &self,
        store: &BlobStore,
        keystore: &Keystore,
        ledger: &mut Ledger,
        product: &ProductId,
        fields: BTreeMap<String, String>,
        at: Option<Timestamp>,
    ) -> Result<Anchored, CliError> {
        let signer = self.signer()?;
        let key = keystore.load_key(&signer)?;
        let (report, init) = self.writer_chain(store, ledger, product, signer)?;
        let (prev, at) = Self::tip_of(&report, at)?;
        let record = TraceRecord::update(product.clone(), prev, fields, at, signer);
        let missing: Vec<String> = check_conformance(&record, &init)?
            .into_iter()
            .map(|v| match v {
                tracechain_core::record::Violation::MissingField(f) => f,
            })
            .collect();
        if !missing.is_empty() {
            return Err(CliError::SpecViolation {
                product: product.clone(),
                missing,
            });
        }
        self.submit(store, ledger, &record.sign(&key)?)
    }

    fn revoke(
        &self,
        product: ProductId,
        target: Digest32,
        reason: Option<String>,
        at: Option<Timestamp>,
    ) -> Result<Outcome, CliError> {
        let signer = self.signer()?;
        let a = self.with_writer(|store, keystore, ledger| {
            let key = keystore.load_key(&signer)?;
            let (report, _) = self.writer_chain(store, ledger, &product, signer)?;
            let is_update = report
                .states
                .iter()
                .any(|s| s.digest == target && s.kind() == Some(RecordKind::Update));
            if !is_update {
                return Err(CliError::UnknownTarget {
                    product: product.clone(),
                    target,
                });
            }
            let (prev, at) = Self::tip_of(&report, at)?;
            let record = TraceRecord::revoke(product.clone(), prev, target, reason, at, signer).sign(&key)?;
            self.submit(store, ledger, &record)
        })?;
        Ok(Outcome::success("product revoke", EXIT_OK, anchored_text(&a), a.json()))
    }

    fn ingest(&self, path: &Path) -> Result<Outcome, CliError> {
        let text = fs::read_to_string(path).map_err(|source| CliError::FileUnreadable {
            path: path.to_path_buf(),
            source,
        })?;
        let mut lines = Vec::new();
        let (mut ok, mut failed) = (0u64, 0u64);
        let mut out = String::new();
        self.with_writer(|store, keystore, ledger| {
            for (i, line) in text.lines().enumerate() {
                let n = i + 1;
                if line.trim().is_empty() {
                    continue;
                }
                let result = serde_json::from_str::<DeviceEvent>(line)
                    .map_err(|e| CliError::InvalidEvent(format!("invalid event: {e}")))
                    .and_then(|ev| {
                        if ev.fields.is_empty() {
                            return Err(CliError::InvalidEvent("event has no fields".into()));
                        }
                        self.update(store, keystore, ledger, &ev.product, ev.fields, Some(ev.observed_at))
                    });
                match result {
                    Ok(a) => {
                        ok += 1;
                        let _ = writeln!(out, "line {n}: {}", anchored_text(&a).trim_end());
                        lines.push(json!({ "line": n, "ok": true, "anchored": a.json() }));
                    }
                    Err(e) => {
                        failed += 1;
                        let _ = writeln!(out, "line {n}: error: {e}");
                        lines.push(json!({ "line": n, "ok": false, "error": e.to_json() }));
                    }
                }
            }
            Ok(())
        })?;
        let _ = writeln!(out, "ingested {ok} event(s), {failed} failed");
        let code = if failed == 0 { EXIT_OK } else { EXIT_ERROR };
        Ok(Outcome::success(
            "ingest",
            code,
            out,
            json!({ "succeeded": ok, "failed": failed, "lines": lines }),
        ))
    }

    /// Chain-file integrity plus a ledger opened for reading. A ledger that
    /// cannot be decoded is reported through the integrity result.
    fn read_side(&self) -> Result<(IntegrityReport, Option<Ledger>), CliError> {
        if !self.cfg.chain_file.exists() {
            return Err(CliError::NoChain(self.cfg.chain_file.clone()));
        }
        let integrity = verify_chain_file(&self.cfg.chain_file, self.exec)?;
        match self.open_ledger() {
            Ok(l) => Ok((integrity, Some(l))),
            Err(CliError::Ledger(tracechain_core::ledger::LedgerError::Corrupt { .. })) if !integrity.is_ok() => {
                Ok((integrity, None))
            }
            Err(e) => Err(e),
        }
    }

    fn trace_product(&self, product: &ProductId) -> Result<Outcome, CliError> {
        let store = self.store()?;
        let (integrity, ledger) = self.read_side()?;
        let Some(ledger) = ledger else {
            return Ok(integrity_only("trace", &integrity));
        };
        let index = build_index_with(&ledger, &store, Visibility::Verified, self.exec)?;
        let report = resolve_chain(product, &index, &store)?;
        let clean = report.is_clean() && integrity.is_ok();
        let mut text = integrity_line(&integrity);
        text.push_str(&report.render_text());
        if !integrity.is_ok() {
            text.push_str("result: FAILED (ledger integrity)\n");
        }
        Ok(Outcome::success(
            "trace",
            if clean { EXIT_OK } else { EXIT_VERIFY_FAILED },
            text,
            json!({ "integrity": integrity, "report": report }),
        ))
    }

    fn trace_forward(&self, criteria: BTreeMap<String, String>) -> Result<Outcome, CliError> {
        let store = self.store()?;
        let (integrity, ledger) = self.read_side()?;
        let Some(ledger) = ledger else {
            return Ok(integrity_only("trace", &integrity));
        };
        let index = build_index_with(&ledger, &store, Visibility::Verified, self.exec)?;
        let found = forward_trace(&criteria, &index, &store);
        let mut text = String::new();
        for (p, s) in &found {
            let _ = writeln!(text, "{p}  {}  height {}  {}", s.digest, s.height, state_summary(s));
        }
        let _ = writeln!(text, "{} product(s) match", found.len());
        text.push_str(&integrity_line(&integrity));
        let matches: Vec<Value> = found
            .iter()
            .map(|(p, s)| json!({ "product": p, "state": s }))
            .collect();
        Ok(Outcome::success(
            "trace",
            if integrity.is_ok() { EXIT_OK } else { EXIT_VERIFY_FAILED },
            text,
            json!({ "integrity": integrity, "criteria": criteria, "matches": matches }),
        ))
    }

    fn backward(&self, digest: &Digest32) -> Result<Outcome, CliError> {
        let store = self.store()?;
        let (integrity, ledger) = self.read_side()?;
        let Some(ledger) = ledger else {
            return Ok(integrity_only("backward", &integrity));
        };
        let index = build_index_with(&ledger, &store, Visibility::Verified, self.exec)?;
        let chain = backward_trace(digest, &index, &store)?;
        let pass = integrity.is_ok() && chain.iter().all(|s| s.verdicts.all_pass());
        let mut text = String::new();
        for (i, s) in chain.iter().enumerate() {
            let failed = s.verdicts.failed();
            let verdict = if failed.is_empty() { "ok".to_string() } else { format!("FAILED {}", failed.join(",")) };
            let revoked = if s.revoked { " revoked" } else { "" };
            let _ = writeln!(
                text,
                "{i:<3} {} {}  height {}  {}  {verdict}{revoked}",
                s.code,
                s.digest,
                s.height,
                state_summary(s)
            );
        }
        text.push_str(&integrity_line(&integrity));
        Ok(Outcome::success(
            "backward",
            if pass { EXIT_OK } else { EXIT_VERIFY_FAILED },
            text,
            json!({ "integrity": integrity, "chain": chain }),
        ))
    }

    fn verify(&self, file: &Path) -> Result<Outcome, CliError> {
        let bytes = fs::read(file).map_err(|source| CliError::FileUnreadable {
            path: file.to_path_buf(),
            source,
        })?;
        let store = self.store()?;
        let (integrity, ledger) = self.read_side()?;
        let Some(ledger) = ledger else {
            return Ok(integrity_only("verify", &integrity));
        };
        let index = build_index_with(&ledger, &store, Visibility::Verified, self.exec)?;
        let verdict = verify_file_against_chain(&bytes, &index);
        let mut text = match &verdict {
            FileVerdict::Anchored {
                digest,
                txid,
                height,
                code,
            } => format!("Anchored: {digest} ({code}) txid {txid} at height {height}\n"),
            FileVerdict::Pending {
                digest,
                txid,
                confirmations,
                ..
            } => format!(
                "Pending: {digest} txid {txid} has {}\n",
                plural(*confirmations, "confirmation")
            ),
            FileVerdict::Unanchored { digest } => format!("Unanchored: {digest}\n"),
        };
        text.push_str(&integrity_line(&integrity));
        let ok = matches!(verdict, FileVerdict::Anchored { .. }) && integrity.is_ok();
        Ok(Outcome::success(
            "verify",
            if ok { EXIT_OK } else { EXIT_VERIFY_FAILED },
            text,
            json!({ "integrity": integrity, "verdict": verdict }),
        ))
    }

    fn advance(&self, seconds: u64) -> Result<Outcome, CliError> {
        let mut ledger = self.open_ledger()?;
        let produced = ledger.advance(seconds)?;
        let heights: Vec<u64> = produced.iter().map(|b| b.height).collect();
        Ok(Outcome::success(
            "ledger advance",
            EXIT_OK,
            format!(
                "clock {}s, produced {}, tip height {}, {} pending\n",
                ledger.now(),
                plural(produced.len() as u64, "block"),
                ledger.tip_height(),
                ledger.mempool().len()
            ),
            json!({
                "clock": ledger.now(),
                "produced": heights,
                "tip_height": ledger.tip_height(),
                "mempool": ledger.mempool().len(),
            }),
        ))
    }

    fn status(&self, txid: &Digest32) -> Result<Outcome, CliError> {
        let ledger = self.existing_ledger()?;
        let status = ledger.status(txid)?;
        let confirmations = ledger.confirmations(txid)?;
        let height = ledger.find_tx(txid).map(|(h, _)| h);
        let label = match status {
            TxStatus::Pending => "Pending",
            TxStatus::Included => "Included",
            TxStatus::Verified => "Verified",
        };
        let mut text = format!("{label} ({})", plural(confirmations, "confirmation"));
        if let Some(h) = height {
            let _ = write!(text, " at height {h}");
        }
        text.push('\n');
        Ok(Outcome::success(
            "ledger status",
            EXIT_OK,
            text,
            json!({ "txid": txid, "status": status, "confirmations": confirmations, "height": height }),
        ))
    }

    fn integrity(&self) -> Result<Outcome, CliError> {
        if !self.cfg.chain_file.exists() {
            return Err(CliError::NoChain(self.cfg.chain_file.clone()));
        }
        let report = verify_chain_file(&self.cfg.chain_file, self.exec)?;
        Ok(integrity_only("ledger integrity", &report))
    }
}

fn anchored_text(a: &Anchored) -> String {
    format!("{} {} txid {}\n", a.code, a.digest, a.txid)
}

fn state_summary(s: &VerifiedState) -> String {
    match s.record.as_ref().map(|r| &r.body) {
        Some(tracechain_core::record::RecordBody::Update { state }) => state
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" "),
        Some(tracechain_core::record::RecordBody::Init { schema }) => {
            let names: Vec<&str> = schema.fields().iter().map(|f| f.name.as_str()).collect();
            format!("init [{}]", names.join(","))
        }
        Some(tracechain_core::record::RecordBody::Revoke { revokes, .. }) => format!("revokes {revokes}"),
        None => "unreadable".into(),
    }
}

fn integrity_line(r: &IntegrityReport) -> String {
    match (r.first_bad_height, &r.reason) {
        (None, _) => format!("ledger integrity: OK ({})\n", plural(r.blocks_checked, "block")),
        (Some(h), reason) => format!(
            "ledger integrity: FAILED at height {h}: {}\n",
            reason.as_deref().unwrap_or("unknown")
        ),
    }
}

fn integrity_only(command: &'static str, r: &IntegrityReport) -> Outcome {
    Outcome::success(
        command,
        if r.is_ok() { EXIT_OK } else { EXIT_VERIFY_FAILED },
        integrity_line(r),
        json!({ "integrity": r }),
    )
}
