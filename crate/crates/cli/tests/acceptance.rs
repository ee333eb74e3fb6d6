//! End-to-end acceptance suite. Runs as a plain binary (no libtest harness)
//! so every criterion prints its own PASS/FAIL line.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde_json::Value;
use tracechain_cli::run_args;
use tracechain_core::codec::{decode_payload, encode_payload, PAYLOAD_LEN};
use tracechain_core::identity::{keygen, Keystore, SecretKey};
use tracechain_core::ledger::LedgerError;
use tracechain_core::record::{canonicalize, parse_record, FieldSpec, Schema, Timestamp};
use tracechain_core::trace::{build_index, resolve_chain, Anomaly};
use tracechain_core::{
    hash_record, BlobStore, Digest32, IdentityId, Ledger, LedgerBackend, LedgerConfig, ProductId, TraceRecord,
    TxCode, TxStatus,
};

/// A scratch deployment driven through the CLI entry point.
struct Home {
    dir: tempfile::TempDir,
}

impl Home {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn run(&self, args: &[&str]) -> (u8, String, String) {
        let home = self.path().to_str().unwrap().to_string();
        let argv = ["tracechain", "--home", home.as_str()].into_iter().chain(args.iter().copied());
        run_args(argv, &|_| None)
    }

    fn json(&self, args: &[&str]) -> (u8, Value) {
        let mut full = vec!["--output", "json"];
        full.extend_from_slice(args);
        let (code, out, err) = self.run(&full);
        let v = serde_json::from_str(&out).unwrap_or_else(|e| panic!("bad json ({e}): {out} {err}"));
        (code, v)
    }

    fn ok(&self, args: &[&str]) -> String {
        let (code, out, err) = self.run(args);
        assert_eq!(code, 0, "{args:?} failed: {out}{err}");
        out
    }

    fn store(&self) -> BlobStore {
        BlobStore::open(self.path().join("store")).unwrap()
    }

    fn chain(&self) -> PathBuf {
        self.path().join("chain.jsonl")
    }

    /// An attested company identity and its auditor.
    fn company(&self) -> String {
        let auditor = self.ok(&["keygen", "--name", "Auditor"]).trim().to_string();
        let company = self.ok(&["keygen", "--name", "Acme Foods"]).trim().to_string();
        self.ok(&["--signer", &auditor, "attest", &company, "certified producer"]);
        company
    }
}

fn ts(s: i64) -> Timestamp {
    Timestamp::from_unix(s).unwrap()
}

fn at(s: i64) -> String {
    ts(s).to_string()
}

fn digest_of(r: &TraceRecord) -> Digest32 {
    hash_record(&canonicalize(r, true).unwrap())
}

fn random_text(rng: &mut ChaCha20Rng, max: usize) -> String {
    const ALPHABET: &[char] = &[
        'a', 'b', 'z', 'A', 'Q', '0', '9', ' ', '-', '_', '.', '&', '<', '>', '"', '\'', 'é', '°', '€', '中',
    ];
    let n = rng.gen_range(0..=max);
    (0..n).map(|_| *ALPHABET.choose(rng).unwrap()).collect()
}

fn random_name(rng: &mut ChaCha20Rng) -> String {
    const NAME: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789._-";
    let n = rng.gen_range(1..=12);
    (0..n).map(|_| *NAME.choose(rng).unwrap() as char).collect()
}

fn random_digest(rng: &mut ChaCha20Rng) -> Digest32 {
    Digest32::from_bytes(rng.gen())
}

fn random_record(rng: &mut ChaCha20Rng, key: &SecretKey) -> TraceRecord {
    let product = ProductId::new(random_name(rng)).unwrap();
    let timestamp = ts(rng.gen_range(0..=253_402_300_799));
    let n = rng.gen_range(1..=5);
    let r = match rng.gen_range(0..3) {
        0 => {
            let fields: BTreeMap<String, bool> = (0..n).map(|_| (random_name(rng), rng.gen())).collect();
            let schema = Schema::new(
                fields
                    .into_iter()
                    .map(|(name, required)| FieldSpec { name, required })
                    .collect(),
            )
            .unwrap();
            TraceRecord::init(product, schema, timestamp, key.id())
        }
        1 => {
            let state = (0..n).map(|_| (random_name(rng), random_text(rng, 20))).collect();
            TraceRecord::update(product, random_digest(rng), state, timestamp, key.id())
        }
        _ => {
            let reason = rng.gen::<bool>().then(|| random_text(rng, 30));
            TraceRecord::revoke(product, random_digest(rng), random_digest(rng), reason, timestamp, key.id())
        }
    };
    r.sign(key).unwrap()
}

fn c1_payload_cap() -> Result<String, String> {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let mut ledger = Ledger::new(LedgerConfig::default()).unwrap();
    for i in 0..1000 {
        let code = TxCode::ALL[rng.gen_range(0..3)];
        let payload = encode_payload(code, &random_digest(&mut rng));
        if payload.len() != PAYLOAD_LEN {
            return Err(format!("pair {i} encoded to {} bytes", payload.len()));
        }
        ledger.submit(&payload).map_err(|e| format!("pair {i} rejected: {e}"))?;
    }
    ledger.submit(&[0u8; 80]).map_err(|e| format!("80-byte payload rejected: {e}"))?;
    match ledger.submit(&[0u8; 81]) {
        Err(LedgerError::PayloadTooLarge(81)) => {}
        other => return Err(format!("81-byte payload not rejected: {other:?}")),
    }
    Ok("1000 payloads of 34 bytes accepted, 81 bytes rejected".into())
}

fn c2_latency() -> Result<String, String> {
    let cfg = LedgerConfig {
        block_interval: 600,
        confirmation_depth: 3,
        ..LedgerConfig::default()
    };
    let mut ledger = Ledger::new(cfg).unwrap();
    let txid = ledger.submit(&encode_payload(TxCode::IT, &Digest32::ZERO)).unwrap();
    let mut seen = Vec::new();
    let checkpoints = [(599, TxStatus::Pending), (600, TxStatus::Included), (1799, TxStatus::Included), (1800, TxStatus::Verified)];
    for (t, want) in checkpoints {
        ledger.advance(t - ledger.now()).unwrap();
        let got = ledger.status(&txid).unwrap();
        seen.push(format!("t={t}:{got:?}"));
        if got != want {
            return Err(format!("at t={t} status {got:?}, expected {want:?}"));
        }
    }

    // The same schedule through the CLI.
    let home = Home::new();
    let company = home.company();
    let out = home.ok(&["--signer", &company, "product", "init", "LAT-1", "--required", "site", "--at", &at(0)]);
    let txid = out.split_whitespace().nth(3).unwrap().to_string();
    home.ok(&["ledger", "advance", "--seconds", "600"]);
    let s = home.ok(&["ledger", "status", &txid]);
    if !s.starts_with("Included (1 confirmation)") {
        return Err(format!("cli after 600 s: {s}"));
    }
    home.ok(&["ledger", "advance", "--seconds", "1200"]);
    let s = home.ok(&["ledger", "status", &txid]);
    if !s.starts_with("Verified (3 confirmations)") {
        return Err(format!("cli after 1800 s: {s}"));
    }
    Ok(seen.join(" "))
}

fn c3_tamper() -> Result<String, String> {
    let home = Home::new();
    let company = home.company();
    let signer = ["--signer", company.as_str()];
    let mut digests = Vec::new();
    let run = |args: &[&str]| {
        let mut full = signer.to_vec();
        full.extend_from_slice(args);
        home.json(&full)
    };
    let (_, v) = run(&["product", "init", "TMP-1", "--required", "site", "--required", "lot", "--at", &at(100)]);
    digests.push(v["result"]["digest"].as_str().unwrap().to_string());
    for u in 0..5 {
        let site = format!("site={u}");
        let (code, v) = run(&["product", "update", "TMP-1", "--set", &site, "--set", "lot=L1", "--at", &at(200 + u)]);
        assert_eq!(code, 0, "{v}");
        digests.push(v["result"]["digest"].as_str().unwrap().to_string());
    }
    home.ok(&["ledger", "advance", "--seconds", "1800"]);
    let (code, v) = home.json(&["trace", "TMP-1"]);
    if code != 0 {
        return Err(format!("untampered product does not verify: {v}"));
    }

    let store = home.store();
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let mut detected = 0;
    for trial in 0..100 {
        let target: Digest32 = digests.choose(&mut rng).unwrap().parse().unwrap();
        let path = store.path_for(&target);
        let original = std::fs::read(&path).unwrap();
        let mut bytes = original.clone();
        let i = rng.gen_range(0..bytes.len());
        bytes[i] ^= rng.gen_range(1..=255u8);
        std::fs::write(&path, &bytes).unwrap();

        let (code, v) = home.json(&["trace", "TMP-1"]);
        std::fs::write(&path, &original).unwrap();
        let target_hex = target.to_hex();
        let report = &v["result"]["report"];
        let states = std::iter::once(&report["init"]).chain(report["states"].as_array().into_iter().flatten());
        let flagged = states
            .filter(|s| s["digest"] == target_hex.as_str())
            .any(|s| s["verdicts"]["hash_anchored"] == false);
        if flagged && code != 0 {
            detected += 1;
        } else {
            eprintln!("  trial {trial}: byte {i} of {target_hex} exit {code} flagged {flagged}");
        }
    }
    if detected == 100 {
        Ok("100/100 tampered files flagged hash_anchored=false with nonzero exit".into())
    } else {
        Err(format!("{detected}/100 detected"))
    }
}

/// Every ordering starting at an init that follows prev links through all
/// records.
fn oracle_orderings(records: &[TraceRecord]) -> Vec<Vec<Digest32>> {
    fn permute(items: &mut Vec<usize>, k: usize, f: &mut dyn FnMut(&[usize])) {
        if k == items.len() {
            f(items);
            return;
        }
        for i in k..items.len() {
            items.swap(k, i);
            permute(items, k + 1, f);
            items.swap(k, i);
        }
    }
    let digests: Vec<Digest32> = records.iter().map(digest_of).collect();
    let mut found = Vec::new();
    permute(&mut (0..records.len()).collect(), 0, &mut |p| {
        if records[p[0]].prev.is_none() && p.windows(2).all(|w| records[w[1]].prev == Some(digests[w[0]])) {
            found.push(p.iter().map(|&i| digests[i]).collect());
        }
    });
    found
}

fn c4_oracle() -> Result<String, String> {
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let dir = tempfile::tempdir().unwrap();
    let store = BlobStore::open(dir.path()).unwrap();
    let (key, _) = keygen().unwrap();
    store.publish_key(&key.public_key()).unwrap();
    let mut ledger = Ledger::new(LedgerConfig::default()).unwrap();

    let mut products = Vec::new();
    let mut all = Vec::new();
    let mut adversarial = 0;
    for p in 0..200 {
        let product = ProductId::new(format!("ORC-{p:03}")).unwrap();
        let n = rng.gen_range(2..=6);
        let schema = Schema::new(vec![FieldSpec::required("site")]).unwrap();
        let mut records = vec![TraceRecord::init(product.clone(), schema, ts(10), key.id()).sign(&key).unwrap()];
        let fork = n >= 3 && rng.gen_bool(0.25);
        for u in 1..n {
            let prev = if fork && u == n - 1 {
                digest_of(&records[rng.gen_range(0..n - 2)])
            } else {
                digest_of(&records[u - 1])
            };
            let state = [("site".to_string(), format!("s{u}-{}", rng.gen::<u16>()))].into();
            records.push(TraceRecord::update(product.clone(), prev, state, ts(10 + u as i64), key.id()).sign(&key).unwrap());
        }
        adversarial += fork as usize;
        all.extend(records.iter().cloned());
        products.push((product, records));
    }
    all.shuffle(&mut rng);
    for (i, r) in all.iter().enumerate() {
        let digest = store.put(&canonicalize(r, true).unwrap()).unwrap();
        ledger.submit(&encode_payload(TxCode::for_kind(r.kind()), &digest)).unwrap();
        if i % 7 == 6 {
            ledger.advance(600).unwrap();
        }
    }
    ledger.advance(600 * 4).unwrap();
    let index = build_index(&ledger, &store).map_err(|e| e.to_string())?;

    for (product, records) in &products {
        let expected = oracle_orderings(records);
        let report = resolve_chain(product, &index, &store).map_err(|e| format!("{product}: {e}"))?;
        let forked = report.anomalies.iter().any(|a| matches!(a, Anomaly::Fork { .. }));
        match expected.as_slice() {
            [] if forked => {}
            [order] if !forked => {
                let got: Vec<Digest32> = report.chain().map(|s| s.digest).collect();
                if &got != order {
                    return Err(format!("{product}: resolved order differs from oracle"));
                }
            }
            _ => {
                return Err(format!(
                    "{product}: oracle found {} orderings, resolver fork={forked}",
                    expected.len()
                ))
            }
        }
    }
    Ok(format!("200 products ({adversarial} forked) match the permutation oracle"))
}

fn c5_round_trips() -> Result<String, String> {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let (key, _) = keygen().unwrap();
    for i in 0..1000 {
        let r = random_record(&mut rng, &key);
        let parsed = parse_record(&canonicalize(&r, true).unwrap()).map_err(|e| format!("record {i}: {e}"))?;
        if parsed != r {
            return Err(format!("record {i} did not round-trip"));
        }
    }
    for i in 0..1000 {
        let code = TxCode::ALL[rng.gen_range(0..3)];
        let digest = random_digest(&mut rng);
        let decoded = decode_payload(&encode_payload(code, &digest)).map_err(|e| format!("payload {i}: {e}"))?;
        if (decoded.code, decoded.digest) != (code, digest) {
            return Err(format!("payload {i} did not round-trip"));
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let store = BlobStore::open(dir.path()).unwrap();
    for i in 0..1000 {
        let len = rng.gen_range(0..2048);
        let blob: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        let address = store.put(&blob).map_err(|e| e.to_string())?;
        if store.get(&address).map_err(|e| e.to_string())? != blob {
            return Err(format!("blob {i} did not round-trip"));
        }
    }
    Ok("1000 records, 1000 payloads, 1000 blobs round-trip".into())
}

fn c6_lifecycle() -> Result<String, String> {
    let home = Home::new();
    let company = home.company();
    let s = ["--signer", company.as_str()];
    let with = |args: &[&str]| {
        let mut full = s.to_vec();
        full.extend_from_slice(args);
        home.json(&full)
    };
    let (code, v) = with(&["product", "init", "LC-1", "--required", "location", "--required", "batch", "--at", &at(1_000)]);
    if code != 0 {
        return Err(format!("init: {v}"));
    }
    let mut updates = Vec::new();
    for u in 0..5 {
        let loc = format!("location=site-{u}");
        let (code, v) = with(&["product", "update", "LC-1", "--set", &loc, "--set", "batch=B42", "--at", &at(1_100 + u)]);
        if code != 0 {
            return Err(format!("update {u}: {v}"));
        }
        updates.push(v["result"]["digest"].as_str().unwrap().to_string());
    }
    let (code, v) = with(&["product", "revoke", "LC-1", &updates[2], "--reason", "scanner fault", "--at", &at(1_200)]);
    if code != 0 {
        return Err(format!("revoke: {v}"));
    }
    home.ok(&["ledger", "advance", "--seconds", "1800"]);

    let (code, v) = home.json(&["trace", "LC-1"]);
    let report = &v["result"]["report"];
    let states = report["states"].as_array().cloned().unwrap_or_default();
    let revoked: Vec<&Value> = states.iter().filter(|s| s["revoked"] == true).collect();
    let all_true = std::iter::once(&report["init"])
        .chain(states.iter())
        .all(|s| s["verdicts"].as_object().is_some_and(|m| m.values().all(|b| b == true)));
    if code != 0 || states.len() != 6 || revoked.len() != 1 || !all_true || revoked[0]["digest"] != updates[2].as_str() {
        return Err(format!(
            "trace exit {code}, {} states, {} revoked, all verdicts {all_true}",
            states.len(),
            revoked.len()
        ));
    }

    let (code, out, _) = home.run(&["ledger", "integrity"]);
    if code != 0 || !out.contains("OK") {
        return Err(format!("integrity on untouched chain: {out}"));
    }

    let chain = std::fs::read(home.chain()).unwrap();
    let lines: Vec<&[u8]> = chain.split(|&b| b == b'\n').filter(|l| !l.is_empty()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    let height = rng.gen_range(1..lines.len());
    let start: usize = lines[..height].iter().map(|l| l.len() + 1).sum();
    let offset = start + rng.gen_range(0..lines[height].len());
    let mut edited = chain.clone();
    edited[offset] = if edited[offset] == b'0' { b'1' } else { b'0' };
    std::fs::write(home.chain(), &edited).unwrap();
    let (code, v) = home.json(&["ledger", "integrity"]);
    let bad = v["result"]["integrity"]["first_bad_height"].as_u64();
    if code == 0 || bad != Some(height as u64) {
        return Err(format!("edit at height {height} reported as {bad:?} (exit {code})"));
    }
    Ok(format!(
        "6 states, 1 revoked, all verdicts true; chain edit at height {height} diagnosed"
    ))
}

fn c7_conformance() -> Result<String, String> {
    let home = Home::new();
    let company = home.company();
    let s = ["--signer", company.as_str()];
    let with = |args: &[&str]| {
        let mut full = s.to_vec();
        full.extend_from_slice(args);
        home.json(&full)
    };
    let (_, v) = with(&["product", "init", "CF-1", "--required", "location", "--required", "batch", "--at", &at(50)]);
    let init: Digest32 = v["result"]["digest"].as_str().unwrap().parse().unwrap();
    let (code, v) = with(&["product", "update", "CF-1", "--set", "location=dock", "--at", &at(60)]);
    let missing = &v["error"]["missing"];
    if code == 0 || v["error"]["kind"] != "spec_violation" || *missing != serde_json::json!(["batch"]) {
        return Err(format!("update without batch not rejected properly: {v}"));
    }

    // Inject a nonconformant record directly, bypassing the CLI checks.
    let signer: IdentityId = company.parse().unwrap();
    let key = Keystore::open(home.path().join("keys")).unwrap().load_key(&signer).unwrap();
    let state: BTreeMap<String, String> = [("location".to_string(), "dock".to_string())].into();
    let rogue = TraceRecord::update(ProductId::new("CF-1").unwrap(), init, state, ts(70), signer)
        .sign(&key)
        .unwrap();
    let digest = home.store().put(&canonicalize(&rogue, true).unwrap()).unwrap();
    {
        let mut ledger = Ledger::open(home.chain(), LedgerConfig::default()).unwrap();
        ledger.submit(&encode_payload(TxCode::UT, &digest)).unwrap();
    }
    home.ok(&["ledger", "advance", "--seconds", "1800"]);
    let (code, v) = home.json(&["trace", "CF-1"]);
    let states = v["result"]["report"]["states"].as_array().cloned().unwrap_or_default();
    let flagged = states
        .iter()
        .any(|s| s["digest"] == digest.to_hex().as_str() && s["verdicts"]["spec_conformant"] == false);
    if code == 0 || !flagged {
        return Err(format!("injected record not flagged (exit {code}): {v}"));
    }
    Ok("missing field named at update; injected record flagged spec_conformant=false".into())
}

type Criterion = (&'static str, Duration, fn() -> Result<String, String>);

fn main() {
    let criteria: [Criterion; 7] = [
        ("1 payload cap", Duration::from_secs(1), c1_payload_cap),
        ("2 inclusion/verification latency", Duration::from_secs(1), c2_latency),
        ("3 tamper detection", Duration::from_secs(10), c3_tamper),
        ("4 oracle equivalence", Duration::from_secs(30), c4_oracle),
        ("5 round-trip properties", Duration::from_secs(30), c5_round_trips),
        ("6 end-to-end lifecycle", Duration::from_secs(5), c6_lifecycle),
        ("7 conformance gate", Duration::from_secs(1), c7_conformance),
    ];
    let mut failures = 0;
    for (name, limit, f) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = match result {
            Ok(detail) if elapsed > limit => Err(format!("{detail}; took {elapsed:.2?}, limit {limit:?}")),
            other => other,
        };
        match result {
            Ok(detail) => println!("PASS  {name:<34} {elapsed:>10.2?} (limit {limit:?})  {detail}"),
            Err(why) => {
                failures += 1;
                println!("FAIL  {name:<34} {elapsed:>10.2?} (limit {limit:?})  {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failures} failed", 7 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
