//! Company identities: Ed25519 key pairs, self-signed profiles, peer
//! attestations and the attestation-count trust policy.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ed25519_dalek::{Signer as _, SigningKey, VerifyingKey};
use rand::RngCore as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::digest::{sha256, Digest32, DigestParseError};
use crate::xml::{self, Element, XmlWriter};

pub const PUBLIC_KEY_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;

/// Default number of distinct attestations a signer needs.
pub const DEFAULT_THRESHOLD: usize = 1;

#[derive(Debug, Error)]
pub enum IdentityError {
    #[error("entropy source unavailable: {0}")]
    EntropyUnavailable(String),
    #[error("malformed key: {0}")]
    MalformedKey(String),
    #[error("malformed signature: {0}")]
    MalformedSignature(String),
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("invalid attestation: {0}")]
    InvalidAttestation(String),
    #[error("identity {0} cannot attest itself")]
    SelfAttestation(IdentityId),
    #[error("malformed document: {0}")]
    Malformed(String),
    #[error("no key for identity {0} in keystore")]
    UnknownIdentity(IdentityId),
    #[error("keystore I/O failure at {path}: {source}")]
    Keystore {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// SHA-256 of a public key; the stable identifier of a company.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct IdentityId(Digest32);

impl IdentityId {
    pub fn from_public_key(key: &PublicKey) -> Self {
        Self(sha256(key.as_bytes()))
    }

    pub fn from_digest(digest: Digest32) -> Self {
        Self(digest)
    }

    pub fn digest(&self) -> &Digest32 {
        &self.0
    }
}

impl fmt::Display for IdentityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.0, f)
    }
}

impl fmt::Debug for IdentityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "IdentityId({})", self.0.short())
    }
}

impl FromStr for IdentityId {
    type Err = DigestParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Digest32::from_hex(s).map(Self)
    }
}

impl Serialize for IdentityId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.0.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for IdentityId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        Digest32::deserialize(deserializer).map(Self)
    }
}

/// A validated Ed25519 verifying key.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct PublicKey(VerifyingKey);

impl PublicKey {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IdentityError> {
        let arr = <[u8; PUBLIC_KEY_LEN]>::try_from(bytes).map_err(|_| {
            IdentityError::MalformedKey(format!("public key must be 32 bytes, got {}", bytes.len()))
        })?;
        VerifyingKey::from_bytes(&arr)
            .map(Self)
            .map_err(|e| IdentityError::MalformedKey(e.to_string()))
    }

    pub fn from_hex(s: &str) -> Result<Self, IdentityError> {
        let bytes = hex::decode(s).map_err(|e| IdentityError::MalformedKey(e.to_string()))?;
        Self::from_bytes(&bytes)
    }

    pub fn as_bytes(&self) -> &[u8; PUBLIC_KEY_LEN] {
        self.0.as_bytes()
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.as_bytes())
    }

    pub fn id(&self) -> IdentityId {
        IdentityId::from_public_key(self)
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", &self.to_hex()[..12])
    }
}

pub struct SecretKey(SigningKey);

impl SecretKey {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IdentityError> {
        let arr = <[u8; 32]>::try_from(bytes).map_err(|_| {
            IdentityError::MalformedKey(format!("secret key must be 32 bytes, got {}", bytes.len()))
        })?;
        Ok(Self(SigningKey::from_bytes(&arr)))
    }

    pub fn public_key(&self) -> PublicKey {
        PublicKey(self.0.verifying_key())
    }

    pub fn id(&self) -> IdentityId {
        self.public_key().id()
    }

    fn to_hex(&self) -> String {
        hex::encode(self.0.to_bytes())
    }
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SecretKey(for {})", self.id().0.short())
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature(pub [u8; SIGNATURE_LEN]);

impl Signature {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, IdentityError> {
        if s.len() != SIGNATURE_LEN * 2 || s.bytes().any(|b| b.is_ascii_uppercase()) {
            return Err(IdentityError::MalformedSignature(
                "expected 128 lowercase hex characters".into(),
            ));
        }
        let mut out = [0u8; SIGNATURE_LEN];
        hex::decode_to_slice(s, &mut out)
            .map_err(|e| IdentityError::MalformedSignature(e.to_string()))?;
        Ok(Self(out))
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({}..)", &self.to_hex()[..12])
    }
}

impl Serialize for Signature {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Signature {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Self::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// Deterministic Ed25519 signature.
pub fn sign_bytes(key: &SecretKey, bytes: &[u8]) -> Signature {
    Signature(key.0.sign(bytes).to_bytes())
}

pub fn verify_bytes(key: &PublicKey, bytes: &[u8], signature: &Signature) -> bool {
    let sig = ed25519_dalek::Signature::from_bytes(&signature.0);
    key.0.verify_strict(bytes, &sig).is_ok()
}

/// Looks up the verifying key of an identity.
pub trait KeyResolver {
    fn resolve(&self, id: &IdentityId) -> Option<PublicKey>;
}

impl KeyResolver for HashMap<IdentityId, PublicKey> {
    fn resolve(&self, id: &IdentityId) -> Option<PublicKey> {
        self.get(id).copied()
    }
}

impl<R: KeyResolver + ?Sized> KeyResolver for &R {
    fn resolve(&self, id: &IdentityId) -> Option<PublicKey> {
        (**self).resolve(id)
    }
}

fn valid_attr_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'))
}

/// A company profile. Unsigned until [`finalize_profile`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdentityProfile {
    pub id: IdentityId,
    pub public_key: PublicKey,
    pub info: BTreeMap<String, String>,
    pub self_signature: Option<Signature>,
}

/// Fresh key pair plus an unsigned profile skeleton.
pub fn keygen() -> Result<(SecretKey, IdentityProfile), IdentityError> {
    let mut seed = [0u8; 32];
    rand::rngs::OsRng
        .try_fill_bytes(&mut seed)
        .map_err(|e| IdentityError::EntropyUnavailable(e.to_string()))?;
    let secret = SecretKey(SigningKey::from_bytes(&seed));
    let public_key = secret.public_key();
    let profile = IdentityProfile {
        id: public_key.id(),
        public_key,
        info: BTreeMap::new(),
        self_signature: None,
    };
    Ok((secret, profile))
}

impl IdentityProfile {
    fn validate(&self) -> Result<(), IdentityError> {
        if self.id != self.public_key.id() {
            return Err(IdentityError::InvalidProfile("id does not match public key".into()));
        }
        match self.info.get("name") {
            Some(name) if !name.trim().is_empty() => {}
            _ => return Err(IdentityError::InvalidProfile("missing non-empty \"name\"".into())),
        }
        for (k, v) in &self.info {
            if !valid_attr_name(k) {
                return Err(IdentityError::InvalidProfile(format!("bad attribute name {k:?}")));
            }
            if !xml::is_line_safe(v) {
                return Err(IdentityError::InvalidProfile(format!(
                    "attribute {k:?} contains control characters"
                )));
            }
        }
        Ok(())
    }

    pub fn canonical_bytes(&self, include_signature: bool) -> Result<Vec<u8>, IdentityError> {
        self.validate()?;
        let mut w = XmlWriter::new();
        w.open("identity-profile", &[("version", "1")]);
        w.leaf("id", &[], &self.id.to_string());
        w.leaf("public-key", &[], &self.public_key.to_hex());
        w.open("info", &[]);
        for (k, v) in &self.info {
            w.leaf("attr", &[("name", k)], v);
        }
        w.close("info");
        if include_signature {
            let sig = self
                .self_signature
                .ok_or_else(|| IdentityError::InvalidProfile("profile is unsigned".into()))?;
            w.leaf("signature", &[], &sig.to_hex());
        }
        w.close("identity-profile");
        Ok(w.finish())
    }

    pub fn verify(&self) -> bool {
        match (&self.self_signature, self.canonical_bytes(false)) {
            (Some(sig), Ok(bytes)) => verify_bytes(&self.public_key, &bytes, sig),
            _ => false,
        }
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, IdentityError> {
        let text = std::str::from_utf8(bytes).map_err(|e| IdentityError::Malformed(e.to_string()))?;
        let root = xml::parse_document(text).map_err(|e| IdentityError::Malformed(e.to_string()))?;
        if root.name != "identity-profile" || root.attr("version") != Some("1") {
            return Err(IdentityError::Malformed("expected <identity-profile version=\"1\">".into()));
        }
        let id: IdentityId = leaf(&root, "id")?
            .parse()
            .map_err(|e: DigestParseError| IdentityError::Malformed(e.to_string()))?;
        let public_key = PublicKey::from_hex(leaf(&root, "public-key")?)?;
        let mut info = BTreeMap::new();
        if let Some(el) = root.child("info") {
            for attr in el.children_named("attr") {
                let name = attr
                    .attr("name")
                    .ok_or_else(|| IdentityError::Malformed("<attr> without name".into()))?;
                info.insert(name.to_string(), attr.text.clone());
            }
        }
        let self_signature = match root.child("signature") {
            Some(el) => Some(Signature::from_hex(&el.text)?),
            None => None,
        };
        let profile = Self {
            id,
            public_key,
            info,
            self_signature,
        };
        if profile.canonical_bytes(profile.self_signature.is_some())? != bytes {
            return Err(IdentityError::Malformed("profile is not in canonical form".into()));
        }
        Ok(profile)
    }
}

fn leaf<'a>(root: &'a Element, name: &str) -> Result<&'a str, IdentityError> {
    root.child(name)
        .map(|e| e.text.as_str())
        .ok_or_else(|| IdentityError::Malformed(format!("missing <{name}>")))
}

/// Signs the profile with the company's key. The info map must carry a
/// non-empty `name`.
pub fn finalize_profile(
    key: &SecretKey,
    mut profile: IdentityProfile,
) -> Result<IdentityProfile, IdentityError> {
    if key.public_key() != profile.public_key {
        return Err(IdentityError::InvalidProfile("key does not match profile".into()));
    }
    let bytes = profile.canonical_bytes(false)?;
    profile.self_signature = Some(sign_bytes(key, &bytes));
    Ok(profile)
}

/// A signed statement by `attestor` vouching for `subject`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attestation {
    pub subject: IdentityId,
    pub attestor: IdentityId,
    pub statement: String,
    pub signature: Signature,
}

fn write_attestation_body(
    w: &mut XmlWriter,
    subject: &IdentityId,
    attestor: &IdentityId,
    statement: &str,
    signature: Option<&Signature>,
) {
    w.open("attestation", &[("version", "1")]);
    w.leaf("subject", &[], &subject.to_string());
    w.leaf("attestor", &[], &attestor.to_string());
    w.leaf("statement", &[], statement);
    if let Some(sig) = signature {
        w.leaf("signature", &[], &sig.to_hex());
    }
    w.close("attestation");
}

fn attestation_signing_bytes(subject: &IdentityId, attestor: &IdentityId, statement: &str) -> Vec<u8> {
    let mut w = XmlWriter::new();
    write_attestation_body(&mut w, subject, attestor, statement, None);
    w.finish()
}

impl Attestation {
    pub fn create(
        attestor_key: &SecretKey,
        subject: IdentityId,
        statement: &str,
    ) -> Result<Self, IdentityError> {
        let attestor = attestor_key.id();
        if attestor == subject {
            return Err(IdentityError::SelfAttestation(subject));
        }
        if !xml::is_line_safe(statement) {
            return Err(IdentityError::InvalidAttestation(
                "statement contains control characters".into(),
            ));
        }
        let bytes = attestation_signing_bytes(&subject, &attestor, statement);
        Ok(Self {
            subject,
            attestor,
            statement: statement.to_string(),
            signature: sign_bytes(attestor_key, &bytes),
        })
    }

    pub fn verify(&self, attestor_key: &PublicKey) -> bool {
        if self.attestor == self.subject || attestor_key.id() != self.attestor {
            return false;
        }
        let bytes = attestation_signing_bytes(&self.subject, &self.attestor, &self.statement);
        verify_bytes(attestor_key, &bytes, &self.signature)
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut w = XmlWriter::new();
        write_attestation_body(
            &mut w,
            &self.subject,
            &self.attestor,
            &self.statement,
            Some(&self.signature),
        );
        w.finish()
    }

    fn from_element(el: &Element) -> Result<Self, IdentityError> {
        if el.name != "attestation" || el.attr("version") != Some("1") {
            return Err(IdentityError::Malformed("expected <attestation version=\"1\">".into()));
        }
        let parse_id = |name: &str| -> Result<IdentityId, IdentityError> {
            leaf(el, name)?
                .parse()
                .map_err(|e: DigestParseError| IdentityError::Malformed(e.to_string()))
        };
        Ok(Self {
            subject: parse_id("subject")?,
            attestor: parse_id("attestor")?,
            statement: leaf(el, "statement")?.to_string(),
            signature: Signature::from_hex(leaf(el, "signature")?)?,
        })
    }
}

/// Serializes an attestation list file (`<attestations>` root).
pub fn attestations_to_bytes(list: &[Attestation]) -> Vec<u8> {
    let mut w = XmlWriter::new();
    w.open("attestations", &[("version", "1")]);
    for a in list {
        write_attestation_body(&mut w, &a.subject, &a.attestor, &a.statement, Some(&a.signature));
    }
    w.close("attestations");
    w.finish()
}

pub fn attestations_from_bytes(bytes: &[u8]) -> Result<Vec<Attestation>, IdentityError> {
    let text = std::str::from_utf8(bytes).map_err(|e| IdentityError::Malformed(e.to_string()))?;
    let root = xml::parse_document(text).map_err(|e| IdentityError::Malformed(e.to_string()))?;
    if root.name != "attestations" {
        return Err(IdentityError::Malformed("expected <attestations> root".into()));
    }
    let list = root
        .children
        .iter()
        .map(Attestation::from_element)
        .collect::<Result<Vec<_>, _>>()?;
    if attestations_to_bytes(&list) != bytes {
        return Err(IdentityError::Malformed("attestation file is not in canonical form".into()));
    }
    Ok(list)
}

/// Number of distinct attestors with a valid signature over `subject`.
/// Self-attestations, unresolvable attestors and bad signatures count zero.
pub fn trust_score<'a, R, I>(subject: &IdentityId, attestations: I, keys: &R) -> usize
where
    R: KeyResolver + ?Sized,
    I: IntoIterator<Item = &'a Attestation>,
{
    attestations
        .into_iter()
        .filter(|a| a.subject == *subject && a.attestor != *subject)
        .filter(|a| keys.resolve(&a.attestor).is_some_and(|k| a.verify(&k)))
        .map(|a| a.attestor)
        .collect::<BTreeSet<_>>()
        .len()
}

pub fn meets_threshold(score: usize, threshold: usize) -> bool {
    score >= threshold
}

/// Directory of `<identity-id>.key` files plus profiles and the local
/// attestation list.
#[derive(Debug, Clone)]
pub struct Keystore {
    root: PathBuf,
}

const ATTESTATIONS_FILE: &str = "attestations.xml";

impl Keystore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, IdentityError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|source| IdentityError::Keystore {
            path: root.clone(),
            source,
        })?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn key_path(&self, id: &IdentityId) -> PathBuf {
        self.root.join(format!("{id}.key"))
    }

    fn profile_path(&self, id: &IdentityId) -> PathBuf {
        self.root.join(format!("{id}.profile.xml"))
    }

    fn write_atomic(&self, path: &Path, bytes: &[u8], private: bool) -> Result<(), IdentityError> {
        let io_err = |source| IdentityError::Keystore {
            path: path.to_path_buf(),
            source,
        };
        let mut tmp = tempfile::NamedTempFile::new_in(&self.root).map_err(io_err)?;
        #[cfg(unix)]
        if private {
            use std::os::unix::fs::PermissionsExt;
            tmp.as_file()
                .set_permissions(fs::Permissions::from_mode(0o600))
                .map_err(io_err)?;
        }
        #[cfg(not(unix))]
        let _ = private;
        tmp.write_all(bytes).map_err(io_err)?;
        tmp.persist(path).map_err(|e| io_err(e.error))?;
        Ok(())
    }

    pub fn save_key(&self, key: &SecretKey) -> Result<PathBuf, IdentityError> {
        let path = self.key_path(&key.id());
        let body = format!("{}\n{}\n", key.to_hex(), key.public_key().to_hex());
        self.write_atomic(&path, body.as_bytes(), true)?;
        Ok(path)
    }

    pub fn load_key(&self, id: &IdentityId) -> Result<SecretKey, IdentityError> {
        let path = self.key_path(id);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(IdentityError::UnknownIdentity(*id))
            }
            Err(source) => return Err(IdentityError::Keystore { path, source }),
        };
        let mut lines = text.lines();
        let secret_hex = lines.next().unwrap_or_default();
        let public_hex = lines.next().unwrap_or_default();
        let secret_bytes =
            hex::decode(secret_hex).map_err(|e| IdentityError::MalformedKey(e.to_string()))?;
        let key = SecretKey::from_bytes(&secret_bytes)?;
        if key.public_key() != PublicKey::from_hex(public_hex)? || key.id() != *id {
            return Err(IdentityError::MalformedKey(format!(
                "key file {} does not match its identity",
                path.display()
            )));
        }
        Ok(key)
    }

    pub fn save_profile(&self, profile: &IdentityProfile) -> Result<PathBuf, IdentityError> {
        let path = self.profile_path(&profile.id);
        self.write_atomic(&path, &profile.canonical_bytes(true)?, false)?;
        Ok(path)
    }

    pub fn load_profile(&self, id: &IdentityId) -> Result<Option<IdentityProfile>, IdentityError> {
        let path = self.profile_path(id);
        match fs::read(&path) {
            Ok(bytes) => IdentityProfile::parse(&bytes).map(Some),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(source) => Err(IdentityError::Keystore { path, source }),
        }
    }

    /// Public keys of every identity whose profile is in this keystore.
    pub fn known_keys(&self) -> Result<HashMap<IdentityId, PublicKey>, IdentityError> {
        let mut out = HashMap::new();
        let entries = fs::read_dir(&self.root).map_err(|source| IdentityError::Keystore {
            path: self.root.clone(),
            source,
        })?;
        for entry in entries.flatten() {
            let name = entry.file_name();
            let Some(stem) = name.to_str().and_then(|n| n.strip_suffix(".profile.xml")) else {
                continue;
            };
            if let Ok(id) = stem.parse::<IdentityId>() {
                if let Some(profile) = self.load_profile(&id)? {
                    out.insert(id, profile.public_key);
                }
            }
        }
        Ok(out)
    }

    pub fn attestations(&self) -> Result<Vec<Attestation>, IdentityError> {
        let path = self.root.join(ATTESTATIONS_FILE);
        match fs::read(&path) {
            Ok(bytes) => attestations_from_bytes(&bytes),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(source) => Err(IdentityError::Keystore { path, source }),
        }
    }

    pub fn append_attestation(&self, attestation: Attestation) -> Result<(), IdentityError> {
        let mut list = self.attestations()?;
        list.push(attestation);
        let path = self.root.join(ATTESTATIONS_FILE);
        self.write_atomic(&path, &attestations_to_bytes(&list), false)
    }
}
