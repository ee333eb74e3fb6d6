//! Content-addressed blob store. Objects live at
//! `<root>/<first 2 hex chars>/<remaining 62 hex chars>` and are re-hashed
//! on every read.

use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::digest::{sha256, Digest32};
use crate::identity::{IdentityId, KeyResolver, PublicKey};

pub type BlobAddress = Digest32;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("blob {0} not found")]
    NotFound(BlobAddress),
    #[error("blob {address} is corrupt: stored bytes hash to {actual}")]
    IntegrityFailure {
        address: BlobAddress,
        actual: Digest32,
    },
    #[error("storage full while writing {0}")]
    StorageFull(PathBuf),
    #[error("I/O failure at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path, source: io::Error) -> StoreError {
    if source.kind() == io::ErrorKind::StorageFull {
        StoreError::StorageFull(path.to_path_buf())
    } else {
        StoreError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlobStore {
    root: PathBuf,
}

impl BlobStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| io_err(&root, e))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, address: &BlobAddress) -> PathBuf {
        let hex = address.to_hex();
        self.root.join(&hex[..2]).join(&hex[2..])
    }

    /// Stores `bytes` and returns their address. Re-putting existing content
    /// is a no-op.
    pub fn put(&self, bytes: &[u8]) -> Result<BlobAddress, StoreError> {
        let address = sha256(bytes);
        let path = self.path_for(&address);
        if path.exists() {
            return Ok(address);
        }
        let dir = path.parent().expect("sharded path has a parent");
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(dir, e))?;
        tmp.write_all(bytes).map_err(|e| io_err(tmp.path(), e))?;
        tmp.as_file().sync_all().map_err(|e| io_err(tmp.path(), e))?;
        // A concurrent writer of the same content may win; either copy is identical.
        tmp.persist(&path).map_err(|e| io_err(&path, e.error))?;
        Ok(address)
    }

    /// Bytes at `address`, verified against the address.
    pub fn get(&self, address: &BlobAddress) -> Result<Vec<u8>, StoreError> {
        let bytes = self.get_unverified(address)?;
        let actual = sha256(&bytes);
        if actual != *address {
            return Err(StoreError::IntegrityFailure {
                address: *address,
                actual,
            });
        }
        Ok(bytes)
    }

    /// Raw bytes at `address` without the hash check, for diagnostics.
    pub fn get_unverified(&self, address: &BlobAddress) -> Result<Vec<u8>, StoreError> {
        let path = self.path_for(address);
        match fs::read(&path) {
            Ok(bytes) => Ok(bytes),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(StoreError::NotFound(*address)),
            Err(e) => Err(io_err(&path, e)),
        }
    }

    pub fn contains(&self, address: &BlobAddress) -> bool {
        self.path_for(address).is_file()
    }

    /// Every address present on disk, sorted.
    pub fn addresses(&self) -> Result<Vec<BlobAddress>, StoreError> {
        let mut out = Vec::new();
        let shards = fs::read_dir(&self.root).map_err(|e| io_err(&self.root, e))?;
        for shard in shards.flatten() {
            let prefix = shard.file_name().to_string_lossy().into_owned();
            if prefix.len() != 2 || !shard.path().is_dir() {
                continue;
            }
            let entries = fs::read_dir(shard.path()).map_err(|e| io_err(&shard.path(), e))?;
            for entry in entries.flatten() {
                let rest = entry.file_name().to_string_lossy().into_owned();
                if let Ok(d) = Digest32::from_hex(&format!("{prefix}{rest}")) {
                    out.push(d);
                }
            }
        }
        out.sort();
        Ok(out)
    }
}

/// A public key stored as a raw 32-byte blob is addressed by
/// SHA-256(key), which is exactly the identity id, so the store doubles as
/// a self-verifying key directory.
impl KeyResolver for BlobStore {
    fn resolve(&self, id: &IdentityId) -> Option<PublicKey> {
        let bytes = self.get(id.digest()).ok()?;
        PublicKey::from_bytes(&bytes).ok()
    }
}

impl BlobStore {
    pub fn publish_key(&self, key: &PublicKey) -> Result<IdentityId, StoreError> {
        let address = self.put(key.as_bytes())?;
        Ok(IdentityId::from_digest(address))
    }
}
