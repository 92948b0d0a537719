//! Content-addressed blob store: `root/ab/cd/<sha256 hex>`.

use std::io;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

#[derive(Debug, Clone)]
pub struct BlobStore {
    root: PathBuf,
}

pub fn digest_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn is_digest(key: &str) -> bool {
    key.len() == 64 && key.bytes().all(|b| b.is_ascii_hexdigit())
}

impl BlobStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, digest: &str) -> PathBuf {
        self.root.join(&digest[0..2]).join(&digest[2..4]).join(digest)
    }

    pub fn contains(&self, digest: &str) -> bool {
        is_digest(digest) && self.path_for(digest).is_file()
    }

    /// Store bytes and return their digest. Existing blobs are not rewritten.
    pub fn put(&self, bytes: &[u8]) -> io::Result<String> {
        let digest = digest_hex(bytes);
        let path = self.path_for(&digest);
        if path.is_file() {
            return Ok(digest);
        }
        let dir = path.parent().expect("fan-out parent");
        std::fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(".{digest}.{}.tmp", std::process::id()));
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, &path)?;
        Ok(digest)
    }

    pub fn get(&self, digest: &str) -> io::Result<Vec<u8>> {
        if !is_digest(digest) {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, format!("not a digest: {digest}")));
        }
        std::fs::read(self.path_for(digest))
    }
}
