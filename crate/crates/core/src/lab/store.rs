//! Content-addressed artifact store with immutable stage manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cav::Activations;
use crate::error::{Error, Result};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const ACTIVATION_MAGIC: [u8; 4] = *b"CAVA";
pub const ACTIVATION_VERSION: u32 = 1;

/// Hex length of the digests used in artifact names.
const DIGEST_CHARS: usize = 16;

/// Short sha256 digest of a value's canonical JSON encoding.
pub fn digest_of<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(digest_bytes(&bytes))
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let full = hex::encode(h.finalize());
    full[..DIGEST_CHARS].to_string()
}

/// Full sha256 of a file, for manifests.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(hex::encode(h.finalize()))
}

/// Record of one stage run: what went in and what came out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub stage: String,
    pub digest: String,
    /// Stage name to digest for every artifact this stage read.
    pub upstream: BTreeMap<String, String>,
    /// The configuration that determines this stage's output.
    pub inputs: serde_json::Value,
    /// Relative artifact path to its sha256.
    pub artifacts: BTreeMap<String, String>,
    /// Headline numbers.
    pub summary: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(root.join("manifests"))?;
        Ok(Store { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Directory `kind/digest`, created on demand.
    pub fn dir(&self, kind: &str, digest: &str) -> Result<PathBuf> {
        let d = self.root.join(kind).join(digest);
        std::fs::create_dir_all(&d)?;
        Ok(d)
    }

    /// Same path as [`Store::dir`] without creating it.
    pub fn dir_path(&self, kind: &str, digest: &str) -> PathBuf {
        self.root.join(kind).join(digest)
    }

    pub fn manifest_path(&self, stage: &str, digest: &str) -> PathBuf {
        self.root
            .join("manifests")
            .join(format!("{stage}-{digest}.json"))
    }

    pub fn has(&self, stage: &str, digest: &str) -> bool {
        self.manifest_path(stage, digest).is_file()
    }

    pub fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.root)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }

    /// Writes a manifest once. An existing manifest must match byte for byte.
    pub fn write_manifest(&self, manifest: &StageManifest) -> Result<PathBuf> {
        let path = self.manifest_path(&manifest.stage, &manifest.digest);
        let bytes = serde_json::to_vec_pretty(manifest)?;
        if let Ok(existing) = std::fs::read(&path) {
            if existing != bytes {
                return Err(Error::format(
                    &path,
                    "manifest already exists with different content",
                ));
            }
            return Ok(path);
        }
        write_atomic(&path, &bytes)?;
        Ok(path)
    }

    /// Loads a manifest, failing with a missing-artifact error naming the store.
    pub fn read_manifest(&self, stage: &str, digest: &str) -> Result<StageManifest> {
        let path = self.manifest_path(stage, digest);
        let bytes = std::fs::read(&path).map_err(|_| {
            Error::MissingArtifact(format!(
                "no `{stage}` artifact {digest} in store {} (run `{stage}` first)",
                self.root.display()
            ))
        })?;
        let m: StageManifest =
            serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, e.to_string()))?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::SchemaMismatch {
                expected: MANIFEST_SCHEMA_VERSION,
                found: m.schema_version,
            });
        }
        Ok(m)
    }

    /// Hashes every listed artifact for a manifest.
    pub fn hash_artifacts(&self, paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
        paths
            .iter()
            .map(|p| Ok((self.relative(p), file_sha256(p)?)))
            .collect()
    }
}

/// Write to a sibling temp file, then rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes =
        std::fs::read(path).map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

/// Binary activation matrix: magic, version, rows, dim, f32 little-endian.
pub fn encode_activations(acts: &Activations) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + 4 * acts.data.len());
    buf.extend_from_slice(&ACTIVATION_MAGIC);
    buf.extend_from_slice(&ACTIVATION_VERSION.to_le_bytes());
    buf.extend_from_slice(&(acts.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(acts.dim as u32).to_le_bytes());
    for v in &acts.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_activations(bytes: &[u8], path: &Path) -> Result<Activations> {
    let fail = |reason: &str| Error::format(path, reason.to_string());
    if bytes.len() < 16 || bytes[..4] != ACTIVATION_MAGIC {
        return Err(fail("missing CAVA header"));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(4);
    if version != ACTIVATION_VERSION {
        return Err(Error::SchemaMismatch {
            expected: ACTIVATION_VERSION,
            found: version,
        });
    }
    let (rows, dim) = (word(8) as usize, word(12) as usize);
    if bytes.len() != 16 + 4 * rows * dim {
        return Err(fail("payload length does not match header"));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Activations::new(dim, data)
}

pub fn write_activations(path: &Path, acts: &Activations) -> Result<()> {
    write_atomic(path, &encode_activations(acts))
}

pub fn read_activations(path: &Path) -> Result<Activations> {
    let bytes =
        std::fs::read(path).map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
    decode_activations(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activations_round_trip() {
        let a = Activations::new(3, vec![1.0, -2.5, 3.0, 0.0, 1e-7, f32::MAX]).unwrap();
        let p = Path::new("x.cava");
        assert_eq!(decode_activations(&encode_activations(&a), p).unwrap(), a);
        let mut bad = encode_activations(&a);
        bad.pop();
        assert!(decode_activations(&bad, p).is_err());
        bad[4] = 9;
        assert!(matches!(
            decode_activations(&bad, p),
            Err(Error::SchemaMismatch { .. })
        ));
    }

    #[test]
    fn digests_are_stable_and_distinct() {
        let a = digest_of(&("gen", 1)).unwrap();
        assert_eq!(a, digest_of(&("gen", 1)).unwrap());
        assert_ne!(a, digest_of(&("gen", 2)).unwrap());
        assert_eq!(a.len(), DIGEST_CHARS);
    }
}
