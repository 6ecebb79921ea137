//! Content-addressed blob storage.
//!
//! Every artifact the platform holds (bundle members, annotations, submission
//! artifacts, agent images, logs) lives behind a [`BlobRef`]. References are
//! the SHA-256 of the content, so parsing the same bundle twice yields the
//! same references and identical uploads deduplicate.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlobRef(String);

impl BlobRef {
    pub fn for_content(data: &[u8]) -> Self {
        Self(format!("sha256:{}", hex::encode(Sha256::digest(data))))
    }

    pub fn new(raw: impl Into<String>) -> Self {
        Self(raw.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Hex digest without the scheme prefix, usable as a file name.
    pub fn digest(&self) -> &str {
        self.0.split_once(':').map(|(_, d)| d).unwrap_or(&self.0)
    }
}

impl fmt::Display for BlobRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// What a blob holds. Stores index blobs by kind so privacy audits can count
/// e.g. annotation objects without reading content.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlobKind {
    Bundle,
    EvaluatorCode,
    Annotation,
    WarmupAsset,
    EnvironmentAsset,
    SubmissionArtifact,
    AgentImage,
    AgentSnapshot,
    Log,
}

#[derive(Debug, Error)]
pub enum BlobError {
    #[error("blob {0} not found")]
    NotFound(BlobRef),
    #[error("blob store unavailable: {0}")]
    Unavailable(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlobInfo {
    pub blob: BlobRef,
    pub kind: BlobKind,
    pub len: usize,
}

pub trait BlobStore: Send + Sync {
    fn put(&self, kind: BlobKind, data: Vec<u8>) -> Result<BlobRef, BlobError>;
    fn get(&self, blob: &BlobRef) -> Result<Arc<Vec<u8>>, BlobError>;
    fn list(&self) -> Vec<BlobInfo>;

    fn contains(&self, blob: &BlobRef) -> bool {
        self.get(blob).is_ok()
    }

    fn count_kind(&self, kind: BlobKind) -> usize {
        self.list().iter().filter(|b| b.kind == kind).count()
    }
}

type Stored = (BlobKind, Arc<Vec<u8>>);

#[derive(Default)]
pub struct MemoryBlobStore {
    blobs: RwLock<BTreeMap<BlobRef, Stored>>,
}

impl MemoryBlobStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl BlobStore for MemoryBlobStore {
    fn put(&self, kind: BlobKind, data: Vec<u8>) -> Result<BlobRef, BlobError> {
        let blob = BlobRef::for_content(&data);
        self.blobs
            .write()
            .entry(blob.clone())
            .or_insert_with(|| (kind, Arc::new(data)));
        Ok(blob)
    }

    fn get(&self, blob: &BlobRef) -> Result<Arc<Vec<u8>>, BlobError> {
        self.blobs
            .read()
            .get(blob)
            .map(|(_, data)| data.clone())
            .ok_or_else(|| BlobError::NotFound(blob.clone()))
    }

    fn list(&self) -> Vec<BlobInfo> {
        self.blobs
            .read()
            .iter()
            .map(|(blob, (kind, data))| BlobInfo {
                blob: blob.clone(),
                kind: *kind,
                len: data.len(),
            })
            .collect()
    }
}

pub type SharedBlobStore = Arc<dyn BlobStore>;
