use serde::Deserialize;

use super::AgentError;
use crate::archive::{check_member_path, read_zip, write_zip, Members, MAX_MEMBER_BYTES};

pub const AGENT_MANIFEST: &str = "agent.json";
pub const AGENT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentManifest {
    pub entrypoint: String,
    pub schema_version: u32,
    /// Member holding the model snapshot, split off into its own blob.
    #[serde(default)]
    pub snapshot: Option<String>,
}

/// An agent bundle separated into runtime image and snapshot.
#[derive(Debug, Clone)]
pub struct AgentArchive {
    pub manifest: AgentManifest,
    /// Deterministic zip of every member except the snapshot.
    pub image: Vec<u8>,
    pub snapshot: Vec<u8>,
}

pub fn read_manifest(members: &Members) -> Result<AgentManifest, AgentError> {
    let raw = members
        .get(AGENT_MANIFEST)
        .ok_or_else(|| AgentError::ManifestInvalid(format!("{AGENT_MANIFEST} missing")))?;
    let manifest: AgentManifest =
        serde_json::from_slice(&raw.data).map_err(|e| AgentError::ManifestInvalid(e.to_string()))?;
    if manifest.schema_version != AGENT_SCHEMA_VERSION {
        return Err(AgentError::ManifestInvalid(format!(
            "unsupported schema_version {}",
            manifest.schema_version
        )));
    }
    check_member_path(&manifest.entrypoint).map_err(|e| AgentError::ManifestInvalid(e.to_string()))?;
    if manifest.entrypoint == AGENT_MANIFEST {
        return Err(AgentError::ManifestInvalid("entrypoint cannot be the manifest".into()));
    }
    Ok(manifest)
}

/// Splits a participant's agent bundle into image and snapshot.
pub fn split_agent_bundle(bytes: &[u8]) -> Result<AgentArchive, AgentError> {
    let mut members = read_zip(bytes, |_| MAX_MEMBER_BYTES).map_err(|e| AgentError::ManifestInvalid(e.to_string()))?;
    let manifest = read_manifest(&members)?;
    let snapshot = match &manifest.snapshot {
        Some(path) => {
            check_member_path(path).map_err(|e| AgentError::ManifestInvalid(e.to_string()))?;
            members
                .remove(path)
                .ok_or_else(|| AgentError::ManifestInvalid(format!("snapshot {path:?} missing")))?
                .data
        }
        None => Vec::new(),
    };
    if !members.contains_key(&manifest.entrypoint) {
        return Err(AgentError::ManifestInvalid(format!(
            "entrypoint {:?} missing",
            manifest.entrypoint
        )));
    }
    let image = write_zip(members.iter().map(|(k, v)| (k.as_str(), v)));
    Ok(AgentArchive {
        manifest,
        image,
        snapshot,
    })
}
