//! Competition bundles: a ZIP with `challenge.json` at the root plus the
//! evaluator code, annotation files and any warm-up or environment assets
//! the manifest names by relative path.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::types::*;
use super::validate::{validate_config, Violation};
use crate::archive::{self, ArchiveError, Member, Members, MAX_MEMBER_BYTES};
use crate::blob::{BlobKind, BlobRef};
use crate::clock::Timestamp;
use crate::ids::{AccountId, ChallengeId};

pub const MANIFEST_NAME: &str = "challenge.json";
pub const MANIFEST_MAX_BYTES: u64 = 1024 * 1024;
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("malformed archive: {0}")]
    MalformedArchive(String),
    #[error("{}", schema_message(.violations))]
    SchemaError { violations: Vec<Violation> },
    #[error("unsafe path in archive: {0:?}")]
    UnsafePath(String),
}

fn schema_message(violations: &[Violation]) -> String {
    match violations {
        [] => "schema error".to_owned(),
        [only] => only.to_string(),
        [first, rest @ ..] => format!("{first} (and {} more)", rest.len()),
    }
}

impl BundleError {
    fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        BundleError::SchemaError {
            violations: vec![Violation::new(path, message)],
        }
    }
}

impl From<ArchiveError> for BundleError {
    fn from(e: ArchiveError) -> Self {
        match e {
            ArchiveError::UnsafePath(p) => BundleError::UnsafePath(p),
            other => BundleError::MalformedArchive(other.to_string()),
        }
    }
}

// Wire form of `challenge.json`. Files are named by bundle-relative path;
// loading resolves them into content-addressed blob references.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub id: String,
    pub title: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description_html: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description_file: Option<String>,
    #[serde(default)]
    pub remote_evaluation: bool,
    pub default_metric: String,
    #[serde(default)]
    pub metrics: BTreeMap<String, MetricInfo>,
    pub phases: Vec<ManifestPhase>,
    pub splits: Vec<ManifestSplit>,
    pub phase_splits: Vec<ManifestPhaseSplit>,
    pub evaluator: ManifestEvaluator,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hitl: Option<ManifestHitl>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestPhase {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub codename: Option<String>,
    pub name: String,
    pub start: Timestamp,
    #[serde(default)]
    pub end: Option<Timestamp>,
    pub submission_limit_per_day: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSplit {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub codename: Option<String>,
    pub name: String,
    pub item_count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub environment: Option<ManifestEnvironment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEnvironment {
    pub env_id: String,
    pub program: String,
    pub assets_file: String,
    pub episodes: Vec<String>,
    pub max_steps_per_episode: u32,
    pub action_vocabulary: Vec<String>,
    #[serde(default = "default_step_deadline_ms")]
    pub step_deadline_ms: u64,
}

fn default_step_deadline_ms() -> u64 {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestPhaseSplit {
    pub phase: String,
    pub split: String,
    pub visibility: Visibility,
    pub leaderboard_schema: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEvaluator {
    pub kind: EvaluatorKind,
    pub entrypoint: String,
    #[serde(default)]
    pub warmup_assets: Vec<String>,
    #[serde(default)]
    pub chunkable: bool,
    #[serde(default)]
    pub limits: ResourceLimits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHitl {
    pub instructions_html: String,
    pub rating_axes: Vec<String>,
    pub rounds_required: u32,
    #[serde(default)]
    pub whitelist: BTreeSet<AccountId>,
    #[serde(default)]
    pub blocklist: BTreeSet<AccountId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qualification_test_file: Option<String>,
    #[serde(default)]
    pub rating_scale: RatingScale,
    #[serde(default = "default_session_ttl_secs")]
    pub session_ttl_secs: u64,
    #[serde(default = "default_sessions_per_submission")]
    pub sessions_per_submission: u32,
}

fn default_session_ttl_secs() -> u64 {
    30 * 60
}

fn default_sessions_per_submission() -> u32 {
    1
}

/// A blob produced by loading a bundle, ready to be put into a blob store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagedBlob {
    pub kind: BlobKind,
    pub data: Vec<u8>,
}

/// Everything extracted from a bundle: the manifest as written, the resolved
/// config, the original members and the blobs the config references.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedBundle {
    pub manifest: Manifest,
    pub config: ChallengeConfig,
    pub members: Members,
    pub blobs: BTreeMap<BlobRef, StagedBlob>,
}

fn member_limit(name: &str) -> u64 {
    if name == MANIFEST_NAME {
        MANIFEST_MAX_BYTES
    } else {
        MAX_MEMBER_BYTES
    }
}

/// Reads and resolves a bundle without checking config invariants.
/// Fails only when the archive or manifest cannot be turned into a config.
pub fn load_bundle(archive: &[u8]) -> Result<ParsedBundle, BundleError> {
    let members = archive::read_zip(archive, member_limit).map_err(|e| match e {
        ArchiveError::TooLarge { name, limit } if name == MANIFEST_NAME => {
            BundleError::MalformedArchive(format!("{MANIFEST_NAME} exceeds {limit} bytes"))
        }
        other => other.into(),
    })?;
    let raw = members
        .get(MANIFEST_NAME)
        .ok_or_else(|| BundleError::MalformedArchive(format!("missing {MANIFEST_NAME} at archive root")))?;
    let text = std::str::from_utf8(&raw.data)
        .map_err(|_| BundleError::MalformedArchive(format!("{MANIFEST_NAME} is not UTF-8")))?;
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| BundleError::schema("$", format!("invalid JSON: {e}")))?;
    match value.get("schema_version") {
        Some(v) if v.as_u64() == Some(SCHEMA_VERSION as u64) => {}
        Some(v) => {
            return Err(BundleError::schema(
                "schema_version",
                format!("unsupported version {v}, expected {SCHEMA_VERSION}"),
            ))
        }
        None => return Err(BundleError::schema("schema_version", "required field missing")),
    }
    let manifest: Manifest = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        BundleError::schema(path, e.into_inner().to_string())
    })?;
    resolve(manifest, members)
}

/// Loads a bundle and rejects it if the resulting config has any violation.
pub fn parse_bundle(archive: &[u8]) -> Result<ParsedBundle, BundleError> {
    let parsed = load_bundle(archive)?;
    let violations = validate_config(&parsed.config);
    if violations.is_empty() {
        Ok(parsed)
    } else {
        Err(BundleError::SchemaError { violations })
    }
}

/// Writes the bundle back out as a ZIP. Loading the result reproduces the
/// same config.
pub fn serialize_bundle(bundle: &ParsedBundle) -> Vec<u8> {
    let manifest = Member {
        data: serde_json::to_vec_pretty(&bundle.manifest).expect("manifest serializes"),
        executable: false,
    };
    archive::write_zip(
        std::iter::once((MANIFEST_NAME, &manifest)).chain(
            bundle
                .members
                .iter()
                .filter(|(name, _)| name.as_str() != MANIFEST_NAME)
                .map(|(n, m)| (n.as_str(), m)),
        ),
    )
}

struct Resolver<'a> {
    members: &'a Members,
    blobs: BTreeMap<BlobRef, StagedBlob>,
    /// Members staged individually; excluded from the code archive.
    claimed: BTreeSet<String>,
}

impl Resolver<'_> {
    fn file(&mut self, field: &str, path: &str, kind: BlobKind) -> Result<BlobRef, BundleError> {
        archive::check_member_path(path).map_err(|_| BundleError::UnsafePath(path.to_owned()))?;
        let name = archive::normalize_member_path(path);
        let member = self
            .members
            .get(&name)
            .ok_or_else(|| BundleError::schema(field, format!("member {path:?} not in archive")))?;
        self.claimed.insert(name);
        let blob = BlobRef::for_content(&member.data);
        self.blobs.entry(blob.clone()).or_insert_with(|| StagedBlob {
            kind,
            data: member.data.clone(),
        });
        Ok(blob)
    }
}

fn resolve(manifest: Manifest, members: Members) -> Result<ParsedBundle, BundleError> {
    let mut r = Resolver {
        members: &members,
        blobs: BTreeMap::new(),
        claimed: BTreeSet::from([MANIFEST_NAME.to_owned()]),
    };

    let description_html = match (&manifest.description_html, &manifest.description_file) {
        (Some(_), Some(_)) => {
            return Err(BundleError::schema(
                "description_file",
                "give either description_html or description_file, not both",
            ))
        }
        (Some(html), None) => html.clone(),
        (None, Some(path)) => {
            check_path(path)?;
            let member = members.get(&archive::normalize_member_path(path)).ok_or_else(|| {
                BundleError::schema("description_file", format!("member {path:?} not in archive"))
            })?;
            String::from_utf8(member.data.clone())
                .map_err(|_| BundleError::schema("description_file", "not UTF-8"))?
        }
        (None, None) => String::new(),
    };

    let phases = manifest
        .phases
        .iter()
        .map(|p| Phase {
            id: p.id.clone(),
            name: p.name.clone(),
            codename: p.codename.clone().unwrap_or_else(|| p.id.clone()),
            start: p.start,
            end: p.end,
            submission_limit_per_day: p.submission_limit_per_day,
        })
        .collect();

    let mut splits = Vec::with_capacity(manifest.splits.len());
    for (i, s) in manifest.splits.iter().enumerate() {
        let annotation_ref = match &s.annotation_file {
            Some(path) => Some(r.file(&format!("splits[{i}].annotation_file"), path, BlobKind::Annotation)?),
            None => None,
        };
        let environment = match &s.environment {
            Some(env) => {
                let field = format!("splits[{i}].environment");
                check_path(&env.program)?;
                Some(EnvironmentSpec {
                    env_id: env.env_id.clone(),
                    program: archive::normalize_member_path(&env.program),
                    assets_ref: r.file(&format!("{field}.assets_file"), &env.assets_file, BlobKind::EnvironmentAsset)?,
                    episodes: env.episodes.clone(),
                    max_steps_per_episode: env.max_steps_per_episode,
                    action_vocabulary: env.action_vocabulary.clone(),
                    step_deadline_ms: env.step_deadline_ms,
                })
            }
            None => None,
        };
        splits.push(DatasetSplit {
            id: s.id.clone(),
            name: s.name.clone(),
            codename: s.codename.clone().unwrap_or_else(|| s.id.clone()),
            item_count: s.item_count,
            annotation_ref,
            environment,
        });
    }

    let phase_splits = manifest
        .phase_splits
        .iter()
        .map(|ps| PhaseSplit {
            phase_id: ps.phase.clone(),
            split_id: ps.split.clone(),
            leaderboard_visibility: ps.visibility,
            leaderboard_schema: ps.leaderboard_schema.clone(),
        })
        .collect();

    let ev = &manifest.evaluator;
    check_path(&ev.entrypoint)?;
    let entrypoint = archive::normalize_member_path(&ev.entrypoint);
    if !members.contains_key(&entrypoint) {
        return Err(BundleError::schema(
            "evaluator.entrypoint",
            format!("member {:?} not in archive", ev.entrypoint),
        ));
    }
    let mut warmup_assets = Vec::with_capacity(ev.warmup_assets.len());
    for (i, path) in ev.warmup_assets.iter().enumerate() {
        let blob = r.file(&format!("evaluator.warmup_assets[{i}]"), path, BlobKind::WarmupAsset)?;
        warmup_assets.push(AssetRef {
            path: archive::normalize_member_path(path),
            blob,
        });
    }

    let hitl = match &manifest.hitl {
        Some(h) => Some(HitlConfig {
            instructions_html: h.instructions_html.clone(),
            rating_axes: h.rating_axes.clone(),
            rounds_required: h.rounds_required,
            whitelist: h.whitelist.clone(),
            blocklist: h.blocklist.clone(),
            qualification_test_ref: match &h.qualification_test_file {
                Some(path) => Some(r.file("hitl.qualification_test_file", path, BlobKind::WarmupAsset)?),
                None => None,
            },
            rating_scale: h.rating_scale,
            session_ttl_secs: h.session_ttl_secs,
            sessions_per_submission: h.sessions_per_submission,
        }),
        None => None,
    };

    let claimed = std::mem::take(&mut r.claimed);
    let code = archive::write_zip(
        members
            .iter()
            .filter(|(name, _)| !claimed.contains(name.as_str()))
            .map(|(n, m)| (n.as_str(), m)),
    );
    let code_ref = BlobRef::for_content(&code);
    let mut blobs = r.blobs;
    blobs.insert(
        code_ref.clone(),
        StagedBlob {
            kind: BlobKind::EvaluatorCode,
            data: code,
        },
    );

    let config = ChallengeConfig {
        id: ChallengeId::new(manifest.id.clone()),
        title: manifest.title.clone(),
        description_html,
        phases,
        splits,
        phase_splits,
        evaluator: EvaluatorSpec {
            kind: ev.kind,
            entrypoint,
            code_ref,
            warmup_assets,
            chunkable: ev.chunkable,
            limits: ev.limits,
        },
        default_metric: manifest.default_metric.clone(),
        metrics: manifest.metrics.clone(),
        remote_evaluation: manifest.remote_evaluation,
        hitl,
    };
    Ok(ParsedBundle {
        manifest,
        config,
        members,
        blobs,
    })
}

fn check_path(path: &str) -> Result<(), BundleError> {
    archive::check_member_path(path).map_err(|_| BundleError::UnsafePath(path.to_owned()))
}
