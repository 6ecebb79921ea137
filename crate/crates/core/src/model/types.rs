use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::blob::BlobRef;
use crate::clock::Timestamp;
use crate::ids::{AccountId, ChallengeId};

/// A challenge as the platform runs it: phases, dataset splits, the
/// phase-split leaderboards and the organizer's evaluator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChallengeConfig {
    pub id: ChallengeId,
    pub title: String,
    pub description_html: String,
    pub phases: Vec<Phase>,
    pub splits: Vec<DatasetSplit>,
    pub phase_splits: Vec<PhaseSplit>,
    pub evaluator: EvaluatorSpec,
    pub default_metric: String,
    /// Per-metric ranking direction. Metrics not listed rank higher-is-better.
    pub metrics: BTreeMap<String, MetricInfo>,
    pub remote_evaluation: bool,
    pub hitl: Option<HitlConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub id: String,
    pub name: String,
    pub codename: String,
    pub start: Timestamp,
    /// `None` keeps the phase open indefinitely.
    pub end: Option<Timestamp>,
    pub submission_limit_per_day: u32,
}

impl Phase {
    pub fn is_open_at(&self, now: Timestamp) -> bool {
        self.start <= now && self.end.is_none_or(|end| now <= end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub id: String,
    pub name: String,
    pub codename: String,
    /// Number of dataset items the evaluator iterates over; drives chunking.
    pub item_count: u64,
    pub annotation_ref: Option<BlobRef>,
    /// Hidden test environment for agent challenges.
    pub environment: Option<EnvironmentSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    Public,
    HostOnly,
    OwnerOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSplit {
    pub phase_id: String,
    pub split_id: String,
    pub leaderboard_visibility: Visibility,
    pub leaderboard_schema: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluatorKind {
    Predictions,
    Agent,
    Hitl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorSpec {
    pub kind: EvaluatorKind,
    /// Path of the executable relative to the staged evaluator code.
    pub entrypoint: String,
    /// Zip of every bundle member that is not an annotation, environment
    /// asset or warm-up asset.
    pub code_ref: BlobRef,
    pub warmup_assets: Vec<AssetRef>,
    pub chunkable: bool,
    pub limits: ResourceLimits,
}

/// A bundle file staged at `path` (relative to the evaluator code root).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssetRef {
    pub path: String,
    pub blob: BlobRef,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResourceLimits {
    pub cpu_seconds: u64,
    pub memory_bytes: u64,
    pub wall_seconds: u64,
    pub max_processes: u64,
}

impl Default for ResourceLimits {
    fn default() -> Self {
        Self {
            cpu_seconds: 600,
            memory_bytes: 4 * 1024 * 1024 * 1024,
            wall_seconds: 1200,
            max_processes: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricInfo {
    pub higher_is_better: bool,
}

impl Default for MetricInfo {
    fn default() -> Self {
        Self {
            higher_is_better: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitlConfig {
    pub instructions_html: String,
    pub rating_axes: Vec<String>,
    pub rounds_required: u32,
    pub whitelist: BTreeSet<AccountId>,
    pub blocklist: BTreeSet<AccountId>,
    pub qualification_test_ref: Option<BlobRef>,
    pub rating_scale: RatingScale,
    /// Inactivity after which a session expires; also the reconnect window.
    pub session_ttl_secs: u64,
    /// Evaluation slots opened per submission.
    pub sessions_per_submission: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingScale {
    pub min: i32,
    pub max: i32,
}

impl Default for RatingScale {
    fn default() -> Self {
        Self { min: 1, max: 5 }
    }
}

impl RatingScale {
    pub fn contains(&self, value: i32) -> bool {
        (self.min..=self.max).contains(&value)
    }
}

/// A hidden test environment: an organizer program plus its private assets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub env_id: String,
    /// Environment program, relative to the staged evaluator code.
    pub program: String,
    pub assets_ref: BlobRef,
    pub episodes: Vec<String>,
    pub max_steps_per_episode: u32,
    pub action_vocabulary: Vec<String>,
    pub step_deadline_ms: u64,
}

impl ChallengeConfig {
    pub fn phase_by_codename(&self, codename: &str) -> Option<&Phase> {
        self.phases.iter().find(|p| p.codename == codename)
    }

    pub fn phase_by_id(&self, id: &str) -> Option<&Phase> {
        self.phases.iter().find(|p| p.id == id)
    }

    pub fn split_by_id(&self, id: &str) -> Option<&DatasetSplit> {
        self.splits.iter().find(|s| s.id == id)
    }

    pub fn split_by_codename(&self, codename: &str) -> Option<&DatasetSplit> {
        self.splits.iter().find(|s| s.codename == codename)
    }

    /// Every (phase-split, split) pair attached to the phase, in manifest order.
    pub fn splits_for_phase(&self, phase_codename: &str) -> Vec<(&PhaseSplit, &DatasetSplit)> {
        let Some(phase) = self.phase_by_codename(phase_codename) else {
            return Vec::new();
        };
        self.phase_splits
            .iter()
            .filter(|ps| ps.phase_id == phase.id)
            .filter_map(|ps| self.split_by_id(&ps.split_id).map(|s| (ps, s)))
            .collect()
    }

    pub fn higher_is_better(&self, metric: &str) -> bool {
        self.metrics
            .get(metric)
            .copied()
            .unwrap_or_default()
            .higher_is_better
    }

    pub fn rating_axes(&self) -> &[String] {
        self.hitl.as_ref().map(|h| h.rating_axes.as_slice()).unwrap_or(&[])
    }
}
