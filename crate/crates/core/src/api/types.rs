use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::blob::BlobRef;
use crate::clock::Timestamp;
use crate::ids::{AccountId, ChallengeId, SubmissionId, TeamId, WorkerId};
use crate::model::{ChallengeConfig, EvaluatorKind, Phase, PhaseSplit, Visibility};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubmissionStatus {
    Submitted,
    Queued,
    Running,
    Finished,
    Failed,
    Cancelled,
}

impl SubmissionStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Finished | Self::Failed | Self::Cancelled)
    }

    /// The submission status machine.
    pub fn can_become(self, to: SubmissionStatus) -> bool {
        use SubmissionStatus::*;
        matches!(
            (self, to),
            (Submitted, Queued) | (Queued, Running) | (Queued, Cancelled) | (Running, Finished) | (Running, Failed) | (Running, Cancelled)
        )
    }

    pub const ALL: [SubmissionStatus; 6] = [
        Self::Submitted,
        Self::Queued,
        Self::Running,
        Self::Finished,
        Self::Failed,
        Self::Cancelled,
    ];
}

impl fmt::Display for SubmissionStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        f.write_str(s.as_ref().and_then(|v| v.as_str()).unwrap_or("?"))
    }
}

impl std::str::FromStr for SubmissionStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase())).map_err(|_| format!("unknown status {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubmissionKind {
    Predictions,
    Agent,
}

impl SubmissionKind {
    /// The submission kind a challenge's evaluator accepts.
    pub fn for_evaluator(kind: EvaluatorKind) -> Self {
        match kind {
            EvaluatorKind::Predictions => Self::Predictions,
            EvaluatorKind::Agent | EvaluatorKind::Hitl => Self::Agent,
        }
    }
}

impl std::str::FromStr for SubmissionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "predictions" => Ok(Self::Predictions),
            "agent" => Ok(Self::Agent),
            other => Err(format!("unknown submission kind {other:?}")),
        }
    }
}

/// An agent submission's runtime image and model snapshot, bound at submission time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentRefs {
    pub image_ref: BlobRef,
    pub snapshot_ref: BlobRef,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusChange {
    pub status: SubmissionStatus,
    pub at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub id: SubmissionId,
    pub challenge_id: ChallengeId,
    pub team_id: TeamId,
    pub phase_codename: String,
    pub kind: SubmissionKind,
    pub artifact_ref: BlobRef,
    pub agent: Option<AgentRefs>,
    pub status: SubmissionStatus,
    pub created_at: Timestamp,
    pub status_history: Vec<StatusChange>,
    pub logs_ref: Option<BlobRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Team {
    pub id: TeamId,
    pub name: String,
    pub members: BTreeSet<AccountId>,
}

/// An authenticated caller.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Principal {
    User(AccountId),
    /// A remote worker token, valid for one challenge only.
    Worker { worker_id: WorkerId, challenge_id: ChallengeId },
    /// In-process platform components such as local workers.
    System,
}

/// A user's relationship to one challenge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ChallengeRole {
    Host,
    Participant,
}

/// What a caller may see of a submission.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubmissionView {
    pub id: SubmissionId,
    pub challenge_id: ChallengeId,
    pub team_id: TeamId,
    pub phase: String,
    pub kind: SubmissionKind,
    pub status: SubmissionStatus,
    pub created_at: Timestamp,
    pub status_history: Vec<StatusChange>,
    /// Per-split metrics the caller is allowed to see.
    pub results: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_excerpt: Option<String>,
}

/// The public description of a challenge. Storage references are omitted.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChallengeView {
    pub id: ChallengeId,
    pub title: String,
    pub description_html: String,
    pub host_team: TeamId,
    pub phases: Vec<Phase>,
    pub splits: Vec<SplitView>,
    pub phase_splits: Vec<PhaseSplit>,
    pub evaluator_kind: EvaluatorKind,
    pub default_metric: String,
    pub remote_evaluation: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hitl: Option<HitlView>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitView {
    pub id: String,
    pub name: String,
    pub codename: String,
    pub item_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HitlView {
    pub instructions_html: String,
    pub rating_axes: Vec<String>,
    pub rounds_required: u32,
    pub rating_min: i32,
    pub rating_max: i32,
}

impl ChallengeView {
    pub fn new(config: &ChallengeConfig, host_team: TeamId) -> Self {
        Self {
            id: config.id.clone(),
            title: config.title.clone(),
            description_html: config.description_html.clone(),
            host_team,
            phases: config.phases.clone(),
            splits: config
                .splits
                .iter()
                .map(|s| SplitView {
                    id: s.id.clone(),
                    name: s.name.clone(),
                    codename: s.codename.clone(),
                    item_count: s.item_count,
                })
                .collect(),
            phase_splits: config.phase_splits.clone(),
            evaluator_kind: config.evaluator.kind,
            default_metric: config.default_metric.clone(),
            remote_evaluation: config.remote_evaluation,
            hitl: config.hitl.as_ref().map(|h| HitlView {
                instructions_html: h.instructions_html.clone(),
                rating_axes: h.rating_axes.clone(),
                rounds_required: h.rounds_required,
                rating_min: h.rating_scale.min,
                rating_max: h.rating_scale.max,
            }),
        }
    }
}

/// Split visibility lookup for a phase.
pub(crate) fn split_visibility(config: &ChallengeConfig, phase: &str, split_codename: &str) -> Visibility {
    config
        .splits_for_phase(phase)
        .into_iter()
        .find(|(_, s)| s.codename == split_codename)
        .map_or(Visibility::HostOnly, |(ps, _)| ps.leaderboard_visibility)
}
