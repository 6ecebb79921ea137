//! Pull protocol for organizer-operated workers. Remote workers lease
//! submissions of one challenge, download the artifact through a
//! short-lived link, evaluate on their own infrastructure, and report
//! metrics back. Annotations never reach the platform.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use chrono::Duration;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::api::{queue_error, ApiError, Platform, Principal, SplitMetrics, SubmissionKind, SubmissionStatus};
use crate::blob::BlobRef;
use crate::clock::Timestamp;
use crate::ids::{ChallengeId, LeaseId, SubmissionId, WorkerId};
use crate::queue::{Lease, RoutingKey};

#[cfg(test)]
mod tests;

pub const LIVENESS_WINDOW_SECS: i64 = 120;
pub const HEARTBEAT_INTERVAL_SECS: u64 = 30;
pub const ARTIFACT_TTL_SECS: i64 = 15 * 60;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteWorkerRegistration {
    pub worker_id: WorkerId,
    pub challenge_id: ChallengeId,
    pub token: String,
    pub last_heartbeat: Timestamp,
}

/// One split the remote worker must evaluate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteSplit {
    pub codename: String,
    pub item_count: u64,
    pub leaderboard_schema: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteLeaseGrant {
    pub lease_id: LeaseId,
    pub submission_id: SubmissionId,
    pub challenge_id: ChallengeId,
    pub phase: String,
    pub kind: SubmissionKind,
    pub splits: Vec<RemoteSplit>,
    pub attempt: u32,
    pub lease_expires_at: Timestamp,
    /// Relative download path for the submission artifact.
    pub artifact_url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_url: Option<String>,
    pub artifact_expires_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum RemoteReport {
    Metrics { results: SplitMetrics },
    Failure { log: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportAck {
    pub duplicate: bool,
    pub submission_status: SubmissionStatus,
}

struct RemoteWorker {
    challenge_id: ChallengeId,
    last_heartbeat: Timestamp,
}

struct RemoteLease {
    lease: Lease,
    worker_id: WorkerId,
    submission_id: SubmissionId,
    reported: bool,
}

struct ArtifactGrant {
    blob: BlobRef,
    expires_at: Timestamp,
}

#[derive(Default)]
pub(crate) struct RemoteRegistry {
    inner: Mutex<RegistryState>,
}

#[derive(Default)]
struct RegistryState {
    workers: BTreeMap<WorkerId, RemoteWorker>,
    leases: HashMap<LeaseId, RemoteLease>,
    artifacts: HashMap<String, ArtifactGrant>,
}

fn worker_identity(caller: &Principal) -> Result<(WorkerId, ChallengeId), ApiError> {
    match caller {
        Principal::Worker { worker_id, challenge_id } => Ok((worker_id.clone(), challenge_id.clone())),
        _ => Err(ApiError::Unauthorized("a remote worker token is required".into())),
    }
}

impl Platform {
    /// Registers an organizer-operated worker for a remote challenge.
    pub fn register_remote_worker(
        &self,
        challenge: &ChallengeId,
        caller: &Principal,
    ) -> Result<RemoteWorkerRegistration, ApiError> {
        let config = self.challenge(challenge)?;
        self.require_host(caller, challenge)?;
        if !config.remote_evaluation {
            return Err(ApiError::NotRemoteChallenge);
        }
        let worker_id = WorkerId::generate();
        let now = self.now();
        let token = self.issue_token(Principal::Worker {
            worker_id: worker_id.clone(),
            challenge_id: challenge.clone(),
        });
        self.remote.inner.lock().workers.insert(
            worker_id.clone(),
            RemoteWorker {
                challenge_id: challenge.clone(),
                last_heartbeat: now,
            },
        );
        Ok(RemoteWorkerRegistration {
            worker_id,
            challenge_id: challenge.clone(),
            token,
            last_heartbeat: now,
        })
    }

    pub fn remote_heartbeat(&self, caller: &Principal) -> Result<Timestamp, ApiError> {
        let (worker_id, challenge) = worker_identity(caller)?;
        let now = self.now();
        let mut inner = self.remote.inner.lock();
        let worker = inner
            .workers
            .get_mut(&worker_id)
            .filter(|w| w.challenge_id == challenge)
            .ok_or_else(|| ApiError::Unauthorized("unknown worker".into()))?;
        worker.last_heartbeat = now;
        Ok(now)
    }

    /// Leases the next submission of the worker's challenge, if any. A
    /// `scope` naming another challenge is refused.
    pub fn lease_remote(&self, caller: &Principal, scope: Option<&ChallengeId>) -> Result<Option<RemoteLeaseGrant>, ApiError> {
        let (worker_id, challenge) = worker_identity(caller)?;
        if scope.is_some_and(|c| c != &challenge) {
            return Err(ApiError::Unauthorized("worker token belongs to another challenge".into()));
        }
        let now = self.now();
        {
            let inner = self.remote.inner.lock();
            let worker = inner
                .workers
                .get(&worker_id)
                .filter(|w| w.challenge_id == challenge)
                .ok_or_else(|| ApiError::Unauthorized("unknown worker".into()))?;
            if now - worker.last_heartbeat > Duration::seconds(LIVENESS_WINDOW_SECS) {
                return Err(ApiError::StaleHeartbeat);
            }
        }
        let config = self.challenge(&challenge)?;
        let key = RoutingKey::for_challenge(&config);
        let broker = Arc::clone(self.broker());
        loop {
            let Some((message, lease)) = broker
                .lease(&key, &worker_id, broker.config().visibility)
                .map_err(queue_error)?
            else {
                return Ok(None);
            };
            let submission = match self.submission(&message.submission_id) {
                Ok(s) => s,
                Err(_) => {
                    let _ = broker.nack(&lease, false);
                    continue;
                }
            };
            if submission.status.is_terminal() {
                let _ = broker.ack(&lease);
                continue;
            }
            if submission.status == SubmissionStatus::Queued {
                self.apply_transition(&submission.id, SubmissionStatus::Running)?;
            }
            let lease_id = LeaseId::new(format!("{}.{}", lease.message_id, lease.attempt));
            let expires = now + Duration::seconds(ARTIFACT_TTL_SECS);
            let mut inner = self.remote.inner.lock();
            inner.artifacts.retain(|_, g| g.expires_at > now);
            let mut grant = |blob: &BlobRef| {
                let nonce = format!("{}{}", uuid::Uuid::new_v4().simple(), uuid::Uuid::new_v4().simple());
                inner.artifacts.insert(
                    nonce.clone(),
                    ArtifactGrant {
                        blob: blob.clone(),
                        expires_at: expires,
                    },
                );
                format!("/artifacts/{nonce}")
            };
            let artifact_url = grant(&submission.artifact_ref);
            let snapshot_url = submission.agent.as_ref().map(|a| grant(&a.snapshot_ref));
            inner.leases.insert(
                lease_id.clone(),
                RemoteLease {
                    lease: lease.clone(),
                    worker_id: worker_id.clone(),
                    submission_id: submission.id.clone(),
                    reported: false,
                },
            );
            let splits = config
                .splits_for_phase(&submission.phase_codename)
                .into_iter()
                .map(|(ps, s)| RemoteSplit {
                    codename: s.codename.clone(),
                    item_count: s.item_count,
                    leaderboard_schema: ps.leaderboard_schema.clone(),
                })
                .collect();
            return Ok(Some(RemoteLeaseGrant {
                lease_id,
                submission_id: submission.id,
                challenge_id: challenge,
                phase: submission.phase_codename,
                kind: submission.kind,
                splits,
                attempt: lease.attempt,
                lease_expires_at: lease.expires_at,
                artifact_url,
                snapshot_url,
                artifact_expires_at: expires,
            }));
        }
    }

    /// Resolves an artifact download link while it is still valid.
    pub fn fetch_artifact(&self, nonce: &str) -> Result<Arc<Vec<u8>>, ApiError> {
        let now = self.now();
        let blob = {
            let inner = self.remote.inner.lock();
            inner
                .artifacts
                .get(nonce)
                .filter(|g| g.expires_at > now)
                .map(|g| g.blob.clone())
                .ok_or_else(|| ApiError::NotFound("artifact link".into()))?
        };
        self.blobs().get(&blob).map_err(|_| ApiError::NotFound("artifact".into()))
    }

    /// Accepts a remote worker's metrics or failure report for a lease.
    pub fn report_remote_result(
        &self,
        caller: &Principal,
        lease_id: &LeaseId,
        report: &RemoteReport,
    ) -> Result<ReportAck, ApiError> {
        let (worker_id, _) = worker_identity(caller)?;
        let (lease, submission_id, reported) = {
            let inner = self.remote.inner.lock();
            let held = inner
                .leases
                .get(lease_id)
                .filter(|l| l.worker_id == worker_id)
                .ok_or_else(|| ApiError::Unauthorized("lease is not held by this worker".into()))?;
            (held.lease.clone(), held.submission_id.clone(), held.reported)
        };
        if reported {
            return Ok(ReportAck {
                duplicate: true,
                submission_status: self.submission(&submission_id)?.status,
            });
        }
        let broker = Arc::clone(self.broker());
        if !broker.lease_valid(&lease) {
            return Err(ApiError::LeaseExpired);
        }
        match report {
            RemoteReport::Metrics { results } => {
                self.finish_submission(&submission_id, results)?;
                broker.ack(&lease).map_err(queue_error)?;
            }
            RemoteReport::Failure { log } => {
                if lease.attempt < broker.config().max_attempts {
                    self.attach_log(&submission_id, log)?;
                    broker.nack(&lease, true).map_err(queue_error)?;
                } else {
                    self.fail_submission(&submission_id, log)?;
                    broker.nack(&lease, false).map_err(queue_error)?;
                }
            }
        }
        if let Some(held) = self.remote.inner.lock().leases.get_mut(lease_id) {
            held.reported = true;
        }
        Ok(ReportAck {
            duplicate: false,
            submission_status: self.submission(&submission_id)?.status,
        })
    }
}
