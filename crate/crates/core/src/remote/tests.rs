use std::collections::BTreeMap;

use super::*;
use crate::blob::{BlobKind, BlobStore};
use crate::fixtures::{BundleBuilder, Harness};
use crate::leaderboard::RankedEntry;

struct Rig {
    h: Harness,
    challenge: ChallengeId,
    worker: Principal,
}

fn rig() -> Rig {
    let h = Harness::new();
    let config = h.challenge(&BundleBuilder::vqa("fastmri", true));
    let reg = h.platform.register_remote_worker(&config.id, &h.host).unwrap();
    let worker = h.platform.authenticate(&reg.token).unwrap();
    Rig {
        challenge: config.id.clone(),
        worker,
        h,
    }
}

impl Rig {
    fn submit(&self, body: &[u8]) -> SubmissionId {
        self.h
            .platform
            .create_submission(&self.challenge, "test-dev", &self.h.alice, SubmissionKind::Predictions, body.to_vec())
            .unwrap()
            .id
    }

    fn lease(&self) -> Option<RemoteLeaseGrant> {
        self.h.platform.lease_remote(&self.worker, None).unwrap()
    }

    fn board(&self, split: &str) -> Vec<RankedEntry> {
        self.h.platform.leaderboard(&self.challenge, "test-dev", split, Some(&self.h.host)).unwrap()
    }
}

fn metrics(accuracy: f64) -> RemoteReport {
    let m = BTreeMap::from([("accuracy".to_owned(), accuracy)]);
    RemoteReport::Metrics {
        results: SplitMetrics::from([("test-dev".into(), m.clone()), ("test-challenge".into(), m)]),
    }
}

fn nonce(url: &str) -> &str {
    url.strip_prefix("/artifacts/").unwrap()
}

#[test]
fn registration_requires_a_remote_challenge_and_its_host() {
    let h = Harness::new();
    let local = h.challenge(&BundleBuilder::vqa("vqa", false));
    let remote = h.challenge(&BundleBuilder::vqa("fastmri", true));
    assert_eq!(h.platform.register_remote_worker(&local.id, &h.host).unwrap_err(), ApiError::NotRemoteChallenge);
    assert!(matches!(h.platform.register_remote_worker(&remote.id, &h.alice), Err(ApiError::Unauthorized(_))));
    let reg = h.platform.register_remote_worker(&remote.id, &h.host).unwrap();
    assert_eq!(reg.challenge_id, remote.id);
    assert_eq!(
        h.platform.authenticate(&reg.token).unwrap(),
        Principal::Worker {
            worker_id: reg.worker_id,
            challenge_id: remote.id.clone()
        }
    );
}

#[test]
fn tokens_are_scoped_to_one_challenge() {
    let r = rig();
    let other = r.h.challenge(&BundleBuilder::vqa("other", true));
    assert!(matches!(
        r.h.platform.lease_remote(&r.worker, Some(&other.id)),
        Err(ApiError::Unauthorized(_))
    ));
    assert!(r.h.platform.lease_remote(&r.worker, Some(&r.challenge)).unwrap().is_none());
    assert!(matches!(r.h.platform.lease_remote(&r.h.alice, None), Err(ApiError::Unauthorized(_))));
    assert!(matches!(r.h.platform.remote_heartbeat(&r.h.host), Err(ApiError::Unauthorized(_))));
    assert_eq!(r.h.platform.authenticate("gx_not-a-token").unwrap_err(), ApiError::Unauthenticated);
}

#[test]
fn a_submission_is_delivered_to_one_lease_at_a_time() {
    let r = rig();
    let id = r.submit(b"[1,2,3]");
    let grant = r.lease().unwrap();
    assert_eq!(grant.submission_id, id);
    assert_eq!(grant.attempt, 1);
    assert_eq!(r.h.platform.submission(&id).unwrap().status, SubmissionStatus::Running);
    let splits: Vec<_> = grant.splits.iter().map(|s| s.codename.as_str()).collect();
    assert_eq!(splits, ["test-dev", "test-challenge"]);
    assert!(r.lease().is_none());
}

#[test]
fn unreported_lease_is_redelivered_after_visibility() {
    let r = rig();
    let id = r.submit(b"[1]");
    let first = r.lease().unwrap();
    r.h.advance(r.h.broker.config().visibility.num_seconds() + 1);
    r.h.platform.remote_heartbeat(&r.worker).unwrap();
    let second = r.lease().unwrap();
    assert_eq!(second.submission_id, id);
    assert_eq!(second.attempt, 2);
    assert_ne!(first.lease_id, second.lease_id);
    assert_eq!(
        r.h.platform.report_remote_result(&r.worker, &first.lease_id, &metrics(0.5)).unwrap_err(),
        ApiError::LeaseExpired
    );
    r.h.platform.report_remote_result(&r.worker, &second.lease_id, &metrics(0.5)).unwrap();
}

#[test]
fn lease_responses_carry_no_annotation_data() {
    let r = rig();
    r.submit(b"[0,1,2]");
    let grant = r.lease().unwrap();
    let body = serde_json::to_string(&grant).unwrap();
    assert!(!body.contains("annotation"), "{body}");
    for info in r.h.blobs.list() {
        assert!(!body.contains(info.blob.digest()), "lease exposes blob {}", info.blob);
    }
    assert_eq!(r.h.blobs.count_kind(BlobKind::Annotation), 0);
    let artifact = r.h.platform.fetch_artifact(nonce(&grant.artifact_url)).unwrap();
    assert_eq!(artifact.as_slice(), b"[0,1,2]");
}

#[test]
fn artifact_links_expire() {
    let r = rig();
    r.submit(b"[0]");
    let grant = r.lease().unwrap();
    assert_eq!(grant.artifact_expires_at - r.h.platform.now(), chrono::Duration::minutes(15));
    r.h.advance(ARTIFACT_TTL_SECS - 1);
    assert!(r.h.platform.fetch_artifact(nonce(&grant.artifact_url)).is_ok());
    r.h.advance(1);
    assert!(matches!(r.h.platform.fetch_artifact(nonce(&grant.artifact_url)), Err(ApiError::NotFound(_))));
    assert!(matches!(r.h.platform.fetch_artifact("guess"), Err(ApiError::NotFound(_))));
}

#[test]
fn metrics_report_finishes_once() {
    let r = rig();
    let id = r.submit(b"[0]");
    let grant = r.lease().unwrap();
    let ack = r.h.platform.report_remote_result(&r.worker, &grant.lease_id, &metrics(0.75)).unwrap();
    assert_eq!(
        ack,
        ReportAck {
            duplicate: false,
            submission_status: SubmissionStatus::Finished
        }
    );
    let again = r.h.platform.report_remote_result(&r.worker, &grant.lease_id, &metrics(0.75)).unwrap();
    assert!(again.duplicate);
    for split in ["test-dev", "test-challenge"] {
        let board = r.board(split);
        assert_eq!(board.len(), 1);
        assert_eq!(board[0].entry.submission_id, id);
        assert_eq!(board[0].entry.metrics["accuracy"], 0.75);
    }
    assert_eq!(r.h.broker.depth(&RoutingKey::for_challenge(&r.h.platform.challenge(&r.challenge).unwrap())), 0);
    assert!(r.lease().is_none());
}

#[test]
fn schema_mismatch_leaves_submission_running() {
    let r = rig();
    let id = r.submit(b"[0]");
    let grant = r.lease().unwrap();
    let partial = RemoteReport::Metrics {
        results: SplitMetrics::from([("test-dev".into(), BTreeMap::from([("accuracy".to_owned(), 1.0)]))]),
    };
    let err = r.h.platform.report_remote_result(&r.worker, &grant.lease_id, &partial).unwrap_err();
    assert!(matches!(err, ApiError::SchemaMismatch(_)));
    assert_eq!(r.h.platform.submission(&id).unwrap().status, SubmissionStatus::Running);
    assert!(r.board("test-dev").is_empty());
    r.h.platform.report_remote_result(&r.worker, &grant.lease_id, &metrics(0.1)).unwrap();
}

#[test]
fn failure_reports_follow_the_retry_policy() {
    let r = rig();
    let id = r.submit(b"[0]");
    let max = r.h.broker.config().max_attempts;
    for attempt in 1..=max {
        let grant = r.lease().unwrap();
        assert_eq!(grant.attempt, attempt);
        let report = RemoteReport::Failure {
            log: format!("attempt {attempt} failed"),
        };
        let ack = r.h.platform.report_remote_result(&r.worker, &grant.lease_id, &report).unwrap();
        let expected = if attempt < max { SubmissionStatus::Running } else { SubmissionStatus::Failed };
        assert_eq!(ack.submission_status, expected);
    }
    assert!(r.lease().is_none());
    let view = r.h.platform.get_submission(&id, &r.h.alice).unwrap();
    assert_eq!(view.log_excerpt.as_deref(), Some(format!("attempt {max} failed").as_str()));
}

#[test]
fn stale_heartbeat_blocks_leasing_until_the_next_heartbeat() {
    let r = rig();
    r.submit(b"[0]");
    r.h.advance(LIVENESS_WINDOW_SECS);
    assert!(r.h.platform.lease_remote(&r.worker, None).is_ok());
    r.h.advance(1);
    assert_eq!(r.h.platform.lease_remote(&r.worker, None).unwrap_err(), ApiError::StaleHeartbeat);
    r.h.platform.remote_heartbeat(&r.worker).unwrap();
    // The earlier lease holds the only message until it expires.
    r.h.advance(r.h.broker.config().visibility.num_seconds() + 1);
    r.h.platform.remote_heartbeat(&r.worker).unwrap();
    assert!(r.lease().is_some());
}

#[test]
fn leases_belong_to_the_worker_that_took_them() {
    let r = rig();
    let reg = r.h.platform.register_remote_worker(&r.challenge, &r.h.host).unwrap();
    let other = r.h.platform.authenticate(&reg.token).unwrap();
    r.submit(b"[0]");
    let grant = r.lease().unwrap();
    assert!(r.h.platform.lease_remote(&other, None).unwrap().is_none());
    assert!(matches!(
        r.h.platform.report_remote_result(&other, &grant.lease_id, &metrics(0.2)),
        Err(ApiError::Unauthorized(_))
    ));
}
