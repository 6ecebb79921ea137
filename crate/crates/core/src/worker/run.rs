use std::time::Duration;

use super::{EvalError, SplitResults, WorkerState};
use crate::api::{ApiError, Platform, SplitMetrics, Submission, SubmissionKind, SubmissionStatus};
use crate::ids::SubmissionId;
use crate::model::EvaluatorKind;
use crate::queue::{Lease, RoutingKey};
use crate::sandbox::CancelToken;

/// Stops a worker loop; in-flight evaluations are abandoned unacknowledged.
pub type Shutdown = CancelToken;

/// What one pass of the worker loop did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Idle,
    Finished(SubmissionId),
    /// Evaluation failed and the message was requeued for another attempt.
    Retrying(SubmissionId),
    Failed(SubmissionId),
    /// Handed to the human-evaluation broker; results arrive later.
    HandedOff(SubmissionId),
    /// Already terminal (a redelivery); acknowledged without work.
    Skipped(SubmissionId),
    /// Shutdown arrived mid-evaluation; the lease was left to expire.
    Interrupted(SubmissionId),
    WarmupFailed(String),
}

/// Leases and fully handles at most one submission.
pub fn process_next(platform: &Platform, state: &mut WorkerState, shutdown: &Shutdown) -> Outcome {
    if let Err(e) = state.warmup(platform.blobs().as_ref()) {
        return Outcome::WarmupFailed(e.to_string());
    }
    let broker = platform.broker();
    let key = RoutingKey::for_challenge(state.config());
    let leased = match broker.lease(&key, &state.worker_id, broker.config().visibility) {
        Ok(Some(leased)) => leased,
        Ok(None) => return Outcome::Idle,
        Err(e) => {
            tracing::warn!(error = %e, "lease failed");
            return Outcome::Idle;
        }
    };
    let (message, lease) = leased;
    let id = message.submission_id.clone();
    let submission = match platform.submission(&id) {
        Ok(s) => s,
        Err(_) => {
            let _ = broker.nack(&lease, false);
            return Outcome::Skipped(id);
        }
    };
    if submission.status.is_terminal() {
        let _ = broker.ack(&lease);
        return Outcome::Skipped(id);
    }
    if submission.status == SubmissionStatus::Queued {
        if let Err(e) = platform.apply_transition(&id, SubmissionStatus::Running) {
            tracing::debug!(submission = %id, error = %e, "submission changed before evaluation");
            let _ = broker.ack(&lease);
            return Outcome::Skipped(id);
        }
    }
    tracing::info!(worker = %state.worker_id, submission = %id, attempt = lease.attempt, "evaluating");

    if state.config().evaluator.kind == EvaluatorKind::Hitl {
        return match platform.hitl().open_for_submission(&submission) {
            Ok(_) => {
                let _ = broker.ack(&lease);
                Outcome::HandedOff(id)
            }
            Err(e) => handle_failure(platform, &lease, &id, &e.to_string()),
        };
    }

    let result = evaluate(platform, state, &submission, shutdown);
    match result {
        Err(EvalError::Cancelled) if shutdown.is_cancelled() => Outcome::Interrupted(id),
        Err(e @ EvalError::Rejected(_)) => {
            if let Err(err) = platform.fail_submission(&id, &e.log_text()) {
                tracing::warn!(submission = %id, error = %err, "could not mark submission failed");
            }
            let _ = broker.ack(&lease);
            Outcome::Failed(id)
        }
        Err(e) => handle_failure(platform, &lease, &id, &e.log_text()),
        Ok(results) => {
            let metrics: SplitMetrics = results.into_iter().map(|(split, r)| (split, r.metrics)).collect();
            match platform.finish_submission(&id, &metrics) {
                Ok(_) => {
                    if let Err(e) = broker.ack(&lease) {
                        tracing::warn!(submission = %id, error = %e, "ack after finish failed");
                    }
                    Outcome::Finished(id)
                }
                Err(ApiError::IllegalTransition { .. }) => {
                    let _ = broker.ack(&lease);
                    Outcome::Skipped(id)
                }
                Err(e) => handle_failure(platform, &lease, &id, &e.to_string()),
            }
        }
    }
}

fn evaluate(
    platform: &Platform,
    state: &WorkerState,
    submission: &Submission,
    shutdown: &Shutdown,
) -> Result<SplitResults, EvalError> {
    match submission.kind {
        SubmissionKind::Predictions => {
            let artifact = platform
                .blobs()
                .get(&submission.artifact_ref)
                .map_err(|e| EvalError::Launch(e.to_string()))?;
            let dir = state.scratch_dir().join("submissions");
            std::fs::create_dir_all(&dir).map_err(|e| EvalError::Launch(e.to_string()))?;
            let path = dir.join(submission.id.as_str());
            std::fs::write(&path, artifact.as_slice()).map_err(|e| EvalError::Launch(e.to_string()))?;
            let result = state.evaluate_predictions(&path, &submission.phase_codename, shutdown);
            let _ = std::fs::remove_file(&path);
            result
        }
        SubmissionKind::Agent => crate::agent::evaluate_agent_submission(state, platform.blobs().as_ref(), submission, shutdown),
    }
}

/// Requeues while attempts remain; on the last attempt marks the submission
/// Failed with `log` and dead-letters the message.
fn handle_failure(platform: &Platform, lease: &Lease, id: &SubmissionId, log: &str) -> Outcome {
    let broker = platform.broker();
    tracing::warn!(submission = %id, attempt = lease.attempt, "evaluation failed: {log}");
    if lease.attempt < broker.config().max_attempts {
        let _ = platform.attach_log(id, log);
        let _ = broker.nack(lease, true);
        return Outcome::Retrying(id.clone());
    }
    if let Err(e) = platform.fail_submission(id, log) {
        tracing::warn!(submission = %id, error = %e, "could not mark submission failed");
    }
    let _ = broker.nack(lease, false);
    Outcome::Failed(id.clone())
}

/// Serves the challenge queue until `shutdown` fires.
pub fn run_loop(platform: &Platform, state: &mut WorkerState, shutdown: &Shutdown, idle_poll: Duration) {
    let mut backoff = idle_poll;
    while !shutdown.is_cancelled() {
        match process_next(platform, state, shutdown) {
            Outcome::Idle => {
                sleep_unless(shutdown, idle_poll);
            }
            Outcome::WarmupFailed(e) => {
                tracing::error!(worker = %state.worker_id, "warm-up failed: {e}");
                sleep_unless(shutdown, backoff);
                backoff = (backoff * 2).min(Duration::from_secs(30));
            }
            _ => backoff = idle_poll,
        }
    }
}

fn sleep_unless(shutdown: &Shutdown, total: Duration) {
    let step = Duration::from_millis(10);
    let mut slept = Duration::ZERO;
    while slept < total && !shutdown.is_cancelled() {
        std::thread::sleep(step);
        slept += step;
    }
}
