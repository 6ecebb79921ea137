//! Reference loop for an organizer-operated evaluation worker: lease a
//! submission, run the evaluator on private annotations, report metrics.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};

use gauntlet_core::api::SplitMetrics;
use gauntlet_core::model::ResourceLimits;
use gauntlet_core::remote::{RemoteLeaseGrant, RemoteSplit, HEARTBEAT_INTERVAL_SECS};
use gauntlet_core::sandbox::{CancelToken, Isolation};
use gauntlet_core::worker::evaluator::{output_limit_from_env, run_evaluator, Invocation};
use gauntlet_core::worker::{merge_results, plan_chunks, Chunk, EvalError, MergeError, MetricResult};

use crate::client::{Client, ClientError};
use crate::exit::{self, CliError};

#[derive(Debug, Clone)]
pub struct WorkerOptions {
    /// Evaluator entrypoint; its directory is mounted as the code root.
    pub evaluator: PathBuf,
    /// Directory holding `<split codename>.json` annotation files.
    pub annotations: Option<PathBuf>,
    pub challenge: Option<String>,
    pub parallelism: usize,
    pub isolation: Isolation,
    pub limits: ResourceLimits,
    /// Return once the queue is empty instead of polling forever.
    pub exit_when_idle: bool,
    pub heartbeat_every: Duration,
    pub max_backoff: Duration,
}

impl WorkerOptions {
    pub fn new(evaluator: impl Into<PathBuf>) -> Self {
        Self {
            evaluator: evaluator.into(),
            annotations: None,
            challenge: None,
            parallelism: 1,
            isolation: Isolation::detect(),
            limits: ResourceLimits::default(),
            exit_when_idle: false,
            heartbeat_every: Duration::from_secs(HEARTBEAT_INTERVAL_SECS),
            max_backoff: Duration::from_secs(30),
        }
    }
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct WorkerStats {
    pub evaluated: u32,
    pub failed: u32,
    pub duplicates: u32,
    pub expired: u32,
}

/// Runs until `stop` is set, the queue drains under `exit_when_idle`, or
/// the token is refused.
pub fn run(client: &Client, opts: &WorkerOptions, stop: &Arc<AtomicBool>) -> Result<WorkerStats, CliError> {
    let code_dir = opts
        .evaluator
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let entrypoint = opts
        .evaluator
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| CliError::bad_input("evaluator path has no file name"))?
        .to_owned();
    if !opts.evaluator.is_file() {
        return Err(CliError::bad_input(format!("evaluator {} not found", opts.evaluator.display())));
    }
    heartbeat(client)?;
    let beat = spawn_heartbeat(client.clone(), opts.heartbeat_every, Arc::clone(stop));
    let result = work(client, opts, &code_dir, &entrypoint, stop);
    stop.store(true, Ordering::SeqCst);
    let _ = beat.join();
    result
}

fn heartbeat(client: &Client) -> Result<(), CliError> {
    match client.send_json("POST", "/remote/heartbeat", &json!({})) {
        Ok(_) => Ok(()),
        Err(e) if exit::code_for(&e) == exit::AUTH => Err(e.into()),
        Err(e) => {
            tracing::warn!(error = %e, "heartbeat failed");
            Ok(())
        }
    }
}

fn spawn_heartbeat(client: Client, every: Duration, stop: Arc<AtomicBool>) -> std::thread::JoinHandle<()> {
    std::thread::spawn(move || {
        let tick = Duration::from_millis(50).min(every);
        let mut waited = Duration::ZERO;
        while !stop.load(Ordering::SeqCst) {
            std::thread::sleep(tick);
            waited += tick;
            if waited >= every {
                waited = Duration::ZERO;
                if heartbeat(&client).is_err() {
                    return;
                }
            }
        }
    })
}

fn sleep_unless_stopped(d: Duration, stop: &AtomicBool) {
    let step = Duration::from_millis(20);
    let mut left = d;
    while !left.is_zero() && !stop.load(Ordering::SeqCst) {
        let s = step.min(left);
        std::thread::sleep(s);
        left -= s;
    }
}

fn work(client: &Client, opts: &WorkerOptions, code_dir: &Path, entrypoint: &str, stop: &AtomicBool) -> Result<WorkerStats, CliError> {
    let mut stats = WorkerStats::default();
    let initial = Duration::from_millis(200);
    let mut backoff = initial;
    let lease_body = json!({ "challenge_id": opts.challenge });
    while !stop.load(Ordering::SeqCst) {
        let grant = match client.send_json("POST", "/remote/lease", &lease_body) {
            Ok(reply) if reply.status == 204 => None,
            Ok(reply) => Some(
                serde_json::from_value::<RemoteLeaseGrant>(reply.body)
                    .map_err(|e| CliError::new(exit::API, "protocol", format!("unreadable lease: {e}")))?,
            ),
            Err(e) if exit::code_for(&e) == exit::AUTH => return Err(e.into()),
            Err(ClientError::Api { code, .. }) if code == "stale_heartbeat" => {
                heartbeat(client)?;
                continue;
            }
            Err(e) => {
                tracing::warn!(error = %e, backoff_ms = backoff.as_millis() as u64, "lease failed");
                sleep_unless_stopped(backoff, stop);
                backoff = (backoff * 2).min(opts.max_backoff);
                continue;
            }
        };
        let Some(grant) = grant else {
            if opts.exit_when_idle {
                break;
            }
            sleep_unless_stopped(backoff, stop);
            backoff = (backoff * 2).min(opts.max_backoff);
            continue;
        };
        backoff = initial;
        let report = match evaluate_grant(client, opts, code_dir, entrypoint, &grant) {
            Ok(results) => json!({"lease_id": grant.lease_id, "outcome": "metrics", "results": results}),
            Err(log) => json!({"lease_id": grant.lease_id, "outcome": "failure", "log": log}),
        };
        let failed = report["outcome"] == "failure";
        match client.send_json("POST", "/remote/results", &report) {
            Ok(ack) if ack.body["duplicate"] == Value::Bool(true) => stats.duplicates += 1,
            Ok(_) if failed => stats.failed += 1,
            Ok(_) => stats.evaluated += 1,
            Err(e) if exit::code_for(&e) == exit::AUTH => return Err(e.into()),
            Err(e) => {
                if e.code() == "lease_expired" {
                    stats.expired += 1;
                }
                tracing::warn!(submission = %grant.submission_id, error = %e, "report rejected");
            }
        }
    }
    Ok(stats)
}

/// Evaluates every split of a grant. `Err` carries the failure log.
fn evaluate_grant(
    client: &Client,
    opts: &WorkerOptions,
    code_dir: &Path,
    entrypoint: &str,
    grant: &RemoteLeaseGrant,
) -> Result<SplitMetrics, String> {
    let artifact = client
        .get_bytes(&grant.artifact_url)
        .map_err(|e| format!("artifact download failed: {e}"))?;
    let file = tempfile::Builder::new()
        .prefix("gauntlet-submission-")
        .tempfile()
        .map_err(|e| e.to_string())?;
    std::fs::write(file.path(), &artifact).map_err(|e| e.to_string())?;
    let mut results = SplitMetrics::new();
    for split in &grant.splits {
        let merged = evaluate_split(opts, code_dir, entrypoint, file.path(), &grant.phase, split).map_err(|e| e.log_text())?;
        results.insert(split.codename.clone(), merged.metrics);
    }
    Ok(results)
}

/// Runs the evaluator over a split in parallel chunks and merges them.
pub fn evaluate_split(
    opts: &WorkerOptions,
    code_dir: &Path,
    entrypoint: &str,
    submission: &Path,
    phase: &str,
    split: &RemoteSplit,
) -> Result<MetricResult, EvalError> {
    let annotations = opts
        .annotations
        .as_ref()
        .map(|dir| dir.join(format!("{}.json", split.codename)))
        .filter(|p| p.exists());
    let mut chunks = plan_chunks(split.item_count, opts.parallelism.max(1));
    if chunks.is_empty() {
        chunks.push(Chunk::whole(0));
    }
    let cancel = CancelToken::new();
    let output_limit = output_limit_from_env();
    let parts: Vec<Result<MetricResult, EvalError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .iter()
            .map(|&chunk| {
                let inv = Invocation {
                    code_dir,
                    entrypoint,
                    annotations: annotations.as_deref(),
                    submission,
                    phase,
                    split: &split.codename,
                    chunk,
                    limits: opts.limits,
                    isolation: opts.isolation,
                    output_limit,
                };
                let cancel = &cancel;
                scope.spawn(move || {
                    let r = run_evaluator(&inv, Some(cancel));
                    if r.is_err() {
                        cancel.cancel();
                    }
                    r
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("chunk thread panicked")).collect()
    });
    let mut ok = Vec::with_capacity(parts.len());
    let mut first_error = None;
    for part in parts {
        match part {
            Ok(p) => ok.push(p),
            Err(EvalError::Cancelled) => {}
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_error {
        return Err(e);
    }
    merge_results(&ok, &split.leaderboard_schema).map_err(|e| match e {
        MergeError::SchemaMismatch(m) => EvalError::SchemaMismatch(format!("missing metric {m:?}")),
        other => EvalError::Protocol(other.to_string()),
    })
}
