//! The evaluator subprocess protocol.
//!
//! The entrypoint runs as
//! `entrypoint <annotations> <submission> <phase> <split> <start> <end>`
//! and prints one JSON object `{"result": {...}, "item_count": n}` on stdout.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;
use serde_json::Value;

use super::{Chunk, MetricResult};
use crate::model::ResourceLimits;
use crate::sandbox::{supervise, Bind, CancelToken, Isolation, Sandbox, SandboxLimits, Termination};

pub const OUTPUT_LIMIT_ENV: &str = "EVAL_OUTPUT_LIMIT_BYTES";
pub const DEFAULT_OUTPUT_LIMIT: usize = 1024 * 1024;
const STDERR_EXCERPT: usize = 16 * 1024;

/// `EVAL_OUTPUT_LIMIT_BYTES` from this process's environment, or the default.
pub fn output_limit_from_env() -> usize {
    std::env::var(OUTPUT_LIMIT_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(DEFAULT_OUTPUT_LIMIT)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("evaluator crashed ({status}): {stderr}")]
    Crashed { status: String, stderr: String },
    #[error("evaluator exceeded its time limit")]
    Timeout,
    #[error("evaluator protocol error: {0}")]
    Protocol(String),
    #[error("result does not match the leaderboard schema: {0}")]
    SchemaMismatch(String),
    /// A deterministic fault of the submission itself; retrying cannot help.
    #[error("submission rejected: {0}")]
    Rejected(String),
    #[error("evaluation cancelled")]
    Cancelled,
    #[error("evaluation could not start: {0}")]
    Launch(String),
}

impl EvalError {
    /// Text suitable for the submission log.
    pub fn log_text(&self) -> String {
        match self {
            EvalError::Crashed { status, stderr } => format!("evaluator crashed ({status})\n{stderr}"),
            other => other.to_string(),
        }
    }
}

/// Everything needed to launch one evaluator process.
#[derive(Debug, Clone)]
pub struct Invocation<'a> {
    /// Staged evaluator code directory on the host.
    pub code_dir: &'a Path,
    pub entrypoint: &'a str,
    /// Annotation file on the host, if the split has one.
    pub annotations: Option<&'a Path>,
    pub submission: &'a Path,
    pub phase: &'a str,
    pub split: &'a str,
    pub chunk: Chunk,
    pub limits: ResourceLimits,
    pub isolation: Isolation,
    pub output_limit: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EvaluatorOutput {
    result: serde_json::Map<String, Value>,
    item_count: u64,
    #[serde(default)]
    extra: Value,
}

pub fn sandbox_limits(limits: &ResourceLimits) -> SandboxLimits {
    SandboxLimits {
        cpu_seconds: limits.cpu_seconds,
        memory_bytes: limits.memory_bytes,
        max_processes: limits.max_processes,
        ..SandboxLimits::default()
    }
}

/// Runs the evaluator once over `inv.chunk`.
pub fn run_evaluator(inv: &Invocation<'_>, cancel: Option<&CancelToken>) -> Result<MetricResult, EvalError> {
    let launch = |e: std::io::Error| EvalError::Launch(e.to_string());
    let scratch = tempfile::Builder::new().prefix("gauntlet-eval-").tempdir().map_err(launch)?;
    let mut binds = vec![
        Bind::read_only(inv.code_dir, "/eval/code"),
        Bind::read_only(inv.submission, "/eval/submission"),
        Bind::writable(scratch.path(), "/work"),
    ];
    let annotations_inside = match inv.annotations {
        Some(path) => {
            binds.push(Bind::read_only(path, "/eval/annotations"));
            PathBuf::from("/eval/annotations")
        }
        None => PathBuf::from("/dev/null"),
    };
    let sandbox = Sandbox::new(inv.isolation, binds, "/work", sandbox_limits(&inv.limits)).map_err(launch)?;
    let args = [
        sandbox.visible_path(&annotations_inside).into_os_string(),
        sandbox.visible_path("/eval/submission").into_os_string(),
        inv.phase.into(),
        inv.split.into(),
        inv.chunk.start.to_string().into(),
        inv.chunk.end.to_string().into(),
    ];
    let mut cmd = sandbox.command(Path::new("/eval/code").join(inv.entrypoint), args);
    cmd.env(OUTPUT_LIMIT_ENV, inv.output_limit.to_string());
    let wall = Duration::from_secs(inv.limits.wall_seconds.max(1));
    let out = supervise(&sandbox, cmd, None, wall, inv.output_limit, cancel).map_err(launch)?;
    let stderr = || {
        let text = String::from_utf8_lossy(&out.stderr);
        text.chars().take(STDERR_EXCERPT).collect::<String>()
    };
    match out.termination {
        Termination::TimedOut => return Err(EvalError::Timeout),
        Termination::Cancelled => return Err(EvalError::Cancelled),
        Termination::OutputExceeded => {
            return Err(EvalError::Protocol(format!("stdout exceeds {} bytes", inv.output_limit)));
        }
        Termination::Exited(status) if !status.success() => {
            use std::os::unix::process::ExitStatusExt;
            if status.signal() == Some(libc::SIGXCPU) {
                return Err(EvalError::Timeout);
            }
            return Err(EvalError::Crashed {
                status: status.to_string(),
                stderr: stderr(),
            });
        }
        Termination::Exited(_) => {}
    }
    parse_output(&out.stdout, inv.chunk)
}

/// Parses and checks one evaluator stdout document.
pub fn parse_output(stdout: &[u8], chunk: Chunk) -> Result<MetricResult, EvalError> {
    let text = std::str::from_utf8(stdout).map_err(|_| EvalError::Protocol("stdout is not UTF-8".into()))?;
    let parsed: EvaluatorOutput = serde_json::from_str(text.trim())
        .map_err(|e| EvalError::Protocol(format!("unparseable output: {e}")))?;
    if parsed.item_count != chunk.len() {
        return Err(EvalError::Protocol(format!(
            "item_count {} does not match chunk size {}",
            parsed.item_count,
            chunk.len()
        )));
    }
    let mut metrics = std::collections::BTreeMap::new();
    for (name, value) in parsed.result {
        match value.as_f64() {
            Some(v) if v.is_finite() => {
                metrics.insert(name, v);
            }
            _ => return Err(EvalError::Protocol(format!("metric {name:?} is not a finite number"))),
        }
    }
    Ok(MetricResult {
        metrics,
        item_count: parsed.item_count,
        extra: parsed.extra,
    })
}
