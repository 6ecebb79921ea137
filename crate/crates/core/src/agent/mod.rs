//! Code-as-submission evaluation: agents run episode by episode against
//! hidden environments, each side in its own sandbox.
//!
//! Agent frames are single JSON lines. The platform sends
//! `{"episode": id, "step": n, "observation": {...}}` and the agent answers
//! `{"action": "<name>", "answer": ...}`; `"stop"` ends the episode.
//!
//! Environment programs are launched as `program <assets> <episode_id>` and
//! speak a similar protocol: they open with `{"observation": ...}`, answer
//! each `{"action", "answer"}` with `{"observation": ..., "done": bool}`, and
//! reply to `{"finish": true, "truncated": bool}` with
//! `{"outcome": ..., "metrics": {...}}`.

mod bundle;
pub mod process;

use std::collections::BTreeMap;
use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use bundle::{read_manifest, split_agent_bundle, AgentArchive, AgentManifest, AGENT_MANIFEST, AGENT_SCHEMA_VERSION};
pub use process::{LineError, LineProcess};

use crate::api::{AgentRefs, Submission};
use crate::archive::{read_zip, MAX_MEMBER_BYTES};
use crate::blob::BlobStore;
use crate::model::{EnvironmentSpec, ResourceLimits};
use crate::sandbox::{Bind, CancelToken, Isolation, Sandbox};
use crate::worker::evaluator::sandbox_limits;
use crate::worker::{EvalError, MetricResult, SplitResults, WorkerState};

pub const TERMINAL_ACTION: &str = "stop";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AgentError {
    #[error("could not fetch agent: {0}")]
    FetchFailed(String),
    #[error("agent manifest invalid: {0}")]
    ManifestInvalid(String),
    #[error("confined sandbox unavailable on this host")]
    SandboxUnavailable,
    #[error("agent crashed: {stderr}")]
    AgentCrashed { stderr: String },
    #[error("agent missed the step {step} deadline")]
    AgentTimeout { step: u32 },
    #[error("agent protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("environment failure: {0}")]
    Environment(String),
}

impl AgentError {
    /// Faults of the submitted agent itself, as opposed to the platform or environment.
    pub fn is_agent_fault(&self) -> bool {
        matches!(
            self,
            AgentError::ManifestInvalid(_)
                | AgentError::AgentCrashed { .. }
                | AgentError::AgentTimeout { .. }
                | AgentError::ProtocolViolation(_)
        )
    }
}

impl From<AgentError> for EvalError {
    fn from(e: AgentError) -> Self {
        if e.is_agent_fault() {
            EvalError::Rejected(e.to_string())
        } else {
            EvalError::Launch(e.to_string())
        }
    }
}

/// An agent runtime materialized on disk, ready to start fresh processes.
pub struct StagedAgent {
    dir: tempfile::TempDir,
    entrypoint: String,
    snapshot_name: String,
    files: Vec<String>,
    isolation: Isolation,
    limits: ResourceLimits,
}

/// Fetches an agent's image and snapshot and lays them out for sandboxed runs.
/// Requires confined isolation.
pub fn stage_agent(
    blobs: &dyn BlobStore,
    refs: &AgentRefs,
    isolation: Isolation,
    limits: ResourceLimits,
) -> Result<StagedAgent, AgentError> {
    if isolation != Isolation::Confined {
        return Err(AgentError::SandboxUnavailable);
    }
    let fetch = |r| blobs.get(r).map_err(|e| AgentError::FetchFailed(e.to_string()));
    let image = fetch(&refs.image_ref)?;
    let snapshot = fetch(&refs.snapshot_ref)?;
    let members = read_zip(&image, |_| MAX_MEMBER_BYTES).map_err(|e| AgentError::ManifestInvalid(e.to_string()))?;
    let manifest = read_manifest(&members)?;
    if !members.contains_key(&manifest.entrypoint) {
        return Err(AgentError::ManifestInvalid(format!("entrypoint {:?} missing", manifest.entrypoint)));
    }
    let io = |e: std::io::Error| AgentError::FetchFailed(e.to_string());
    let dir = tempfile::Builder::new().prefix("gauntlet-agent-").tempdir().map_err(io)?;
    let agent_dir = dir.path().join("agent");
    for (name, member) in &members {
        let path = agent_dir.join(name);
        fs::create_dir_all(path.parent().unwrap()).map_err(io)?;
        fs::write(&path, &member.data).map_err(io)?;
        let mode = if member.executable || name == &manifest.entrypoint { 0o755 } else { 0o644 };
        fs::set_permissions(&path, fs::Permissions::from_mode(mode)).map_err(io)?;
    }
    let snapshot_name = manifest
        .snapshot
        .as_deref()
        .and_then(|p| Path::new(p).file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "snapshot".into());
    let snapshot_dir = dir.path().join("snapshot");
    fs::create_dir_all(&snapshot_dir).map_err(io)?;
    fs::write(snapshot_dir.join(&snapshot_name), snapshot.as_slice()).map_err(io)?;
    Ok(StagedAgent {
        dir,
        entrypoint: manifest.entrypoint,
        snapshot_name,
        files: members.keys().cloned().collect(),
        isolation,
        limits,
    })
}

impl StagedAgent {
    /// Bundle members visible to the agent under `/agent`.
    pub fn files(&self) -> &[String] {
        &self.files
    }

    /// Path of the snapshot inside the sandbox; passed as the first argument.
    pub fn snapshot_path(&self) -> PathBuf {
        Path::new("/snapshot").join(&self.snapshot_name)
    }

    /// Starts a fresh agent process with its own scratch directory.
    pub fn spawn(&self) -> Result<LineProcess, AgentError> {
        let io = |e: std::io::Error| AgentError::FetchFailed(e.to_string());
        let scratch = self.dir.path().join(format!("work-{}", uuid::Uuid::new_v4().simple()));
        fs::create_dir_all(&scratch).map_err(io)?;
        let binds = vec![
            Bind::read_only(self.dir.path().join("agent"), "/agent"),
            Bind::read_only(self.dir.path().join("snapshot"), "/snapshot"),
            Bind::writable(&scratch, "/work"),
        ];
        let sandbox = Sandbox::new(self.isolation, binds, "/work", sandbox_limits(&self.limits)).map_err(io)?;
        let cmd = sandbox.command(Path::new("/agent").join(&self.entrypoint), [self.snapshot_path()]);
        LineProcess::spawn(sandbox, cmd).map_err(|e| AgentError::AgentCrashed { stderr: e.to_string() })
    }
}

/// A staged hidden environment.
pub struct EnvironmentRuntime<'a> {
    pub spec: &'a EnvironmentSpec,
    /// Staged evaluator code containing the environment program.
    pub code_dir: &'a Path,
    /// Staged private assets file.
    pub assets: &'a Path,
    pub isolation: Isolation,
    pub limits: ResourceLimits,
}

impl EnvironmentRuntime<'_> {
    fn spawn(&self, episode_id: &str) -> Result<LineProcess, AgentError> {
        let io = |e: std::io::Error| AgentError::Environment(e.to_string());
        let scratch = tempfile::Builder::new().prefix("gauntlet-env-").tempdir().map_err(io)?;
        let binds = vec![
            Bind::read_only(self.code_dir, "/env/code"),
            Bind::read_only(self.assets, "/env/assets"),
            Bind::writable(scratch.path(), "/work"),
        ];
        let sandbox = Sandbox::new(self.isolation, binds, "/work", sandbox_limits(&self.limits)).map_err(io)?;
        let program = Path::new("/env/code").join(&self.spec.program);
        let args = [sandbox.visible_path("/env/assets").into_os_string(), episode_id.into()];
        let cmd = sandbox.command(program, args);
        let mut process = LineProcess::spawn(sandbox, cmd).map_err(io)?;
        process.hold(scratch);
        Ok(process)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u32,
    pub action: String,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub answer: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode_id: String,
    pub steps_taken: u32,
    /// The episode hit `max_steps_per_episode` without the terminal action.
    pub truncated: bool,
    pub outcome: Value,
    pub metrics: BTreeMap<String, f64>,
    pub transcript: Vec<StepRecord>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentReply {
    action: String,
    #[serde(default)]
    answer: Value,
}

/// Runs one episode with a fresh agent process.
pub fn run_episode(agent: &StagedAgent, env: &EnvironmentRuntime<'_>, episode_id: &str) -> Result<EpisodeResult, AgentError> {
    let spec = env.spec;
    let step_deadline = Duration::from_millis(spec.step_deadline_ms.max(1));
    let episode_deadline = Instant::now() + step_deadline * (spec.max_steps_per_episode + 2);
    let mut environment = env.spawn(episode_id)?;
    let env_err = |what: &str, e: LineError| AgentError::Environment(format!("{what}: {e}"));
    let first = environment.recv(episode_deadline).map_err(|e| env_err("opening observation", e))?;
    let mut observation = first
        .get("observation")
        .cloned()
        .ok_or_else(|| AgentError::Environment("opening frame lacks an observation".into()))?;

    let mut agent_proc = agent.spawn()?;
    let mut transcript = Vec::new();
    let mut stopped = false;
    for step in 1..=spec.max_steps_per_episode {
        let frame = json!({"episode": episode_id, "step": step, "observation": observation});
        if agent_proc.send(&frame).is_err() {
            return Err(AgentError::AgentCrashed { stderr: agent_proc.stderr() });
        }
        let deadline = (Instant::now() + step_deadline).min(episode_deadline);
        let raw = match agent_proc.recv(deadline) {
            Ok(v) => v,
            Err(LineError::Timeout) => return Err(AgentError::AgentTimeout { step }),
            Err(LineError::Closed) | Err(LineError::Write(_)) => {
                return Err(AgentError::AgentCrashed { stderr: agent_proc.stderr() })
            }
            Err(LineError::TooLong) => return Err(AgentError::ProtocolViolation("oversized output".into())),
            Err(LineError::Invalid(e)) => return Err(AgentError::ProtocolViolation(format!("malformed frame: {e}"))),
        };
        let reply: AgentReply =
            serde_json::from_value(raw).map_err(|e| AgentError::ProtocolViolation(format!("malformed frame: {e}")))?;
        if !spec.action_vocabulary.iter().any(|a| a == &reply.action) {
            return Err(AgentError::ProtocolViolation(format!(
                "action {:?} is not in the vocabulary {:?}",
                reply.action, spec.action_vocabulary
            )));
        }
        environment
            .send(&json!({"action": reply.action, "answer": reply.answer}))
            .map_err(|e| env_err("action", e))?;
        let response = environment.recv(episode_deadline).map_err(|e| env_err("step", e))?;
        observation = response.get("observation").cloned().unwrap_or(Value::Null);
        let done = response.get("done").and_then(Value::as_bool).unwrap_or(false);
        stopped = reply.action == TERMINAL_ACTION;
        transcript.push(StepRecord {
            step,
            action: reply.action,
            answer: reply.answer,
        });
        if stopped || done {
            break;
        }
    }
    agent_proc.kill();
    let steps_taken = transcript.len() as u32;
    let truncated = !stopped && steps_taken == spec.max_steps_per_episode;
    environment
        .send(&json!({"finish": true, "truncated": truncated}))
        .map_err(|e| env_err("finish", e))?;
    let summary = environment.recv(episode_deadline).map_err(|e| env_err("finish", e))?;
    let metrics: BTreeMap<String, f64> = summary
        .get("metrics")
        .cloned()
        .map(serde_json::from_value)
        .transpose()
        .map_err(|e| AgentError::Environment(format!("metrics: {e}")))?
        .unwrap_or_default();
    Ok(EpisodeResult {
        episode_id: episode_id.to_owned(),
        steps_taken,
        truncated,
        outcome: summary.get("outcome").cloned().unwrap_or(Value::Null),
        metrics,
        transcript,
    })
}

/// Feeds episode results to the organizer's evaluator, which receives the
/// results file in place of a predictions file.
pub fn score_agent(
    state: &WorkerState,
    results: &[EpisodeResult],
    phase: &str,
    split: &str,
    schema: &[String],
    cancel: &CancelToken,
) -> Result<MetricResult, EvalError> {
    let launch = |e: std::io::Error| EvalError::Launch(e.to_string());
    let file = tempfile::Builder::new()
        .prefix("episodes-")
        .tempfile_in(state.scratch_dir())
        .map_err(launch)?;
    fs::write(file.path(), serde_json::to_vec(results).expect("results serialize")).map_err(launch)?;
    state.evaluate_items(file.path(), results.len() as u64, phase, split, schema, cancel)
}

/// Runs every episode of every split in the submission's phase and scores them.
pub fn evaluate_agent_submission(
    state: &WorkerState,
    blobs: &dyn BlobStore,
    submission: &Submission,
    cancel: &CancelToken,
) -> Result<SplitResults, EvalError> {
    let refs = submission
        .agent
        .as_ref()
        .ok_or_else(|| EvalError::Rejected("submission carries no agent".into()))?;
    let config = std::sync::Arc::clone(state.config());
    let agent = stage_agent(blobs, refs, state.settings().isolation, config.evaluator.limits)?;
    let code_dir = state.code_dir();
    let mut out = SplitResults::new();
    for (ps, split) in config.splits_for_phase(&submission.phase_codename) {
        let Some(spec) = &split.environment else {
            return Err(EvalError::Launch(format!("split {:?} has no environment", split.codename)));
        };
        let assets = state
            .staged_assets()
            .get(&spec.assets_ref)
            .ok_or_else(|| EvalError::Launch("environment assets not staged".into()))?;
        let runtime = EnvironmentRuntime {
            spec,
            code_dir: &code_dir,
            assets,
            isolation: state.settings().isolation,
            limits: config.evaluator.limits,
        };
        let mut episodes = Vec::with_capacity(spec.episodes.len());
        for episode in &spec.episodes {
            if cancel.is_cancelled() {
                return Err(EvalError::Cancelled);
            }
            episodes.push(run_episode(&agent, &runtime, episode)?);
        }
        let merged = score_agent(
            state,
            &episodes,
            &submission.phase_codename,
            &split.codename,
            &ps.leaderboard_schema,
            cancel,
        )?;
        out.insert(split.codename.clone(), merged);
    }
    Ok(out)
}
