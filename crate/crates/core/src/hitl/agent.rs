use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};

use crate::agent::{stage_agent, AgentError, LineError, LineProcess, StagedAgent};
use crate::api::Submission;
use crate::blob::SharedBlobStore;
use crate::ids::SessionId;
use crate::model::ResourceLimits;
use crate::sandbox::Isolation;

use super::{Message, Sender};

pub const RESPOND_ACTION: &str = "respond";

/// A live agent instance serving one session.
pub trait ChatAgent: Send {
    /// Answers the evaluator's message for `round`.
    fn respond(&mut self, session: &SessionId, round: u32, body: &str) -> Result<String, AgentError>;

    /// Replaces the instance with a fresh one brought up to date with `transcript`.
    fn restart(&mut self, session: &SessionId, transcript: &[Message]) -> Result<(), AgentError>;

    fn shutdown(&mut self);
}

/// Creates agent instances for submissions.
pub trait AgentLauncher: Send + Sync {
    fn launch(&self, submission: &Submission, limits: &ResourceLimits) -> Result<Box<dyn ChatAgent>, AgentError>;
}

/// Launches submitted agent bundles in the confined sandbox.
pub struct ProcessLauncher {
    pub blobs: SharedBlobStore,
    pub isolation: Isolation,
    pub reply_timeout: Duration,
}

impl AgentLauncher for ProcessLauncher {
    fn launch(&self, submission: &Submission, limits: &ResourceLimits) -> Result<Box<dyn ChatAgent>, AgentError> {
        let refs = submission
            .agent
            .as_ref()
            .ok_or_else(|| AgentError::ManifestInvalid("submission is not an agent bundle".into()))?;
        let staged = stage_agent(self.blobs.as_ref(), refs, self.isolation, *limits)?;
        let process = staged.spawn()?;
        Ok(Box::new(ProcessAgent {
            staged,
            process: Some(process),
            reply_timeout: self.reply_timeout,
        }))
    }
}

struct ProcessAgent {
    staged: StagedAgent,
    process: Option<LineProcess>,
    reply_timeout: Duration,
}

impl ProcessAgent {
    fn exchange(&mut self, session: &SessionId, round: u32, body: &str, replay: bool) -> Result<String, AgentError> {
        if self.process.is_none() {
            self.process = Some(self.staged.spawn()?);
        }
        let process = self.process.as_mut().unwrap();
        let mut frame = json!({"episode": session, "step": round, "observation": {"body": body}});
        if replay {
            frame["replay"] = Value::Bool(true);
        }
        let crashed = |p: &LineProcess| AgentError::AgentCrashed { stderr: p.stderr() };
        if process.send(&frame).is_err() {
            return Err(crashed(process));
        }
        let reply = match process.recv_within(self.reply_timeout) {
            Ok(v) => v,
            Err(LineError::Timeout) => return Err(AgentError::AgentTimeout { step: round }),
            Err(LineError::Closed | LineError::Write(_)) => return Err(crashed(process)),
            Err(e) => return Err(AgentError::ProtocolViolation(e.to_string())),
        };
        if reply.get("action").and_then(Value::as_str) != Some(RESPOND_ACTION) {
            return Err(AgentError::ProtocolViolation(format!("expected a {RESPOND_ACTION:?} action")));
        }
        match reply.get("answer") {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(other) => Ok(other.to_string()),
            None => Err(AgentError::ProtocolViolation("reply has no answer".into())),
        }
    }
}

impl ChatAgent for ProcessAgent {
    fn respond(&mut self, session: &SessionId, round: u32, body: &str) -> Result<String, AgentError> {
        let result = self.exchange(session, round, body, false);
        if result.is_err() {
            self.shutdown();
        }
        result
    }

    fn restart(&mut self, session: &SessionId, transcript: &[Message]) -> Result<(), AgentError> {
        self.shutdown();
        for m in transcript.iter().filter(|m| m.sender == Sender::Evaluator) {
            if let Err(e) = self.exchange(session, m.round, &m.body, true) {
                self.shutdown();
                return Err(e);
            }
        }
        Ok(())
    }

    fn shutdown(&mut self) {
        if let Some(mut p) = self.process.take() {
            p.kill();
        }
    }
}

/// In-process agent driven by a reply function; used for scripted setups.
pub struct FnAgent<F> {
    reply: F,
}

impl<F> FnAgent<F>
where
    F: FnMut(u32, &str) -> Result<String, AgentError> + Send,
{
    pub fn new(reply: F) -> Self {
        Self { reply }
    }
}

impl<F> ChatAgent for FnAgent<F>
where
    F: FnMut(u32, &str) -> Result<String, AgentError> + Send,
{
    fn respond(&mut self, _session: &SessionId, round: u32, body: &str) -> Result<String, AgentError> {
        (self.reply)(round, body)
    }

    fn restart(&mut self, _session: &SessionId, _transcript: &[Message]) -> Result<(), AgentError> {
        Ok(())
    }

    fn shutdown(&mut self) {}
}

/// Launcher producing in-process echo agents.
#[derive(Default)]
pub struct EchoLauncher;

impl AgentLauncher for EchoLauncher {
    fn launch(&self, _submission: &Submission, _limits: &ResourceLimits) -> Result<Box<dyn ChatAgent>, AgentError> {
        Ok(Box::new(FnAgent::new(|_, body: &str| Ok(body.to_owned()))))
    }
}

pub type SharedLauncher = Arc<dyn AgentLauncher>;
