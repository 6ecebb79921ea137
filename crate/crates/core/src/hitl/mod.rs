//! Live human evaluation: pairs evaluators with submitted agents for
//! multi-round chat sessions, keeps session bookkeeping across disconnects
//! and turns per-round ratings into leaderboard results.
//!
//! Every session is a serialized actor behind its own lock. Session records
//! are journaled on every change, so a restarted broker resumes each session
//! with its transcript intact (paired sessions come back as interrupted).

mod agent;
pub mod frames;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::{Arc, Weak};
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

pub use agent::{AgentLauncher, ChatAgent, EchoLauncher, FnAgent, ProcessLauncher, SharedLauncher, RESPOND_ACTION};
use frames::{Ack, Rating, ServerFrame, SessionSnapshot};

use crate::agent::AgentError;
use crate::api::{ApiError, Platform, Principal, SplitMetrics, Submission, SubmissionStatus};
use crate::clock::Timestamp;
use crate::ids::{AccountId, ChallengeId, SessionId, SubmissionId};
use crate::journal::Journal;
use crate::model::{ChallengeConfig, EvaluatorKind, HitlConfig};
use crate::sandbox::Isolation;

const JOURNAL_NAME: &str = "hitl-sessions";
const JOURNAL_VERSION: u32 = 1;

#[derive(Clone)]
pub struct HitlSettings {
    /// Agent launcher; `None` runs submitted bundles in the sandbox.
    pub launcher: Option<SharedLauncher>,
    /// Session journal; `None` keeps sessions in memory only.
    pub journal_path: Option<PathBuf>,
    pub reply_timeout: Duration,
    pub isolation: Option<Isolation>,
}

impl Default for HitlSettings {
    fn default() -> Self {
        Self {
            launcher: None,
            journal_path: None,
            reply_timeout: Duration::from_secs(30),
            isolation: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Open,
    Paired,
    Interrupted,
    Completed,
    Expired,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionOutcome {
    Approved,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sender {
    Evaluator,
    Agent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub sender: Sender,
    pub round: u32,
    pub body: String,
    pub sent_at: Timestamp,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluatorHistory {
    pub completed: u32,
    pub abandoned: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluatorProfile {
    pub evaluator_id: AccountId,
    pub qualification_passed: bool,
    pub history: EvaluatorHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitlSession {
    pub session_id: SessionId,
    pub submission_id: SubmissionId,
    pub challenge_id: ChallengeId,
    /// Evaluation slot this session fills; replacements keep the slot.
    pub slot: u32,
    pub evaluator_id: Option<AccountId>,
    pub state: SessionState,
    pub outcome: Option<SessionOutcome>,
    pub round_count: u32,
    pub rounds_required: u32,
    pub transcript: Vec<Message>,
    /// axis → round → value.
    pub ratings: BTreeMap<String, BTreeMap<u32, i32>>,
    pub opened_at: Timestamp,
    pub last_activity: Timestamp,
    pub ttl_secs: u64,
    pub replaces: Option<SessionId>,
    pub replaced_by: Option<SessionId>,
}

impl HitlSession {
    /// Whether every axis carries a rating for every exchanged round.
    pub fn fully_rated(&self, axes: &[String]) -> bool {
        axes.iter().all(|axis| {
            let rated = self.ratings.get(axis);
            (1..=self.round_count).all(|r| rated.is_some_and(|m| m.contains_key(&r)))
        })
    }

    /// Per-axis mean over the rated rounds.
    pub fn axis_means(&self) -> BTreeMap<String, f64> {
        self.ratings
            .iter()
            .filter(|(_, rounds)| !rounds.is_empty())
            .map(|(axis, rounds)| {
                let sum: i64 = rounds.values().map(|&v| v as i64).sum();
                (axis.clone(), sum as f64 / rounds.len() as f64)
            })
            .collect()
    }
}

/// Result of a successful pairing: the connection handle and opening frame.
#[derive(Debug, Clone)]
pub struct Pairing {
    pub session_id: SessionId,
    pub connection: u64,
    pub frame: ServerFrame,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentReply {
    pub round: u32,
    pub body: String,
    pub rounds_remaining: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitlReport {
    pub submission_id: SubmissionId,
    pub sessions: Vec<HitlSession>,
    pub completed_sessions: u32,
    /// Mean over completed sessions of each session's per-axis mean.
    pub aggregate: BTreeMap<String, f64>,
}

/// Who is acting on a session: the evaluator and, for channel clients, the
/// connection handle returned by pairing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Actor<'a> {
    pub evaluator: &'a AccountId,
    pub connection: Option<u64>,
}

impl<'a> Actor<'a> {
    pub fn rest(evaluator: &'a AccountId) -> Self {
        Self {
            evaluator,
            connection: None,
        }
    }

    pub fn channel(evaluator: &'a AccountId, connection: u64) -> Self {
        Self {
            evaluator,
            connection: Some(connection),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Record {
    Session(Box<HitlSession>),
    Qualification {
        challenge_id: ChallengeId,
        evaluator_id: AccountId,
        passed: bool,
    },
    History {
        evaluator_id: AccountId,
        history: EvaluatorHistory,
    },
}

struct SessionActor {
    session: HitlSession,
    agent: Option<Box<dyn ChatAgent>>,
    connection: u64,
    /// Opening order within this broker.
    seq: u64,
}

type ActorRef = Arc<Mutex<SessionActor>>;

#[derive(Default)]
struct Registry {
    sessions: BTreeMap<SessionId, ActorRef>,
    by_submission: BTreeMap<SubmissionId, Vec<SessionId>>,
    qualified: BTreeSet<(ChallengeId, AccountId)>,
    histories: BTreeMap<AccountId, EvaluatorHistory>,
    next_connection: u64,
    next_seq: u64,
}

pub struct HitlBroker {
    platform: Weak<Platform>,
    settings: HitlSettings,
    registry: Mutex<Registry>,
    journal: Option<Journal<Record>>,
    journal_error: Option<String>,
}

fn session_err(code: &'static str, message: impl Into<String>) -> ApiError {
    ApiError::Session {
        code,
        message: message.into(),
    }
}

fn agent_err(e: &AgentError) -> ApiError {
    match e {
        AgentError::AgentTimeout { .. } => session_err("agent_timeout", e.to_string()),
        _ => session_err("agent_failed", e.to_string()),
    }
}

impl HitlBroker {
    /// Creates the broker, replaying the session journal when one is configured.
    pub fn new(platform: Weak<Platform>, settings: HitlSettings) -> Self {
        let mut registry = Registry::default();
        let mut journal = None;
        let mut journal_error = None;
        if let Some(path) = &settings.journal_path {
            match Journal::<Record>::open(path, JOURNAL_NAME, JOURNAL_VERSION) {
                Ok((j, records)) => {
                    let mut sessions: BTreeMap<SessionId, HitlSession> = BTreeMap::new();
                    for record in records {
                        match record {
                            Record::Session(s) => {
                                let list = registry.by_submission.entry(s.submission_id.clone()).or_default();
                                if !list.contains(&s.session_id) {
                                    list.push(s.session_id.clone());
                                }
                                sessions.insert(s.session_id.clone(), *s);
                            }
                            Record::Qualification {
                                challenge_id,
                                evaluator_id,
                                passed,
                            } => {
                                if passed {
                                    registry.qualified.insert((challenge_id, evaluator_id));
                                } else {
                                    registry.qualified.remove(&(challenge_id, evaluator_id));
                                }
                            }
                            Record::History { evaluator_id, history } => {
                                registry.histories.insert(evaluator_id, history);
                            }
                        }
                    }
                    for (id, mut session) in sessions {
                        if session.state == SessionState::Paired {
                            session.state = SessionState::Interrupted;
                            let _ = j.append(&Record::Session(Box::new(session.clone())));
                        }
                        registry.next_seq += 1;
                        let actor = SessionActor {
                            session,
                            agent: None,
                            connection: 0,
                            seq: registry.next_seq,
                        };
                        registry.sessions.insert(id, Arc::new(Mutex::new(actor)));
                    }
                    journal = Some(j);
                }
                Err(e) => {
                    tracing::error!(error = %e, "hitl journal unavailable");
                    journal_error = Some(e.to_string());
                }
            }
        }
        Self {
            platform,
            settings,
            registry: Mutex::new(registry),
            journal,
            journal_error,
        }
    }

    fn platform(&self) -> Result<Arc<Platform>, ApiError> {
        self.platform
            .upgrade()
            .ok_or_else(|| ApiError::Unavailable("platform is shutting down".into()))
    }

    fn launcher(&self, platform: &Platform) -> SharedLauncher {
        match &self.settings.launcher {
            Some(l) => Arc::clone(l),
            None => Arc::new(ProcessLauncher {
                blobs: Arc::clone(platform.blobs()),
                isolation: self.settings.isolation.unwrap_or_else(Isolation::detect),
                reply_timeout: self.settings.reply_timeout,
            }),
        }
    }

    fn persist(&self, record: &Record) -> Result<(), ApiError> {
        if let Some(e) = &self.journal_error {
            return Err(ApiError::Unavailable(format!("session journal: {e}")));
        }
        match &self.journal {
            Some(j) => j.append(record).map_err(|e| ApiError::Internal(e.to_string())),
            None => Ok(()),
        }
    }

    fn persist_session(&self, session: &HitlSession) -> Result<(), ApiError> {
        self.persist(&Record::Session(Box::new(session.clone())))
    }

    fn actor(&self, id: &SessionId) -> Result<ActorRef, ApiError> {
        self.registry
            .lock()
            .sessions
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("session {id}")))
    }

    fn hitl_config(platform: &Platform, challenge: &ChallengeId) -> Result<(Arc<ChallengeConfig>, HitlConfig), ApiError> {
        let config = platform.challenge(challenge)?;
        if config.evaluator.kind != EvaluatorKind::Hitl {
            return Err(ApiError::NotHitlChallenge);
        }
        let hitl = config.hitl.clone().ok_or(ApiError::NotHitlChallenge)?;
        Ok((config, hitl))
    }

    // ---- opening ----

    /// Opens the configured number of evaluation slots for a submission,
    /// unless it already has sessions.
    pub fn open_for_submission(&self, submission: &Submission) -> Result<Vec<HitlSession>, ApiError> {
        let platform = self.platform()?;
        let (_, hitl) = Self::hitl_config(&platform, &submission.challenge_id)?;
        let existing = self.sessions_of(&submission.id);
        if !existing.is_empty() {
            return Ok(existing);
        }
        self.open_slots(&platform, submission, hitl.sessions_per_submission)
    }

    /// Opens `count` additional evaluation slots for a submission.
    pub fn open_sessions(&self, submission: &SubmissionId, count: u32, caller: &Principal) -> Result<Vec<HitlSession>, ApiError> {
        let platform = self.platform()?;
        let submission = platform.submission(submission)?;
        platform.require_host(caller, &submission.challenge_id)?;
        Self::hitl_config(&platform, &submission.challenge_id)?;
        self.open_slots(&platform, &submission, count)
    }

    fn open_slots(&self, platform: &Platform, submission: &Submission, count: u32) -> Result<Vec<HitlSession>, ApiError> {
        let (config, _) = Self::hitl_config(platform, &submission.challenge_id)?;
        let launcher = self.launcher(platform);
        let mut agents = Vec::with_capacity(count as usize);
        for _ in 0..count {
            match launcher.launch(submission, &config.evaluator.limits) {
                Ok(a) => agents.push(a),
                Err(e) => {
                    for mut a in agents {
                        a.shutdown();
                    }
                    return Err(session_err("staging_failed", e.to_string()));
                }
            }
        }
        let first_slot = {
            let registry = self.registry.lock();
            registry.by_submission.get(&submission.id).map_or(0, |ids| {
                ids.iter()
                    .filter_map(|id| registry.sessions.get(id))
                    .map(|a| a.lock().session.slot + 1)
                    .max()
                    .unwrap_or(0)
            })
        };
        let mut opened = Vec::with_capacity(agents.len());
        for (i, agent) in agents.into_iter().enumerate() {
            let session = self.insert_session(platform, submission, &config, first_slot + i as u32, None, Some(agent))?;
            opened.push(session);
        }
        Ok(opened)
    }

    fn insert_session(
        &self,
        platform: &Platform,
        submission: &Submission,
        config: &ChallengeConfig,
        slot: u32,
        replaces: Option<SessionId>,
        agent: Option<Box<dyn ChatAgent>>,
    ) -> Result<HitlSession, ApiError> {
        let hitl = config.hitl.as_ref().ok_or(ApiError::NotHitlChallenge)?;
        let now = platform.now();
        let session = HitlSession {
            session_id: SessionId::generate(),
            submission_id: submission.id.clone(),
            challenge_id: submission.challenge_id.clone(),
            slot,
            evaluator_id: None,
            state: SessionState::Open,
            outcome: None,
            round_count: 0,
            rounds_required: hitl.rounds_required,
            transcript: Vec::new(),
            ratings: BTreeMap::new(),
            opened_at: now,
            last_activity: now,
            ttl_secs: hitl.session_ttl_secs,
            replaces,
            replaced_by: None,
        };
        self.persist_session(&session)?;
        let mut registry = self.registry.lock();
        registry.next_seq += 1;
        let seq = registry.next_seq;
        registry
            .by_submission
            .entry(session.submission_id.clone())
            .or_default()
            .push(session.session_id.clone());
        registry.sessions.insert(
            session.session_id.clone(),
            Arc::new(Mutex::new(SessionActor {
                session: session.clone(),
                agent,
                connection: 0,
                seq,
            })),
        );
        Ok(session)
    }

    // ---- evaluators ----

    /// Records the outcome of an evaluator's qualification test for a challenge.
    pub fn set_qualification(
        &self,
        challenge: &ChallengeId,
        evaluator: &AccountId,
        passed: bool,
        caller: &Principal,
    ) -> Result<EvaluatorProfile, ApiError> {
        let platform = self.platform()?;
        platform.require_host(caller, challenge)?;
        Self::hitl_config(&platform, challenge)?;
        self.persist(&Record::Qualification {
            challenge_id: challenge.clone(),
            evaluator_id: evaluator.clone(),
            passed,
        })?;
        let key = (challenge.clone(), evaluator.clone());
        let mut registry = self.registry.lock();
        if passed {
            registry.qualified.insert(key);
        } else {
            registry.qualified.remove(&key);
        }
        drop(registry);
        Ok(self.profile(challenge, evaluator))
    }

    pub fn profile(&self, challenge: &ChallengeId, evaluator: &AccountId) -> EvaluatorProfile {
        let registry = self.registry.lock();
        EvaluatorProfile {
            evaluator_id: evaluator.clone(),
            qualification_passed: registry.qualified.contains(&(challenge.clone(), evaluator.clone())),
            history: registry.histories.get(evaluator).copied().unwrap_or_default(),
        }
    }

    fn bump_history(&self, evaluator: &AccountId, completed: bool) {
        let history = {
            let mut registry = self.registry.lock();
            let h = registry.histories.entry(evaluator.clone()).or_default();
            if completed {
                h.completed += 1;
            } else {
                h.abandoned += 1;
            }
            *h
        };
        if let Err(e) = self.persist(&Record::History {
            evaluator_id: evaluator.clone(),
            history,
        }) {
            tracing::warn!(error = %e, "could not persist evaluator history");
        }
    }

    fn check_eligible(&self, hitl: &HitlConfig, challenge: &ChallengeId, evaluator: &AccountId) -> Result<(), ApiError> {
        if hitl.blocklist.contains(evaluator) {
            return Err(session_err("blocked", "evaluator is blocked for this challenge"));
        }
        if !hitl.whitelist.is_empty() && !hitl.whitelist.contains(evaluator) {
            return Err(session_err("blocked", "evaluator is not on the challenge whitelist"));
        }
        if !self.profile(challenge, evaluator).qualification_passed {
            return Err(session_err("not_qualified", "evaluator has not passed the qualification test"));
        }
        Ok(())
    }

    // ---- pairing ----

    /// Pairs an evaluator with a session, or reconnects them to one they hold.
    pub fn pair(&self, session_id: &SessionId, evaluator: &AccountId) -> Result<Pairing, ApiError> {
        self.sweep();
        let platform = self.platform()?;
        let actor_ref = self.actor(session_id)?;
        let mut actor = actor_ref.lock();
        let (config, hitl) = Self::hitl_config(&platform, &actor.session.challenge_id)?;
        self.check_eligible(&hitl, &actor.session.challenge_id, evaluator)?;
        let holder_matches = actor.session.evaluator_id.as_ref() == Some(evaluator);
        let fresh = match actor.session.state {
            SessionState::Open => true,
            SessionState::Interrupted | SessionState::Paired if holder_matches => false,
            SessionState::Interrupted | SessionState::Paired => {
                return Err(session_err("session_unavailable", "session is held by another evaluator"))
            }
            SessionState::Completed | SessionState::Expired => {
                return Err(session_err("session_unavailable", "session is closed"))
            }
        };
        if actor.agent.is_none() {
            let submission = platform.submission(&actor.session.submission_id)?;
            let mut agent = self
                .launcher(&platform)
                .launch(&submission, &config.evaluator.limits)
                .map_err(|e| session_err("staging_failed", e.to_string()))?;
            if !actor.session.transcript.is_empty() {
                agent
                    .restart(session_id, &actor.session.transcript)
                    .map_err(|e| agent_err(&e))?;
            }
            actor.agent = Some(agent);
        }
        let mut next = actor.session.clone();
        next.state = SessionState::Paired;
        next.evaluator_id = Some(evaluator.clone());
        next.last_activity = platform.now();
        self.persist_session(&next)?;
        actor.session = next;
        let connection = {
            let mut registry = self.registry.lock();
            registry.next_connection += 1;
            registry.next_connection
        };
        actor.connection = connection;
        let snapshot = snapshot_of(&actor.session, &hitl);
        Ok(Pairing {
            session_id: session_id.clone(),
            connection,
            frame: if fresh {
                ServerFrame::Instructions(snapshot)
            } else {
                ServerFrame::Replay(snapshot)
            },
        })
    }

    /// Pairs the evaluator with a session: one they were interrupted in, or
    /// else the oldest open session they are eligible for.
    pub fn claim(&self, evaluator: &AccountId) -> Result<Pairing, ApiError> {
        self.sweep();
        let platform = self.platform()?;
        let mut held = Vec::new();
        let mut open = Vec::new();
        for actor in self.registry.lock().sessions.values() {
            let a = actor.lock();
            match a.session.state {
                SessionState::Paired | SessionState::Interrupted if a.session.evaluator_id.as_ref() == Some(evaluator) => {
                    held.push((a.session.last_activity, a.session.session_id.clone()))
                }
                SessionState::Open => open.push((
                    (a.session.opened_at, a.seq),
                    a.session.session_id.clone(),
                    a.session.challenge_id.clone(),
                )),
                _ => {}
            }
        }
        held.sort();
        if let Some((_, id)) = held.pop() {
            return self.pair(&id, evaluator);
        }
        open.sort();
        let mut refusal = None;
        for (_, id, challenge) in open {
            let eligible = Self::hitl_config(&platform, &challenge)
                .and_then(|(_, hitl)| self.check_eligible(&hitl, &challenge, evaluator));
            if let Err(e) = eligible {
                refusal.get_or_insert(e);
                continue;
            }
            match self.pair(&id, evaluator) {
                Ok(p) => return Ok(p),
                Err(ApiError::Session { code: "session_unavailable", .. }) => continue,
                Err(e) => return Err(e),
            }
        }
        Err(refusal.unwrap_or_else(|| ApiError::NotFound("open session".into())))
    }

    /// Marks a channel as gone; the session waits for the evaluator to return.
    pub fn disconnect(&self, session_id: &SessionId, connection: u64) {
        let Ok(actor_ref) = self.actor(session_id) else { return };
        let mut actor = actor_ref.lock();
        if actor.session.state != SessionState::Paired || actor.connection != connection {
            return;
        }
        let mut next = actor.session.clone();
        next.state = SessionState::Interrupted;
        if let Ok(p) = self.platform() {
            next.last_activity = p.now();
        }
        if let Err(e) = self.persist_session(&next) {
            tracing::warn!(session = %session_id, error = %e, "could not persist disconnect");
        }
        actor.session = next;
    }

    // ---- session operations ----

    fn held<'s>(actor: &'s mut SessionActor, who: &Actor<'_>) -> Result<&'s mut SessionActor, ApiError> {
        let session = &actor.session;
        if session.state != SessionState::Paired || session.evaluator_id.as_ref() != Some(who.evaluator) {
            return Err(session_err("session_not_paired", "session is not paired with this evaluator"));
        }
        if who.connection.is_some_and(|c| c != actor.connection) {
            return Err(session_err("superseded", "session was taken over by a newer connection"));
        }
        Ok(actor)
    }

    /// Forwards the evaluator's message to the agent and returns its reply.
    /// Both messages are persisted before the reply is returned.
    pub fn relay(&self, session_id: &SessionId, who: &Actor<'_>, body: &str) -> Result<AgentReply, ApiError> {
        let platform = self.platform()?;
        let actor_ref = self.actor(session_id)?;
        let mut guard = actor_ref.lock();
        let actor = Self::held(&mut guard, who)?;
        if actor.session.round_count >= actor.session.rounds_required {
            return Err(session_err("rounds_exhausted", "all rounds have been exchanged"));
        }
        let round = actor.session.round_count + 1;
        let sent_at = platform.now();
        let reply = match actor.agent.as_mut() {
            Some(agent) => agent.respond(session_id, round, body),
            None => Err(AgentError::AgentCrashed {
                stderr: "agent instance is not running".into(),
            }),
        };
        let reply = match reply {
            Ok(r) => r,
            Err(e) => {
                tracing::warn!(session = %session_id, round, error = %e, "agent failed mid-round");
                let mut next = actor.session.clone();
                next.state = SessionState::Interrupted;
                next.last_activity = platform.now();
                let restarted = actor
                    .agent
                    .as_mut()
                    .map(|a| a.restart(session_id, &next.transcript));
                if !matches!(restarted, Some(Ok(()))) {
                    if let Some(mut a) = actor.agent.take() {
                        a.shutdown();
                    }
                }
                self.persist_session(&next)?;
                actor.session = next;
                return Err(agent_err(&e));
            }
        };
        let now = platform.now();
        let mut next = actor.session.clone();
        next.transcript.push(Message {
            sender: Sender::Evaluator,
            round,
            body: body.to_owned(),
            sent_at,
        });
        next.transcript.push(Message {
            sender: Sender::Agent,
            round,
            body: reply.clone(),
            sent_at: now,
        });
        next.round_count = round;
        next.last_activity = now;
        self.persist_session(&next)?;
        actor.session = next;
        Ok(AgentReply {
            round,
            body: reply,
            rounds_remaining: actor.session.rounds_required - round,
        })
    }

    /// Records one rating; re-rating the same axis and round overwrites.
    pub fn rate(&self, session_id: &SessionId, who: &Actor<'_>, axis: &str, round: u32, value: i32) -> Result<Ack, ApiError> {
        let platform = self.platform()?;
        let actor_ref = self.actor(session_id)?;
        let mut guard = actor_ref.lock();
        let actor = Self::held(&mut guard, who)?;
        let (_, hitl) = Self::hitl_config(&platform, &actor.session.challenge_id)?;
        if !hitl.rating_axes.iter().any(|a| a == axis) {
            return Err(session_err("unknown_axis", format!("{axis:?} is not a rating axis")));
        }
        if round == 0 || round > actor.session.round_count {
            return Err(session_err(
                "round_not_reached",
                format!("round {round} has not been exchanged (round count {})", actor.session.round_count),
            ));
        }
        if !hitl.rating_scale.contains(value) {
            return Err(session_err(
                "out_of_scale",
                format!("{value} is outside {}..={}", hitl.rating_scale.min, hitl.rating_scale.max),
            ));
        }
        let mut next = actor.session.clone();
        next.ratings.entry(axis.to_owned()).or_default().insert(round, value);
        next.last_activity = platform.now();
        self.persist_session(&next)?;
        actor.session = next;
        Ok(Ack::Rate {
            axis: axis.to_owned(),
            round,
            value,
        })
    }

    /// Approves a finished, fully rated session. Closed sessions report
    /// their recorded outcome again.
    pub fn finalize(&self, session_id: &SessionId, who: &Actor<'_>) -> Result<SessionOutcome, ApiError> {
        let platform = self.platform()?;
        let actor_ref = self.actor(session_id)?;
        let submission_id = {
            let mut guard = actor_ref.lock();
            let owned = guard.session.evaluator_id.as_ref() == Some(who.evaluator);
            match (guard.session.state, guard.session.outcome) {
                (SessionState::Completed | SessionState::Expired, Some(outcome)) if owned => return Ok(outcome),
                _ => {}
            }
            let actor = Self::held(&mut guard, who)?;
            let (_, hitl) = Self::hitl_config(&platform, &actor.session.challenge_id)?;
            let s = &actor.session;
            if s.round_count < s.rounds_required || !s.fully_rated(&hitl.rating_axes) {
                return Err(session_err(
                    "session_incomplete",
                    format!("{} of {} rounds exchanged; every round needs a rating on every axis", s.round_count, s.rounds_required),
                ));
            }
            let mut next = actor.session.clone();
            next.state = SessionState::Completed;
            next.outcome = Some(SessionOutcome::Approved);
            next.last_activity = platform.now();
            self.persist_session(&next)?;
            actor.session = next;
            if let Some(mut a) = actor.agent.take() {
                a.shutdown();
            }
            actor.session.submission_id.clone()
        };
        self.bump_history(who.evaluator, true);
        self.publish_if_complete(&platform, &submission_id)?;
        Ok(SessionOutcome::Approved)
    }

    /// Gives up a session; it is rejected and its slot reopened.
    pub fn abandon(&self, session_id: &SessionId, who: &Actor<'_>) -> Result<SessionOutcome, ApiError> {
        let actor_ref = self.actor(session_id)?;
        {
            let a = actor_ref.lock();
            let owned = a.session.evaluator_id.as_ref() == Some(who.evaluator);
            if !owned || !matches!(a.session.state, SessionState::Paired | SessionState::Interrupted) {
                return Err(session_err("session_not_paired", "session is not held by this evaluator"));
            }
        }
        self.expire(&actor_ref)?;
        Ok(SessionOutcome::Rejected)
    }

    /// Expires paired or interrupted sessions idle past their ttl, opening
    /// one replacement for each. Returns the expired session ids.
    pub fn sweep(&self) -> Vec<SessionId> {
        let Ok(platform) = self.platform() else { return Vec::new() };
        let now = platform.now();
        let actors: Vec<ActorRef> = self.registry.lock().sessions.values().cloned().collect();
        let mut expired = Vec::new();
        for actor_ref in actors {
            let stale = {
                let a = actor_ref.lock();
                matches!(a.session.state, SessionState::Paired | SessionState::Interrupted)
                    && now - a.session.last_activity >= chrono::Duration::seconds(a.session.ttl_secs as i64)
            };
            if stale {
                match self.expire(&actor_ref) {
                    Ok(Some(id)) => expired.push(id),
                    Ok(None) => {}
                    Err(e) => tracing::warn!(error = %e, "could not expire session"),
                }
            }
        }
        expired
    }

    /// Rejects a session and opens its replacement. Only the caller that
    /// performs the transition opens the replacement.
    fn expire(&self, actor_ref: &ActorRef) -> Result<Option<SessionId>, ApiError> {
        let platform = self.platform()?;
        let (old, evaluator) = {
            let mut actor = actor_ref.lock();
            if !matches!(actor.session.state, SessionState::Paired | SessionState::Interrupted) {
                return Ok(None);
            }
            let mut next = actor.session.clone();
            next.state = SessionState::Expired;
            next.outcome = Some(SessionOutcome::Rejected);
            self.persist_session(&next)?;
            actor.session = next;
            if let Some(mut a) = actor.agent.take() {
                a.shutdown();
            }
            (actor.session.clone(), actor.session.evaluator_id.clone())
        };
        if let Some(e) = &evaluator {
            self.bump_history(e, false);
        }
        let submission = platform.submission(&old.submission_id)?;
        if submission.status.is_terminal() {
            return Ok(Some(old.session_id));
        }
        let config = platform.challenge(&old.challenge_id)?;
        let agent = match self.launcher(&platform).launch(&submission, &config.evaluator.limits) {
            Ok(a) => Some(a),
            Err(e) => {
                tracing::warn!(submission = %submission.id, error = %e, "replacement agent not started; will launch on pairing");
                None
            }
        };
        let replacement = self.insert_session(&platform, &submission, &config, old.slot, Some(old.session_id.clone()), agent)?;
        let mut actor = actor_ref.lock();
        let mut next = actor.session.clone();
        next.replaced_by = Some(replacement.session_id.clone());
        self.persist_session(&next)?;
        actor.session = next;
        Ok(Some(old.session_id))
    }

    /// Writes the aggregate ratings once every slot has a completed session.
    fn publish_if_complete(&self, platform: &Platform, submission_id: &SubmissionId) -> Result<(), ApiError> {
        let sessions = self.sessions_of(submission_id);
        let slots: BTreeSet<u32> = sessions.iter().map(|s| s.slot).collect();
        let completed: BTreeSet<u32> = sessions
            .iter()
            .filter(|s| s.state == SessionState::Completed)
            .map(|s| s.slot)
            .collect();
        if slots.is_empty() || completed != slots {
            return Ok(());
        }
        let submission = platform.submission(submission_id)?;
        if submission.status != SubmissionStatus::Running {
            return Ok(());
        }
        let config = platform.challenge(&submission.challenge_id)?;
        let aggregate = aggregate(&sessions);
        let results: SplitMetrics = config
            .splits_for_phase(&submission.phase_codename)
            .into_iter()
            .map(|(_, split)| (split.codename.clone(), aggregate.clone()))
            .collect();
        platform.finish_submission(submission_id, &results)?;
        Ok(())
    }

    // ---- reads ----

    /// Sessions of a submission in opening order.
    pub fn sessions_of(&self, submission: &SubmissionId) -> Vec<HitlSession> {
        let actors: Vec<ActorRef> = {
            let registry = self.registry.lock();
            registry
                .by_submission
                .get(submission)
                .map(|ids| ids.iter().filter_map(|id| registry.sessions.get(id).cloned()).collect())
                .unwrap_or_default()
        };
        actors.iter().map(|a| a.lock().session.clone()).collect()
    }

    pub fn session(&self, session_id: &SessionId) -> Result<HitlSession, ApiError> {
        Ok(self.actor(session_id)?.lock().session.clone())
    }

    /// The evaluator's view of a session they hold.
    pub fn snapshot(&self, session_id: &SessionId, evaluator: &AccountId) -> Result<SessionSnapshot, ApiError> {
        let platform = self.platform()?;
        let session = self.session(session_id)?;
        if session.evaluator_id.as_ref() != Some(evaluator) {
            return Err(ApiError::Unauthorized("session belongs to another evaluator".into()));
        }
        let (_, hitl) = Self::hitl_config(&platform, &session.challenge_id)?;
        Ok(snapshot_of(&session, &hitl))
    }

    /// Host report of every session of a submission.
    pub fn report(&self, submission_id: &SubmissionId, caller: &Principal) -> Result<HitlReport, ApiError> {
        let platform = self.platform()?;
        let submission = platform.submission(submission_id)?;
        platform.require_host(caller, &submission.challenge_id)?;
        let sessions = self.sessions_of(submission_id);
        Ok(HitlReport {
            submission_id: submission_id.clone(),
            completed_sessions: sessions.iter().filter(|s| s.state == SessionState::Completed).count() as u32,
            aggregate: aggregate(&sessions),
            sessions,
        })
    }

    /// Stops every running agent instance.
    pub fn shutdown(&self) {
        let actors: Vec<ActorRef> = self.registry.lock().sessions.values().cloned().collect();
        for a in actors {
            if let Some(mut agent) = a.lock().agent.take() {
                agent.shutdown();
            }
        }
    }
}

fn snapshot_of(session: &HitlSession, hitl: &HitlConfig) -> SessionSnapshot {
    SessionSnapshot {
        session_id: session.session_id.clone(),
        state: session.state,
        instructions_html: hitl.instructions_html.clone(),
        rating_axes: hitl.rating_axes.clone(),
        rating_scale: hitl.rating_scale,
        rounds_required: session.rounds_required,
        round_count: session.round_count,
        transcript: session.transcript.clone(),
        ratings: session
            .ratings
            .iter()
            .flat_map(|(axis, rounds)| {
                rounds.iter().map(|(&round, &value)| Rating {
                    axis: axis.clone(),
                    round,
                    value,
                })
            })
            .collect(),
    }
}

/// Per-axis mean, over completed sessions, of each session's axis mean.
pub fn aggregate(sessions: &[HitlSession]) -> BTreeMap<String, f64> {
    let completed: Vec<BTreeMap<String, f64>> = sessions
        .iter()
        .filter(|s| s.state == SessionState::Completed)
        .map(HitlSession::axis_means)
        .collect();
    let mut sums: BTreeMap<String, (f64, u32)> = BTreeMap::new();
    for means in &completed {
        for (axis, m) in means {
            let e = sums.entry(axis.clone()).or_default();
            e.0 += m;
            e.1 += 1;
        }
    }
    sums.into_iter().map(|(axis, (sum, n))| (axis, sum / n as f64)).collect()
}
