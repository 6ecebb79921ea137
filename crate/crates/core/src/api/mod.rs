//! The platform service: accounts and tokens, challenge registration, the
//! submission lifecycle and the read paths behind the REST API.

mod error;
mod types;

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Weak};
use std::thread::JoinHandle;

use chrono::{Days, NaiveDate};
use parking_lot::Mutex;

pub use error::ApiError;
pub use types::*;

use crate::blob::{BlobKind, BlobRef, SharedBlobStore};
use crate::clock::{SharedClock, Timestamp};
use crate::ids::{AccountId, ChallengeId, SubmissionId, TeamId, WorkerId};
use crate::leaderboard::{Leaderboard, LeaderboardError, RankedEntry, ResultSource, Viewer};
use crate::model::{parse_bundle, BundleError, ChallengeConfig};
use crate::queue::{Broker, DeadLetter, QueueError, QueueMessage, RoutingKey};
use crate::sandbox::CancelToken;
use crate::worker::WorkerConfig;

pub const DEFAULT_ARTIFACT_LIMIT: u64 = 5 * 1024 * 1024 * 1024;
const LOG_EXCERPT_BYTES: usize = 4096;

/// Per-split metrics, keyed by split codename.
pub type SplitMetrics = BTreeMap<String, BTreeMap<String, f64>>;

#[derive(Clone)]
pub struct PlatformSettings {
    pub artifact_limit_bytes: u64,
    /// Local worker threads started per locally evaluated challenge.
    pub local_workers: usize,
    pub worker: WorkerConfig,
    pub hitl: crate::hitl::HitlSettings,
}

impl Default for PlatformSettings {
    fn default() -> Self {
        Self {
            artifact_limit_bytes: DEFAULT_ARTIFACT_LIMIT,
            local_workers: 1,
            worker: WorkerConfig::default(),
            hitl: crate::hitl::HitlSettings::default(),
        }
    }
}

struct ChallengeRecord {
    config: Arc<ChallengeConfig>,
    host_team: TeamId,
}

#[derive(Default)]
struct State {
    teams: BTreeMap<TeamId, Team>,
    account_teams: BTreeMap<AccountId, TeamId>,
    tokens: HashMap<String, Principal>,
    challenges: BTreeMap<ChallengeId, ChallengeRecord>,
    submissions: BTreeMap<SubmissionId, Submission>,
    daily_counts: HashMap<(ChallengeId, String, TeamId, NaiveDate), u32>,
}

pub struct Platform {
    clock: SharedClock,
    blobs: SharedBlobStore,
    broker: Arc<Broker>,
    leaderboard: Leaderboard,
    settings: PlatformSettings,
    state: Mutex<State>,
    pub(crate) remote: crate::remote::RemoteRegistry,
    pub(crate) hitl: crate::hitl::HitlBroker,
    pools: Mutex<Vec<JoinHandle<()>>>,
    shutdown: CancelToken,
}

impl Platform {
    pub fn new(clock: SharedClock, blobs: SharedBlobStore, broker: Arc<Broker>, settings: PlatformSettings) -> Arc<Self> {
        let platform = Arc::new_cyclic(|weak: &Weak<Platform>| Platform {
            leaderboard: Leaderboard::new(Arc::clone(&clock)),
            remote: crate::remote::RemoteRegistry::default(),
            hitl: crate::hitl::HitlBroker::new(weak.clone(), settings.hitl.clone()),
            clock,
            blobs,
            broker: Arc::clone(&broker),
            settings,
            state: Mutex::new(State::default()),
            pools: Mutex::new(Vec::new()),
            shutdown: CancelToken::new(),
        });
        let weak = Arc::downgrade(&platform);
        broker.set_dead_letter_hook(Arc::new(move |dead: &DeadLetter| {
            if let Some(platform) = weak.upgrade() {
                platform.on_dead_letter(dead);
            }
        }));
        platform
    }

    pub fn clock(&self) -> &SharedClock {
        &self.clock
    }

    pub fn blobs(&self) -> &SharedBlobStore {
        &self.blobs
    }

    pub fn broker(&self) -> &Arc<Broker> {
        &self.broker
    }

    pub fn leaderboard_store(&self) -> &Leaderboard {
        &self.leaderboard
    }

    pub fn settings(&self) -> &PlatformSettings {
        &self.settings
    }

    pub fn hitl(&self) -> &crate::hitl::HitlBroker {
        &self.hitl
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    // ---- accounts and tokens ----

    pub fn create_team(&self, id: TeamId, name: &str) -> Result<Team, ApiError> {
        let mut state = self.state.lock();
        if state.teams.contains_key(&id) {
            return Err(ApiError::Conflict(format!("team {id}")));
        }
        let team = Team {
            id: id.clone(),
            name: name.to_owned(),
            members: Default::default(),
        };
        state.teams.insert(id, team.clone());
        Ok(team)
    }

    /// Creates an account on `team` and returns its API token.
    pub fn create_account(&self, account: AccountId, team: &TeamId) -> Result<String, ApiError> {
        let token = new_token();
        let mut state = self.state.lock();
        if state.account_teams.contains_key(&account) {
            return Err(ApiError::Conflict(format!("account {account}")));
        }
        let entry = state
            .teams
            .get_mut(team)
            .ok_or_else(|| ApiError::NotFound(format!("team {team}")))?;
        entry.members.insert(account.clone());
        state.account_teams.insert(account.clone(), team.clone());
        state.tokens.insert(token.clone(), Principal::User(account));
        Ok(token)
    }

    /// Issues an additional token for an existing principal.
    pub fn issue_token(&self, principal: Principal) -> String {
        let token = new_token();
        self.state.lock().tokens.insert(token.clone(), principal);
        token
    }

    /// Registers a caller-chosen token, as a deployment bootstrap does.
    pub fn adopt_token(&self, token: &str, principal: Principal) -> Result<(), ApiError> {
        if token.len() < 16 {
            return Err(ApiError::BadRequest("tokens must be at least 16 characters".into()));
        }
        let mut state = self.state.lock();
        if state.tokens.contains_key(token) {
            return Err(ApiError::Conflict("token".into()));
        }
        state.tokens.insert(token.to_owned(), principal);
        Ok(())
    }

    pub fn revoke_token(&self, token: &str) -> bool {
        self.state.lock().tokens.remove(token).is_some()
    }

    pub fn authenticate(&self, token: &str) -> Result<Principal, ApiError> {
        self.state.lock().tokens.get(token).cloned().ok_or(ApiError::Unauthenticated)
    }

    pub fn team_of(&self, account: &AccountId) -> Option<TeamId> {
        self.state.lock().account_teams.get(account).cloned()
    }

    pub fn teams(&self) -> Vec<Team> {
        self.state.lock().teams.values().cloned().collect()
    }

    // ---- challenges ----

    /// Registers a challenge from a competition bundle uploaded by a host.
    pub fn create_challenge(self: &Arc<Self>, bundle: &[u8], caller: &Principal) -> Result<Arc<ChallengeConfig>, ApiError> {
        let Principal::User(account) = caller else {
            return Err(ApiError::Unauthorized("only team members can create challenges".into()));
        };
        let host_team = self
            .team_of(account)
            .ok_or_else(|| ApiError::Unauthorized("account has no team".into()))?;
        if bundle.len() as u64 > self.settings.artifact_limit_bytes {
            return Err(ApiError::PayloadTooLarge {
                size: bundle.len() as u64,
                limit: self.settings.artifact_limit_bytes,
            });
        }
        let parsed = parse_bundle(bundle).map_err(|e| match e {
            BundleError::SchemaError { violations } => ApiError::ValidationFailed(violations),
            other => ApiError::InvalidBundle(other.to_string()),
        })?;
        let config = Arc::new(parsed.config);
        if self.state.lock().challenges.contains_key(&config.id) {
            return Err(ApiError::Conflict(format!("challenge {}", config.id)));
        }
        for staged in parsed.blobs.into_values() {
            self.blobs
                .put(staged.kind, staged.data)
                .map_err(|e| ApiError::Unavailable(e.to_string()))?;
        }
        self.blobs
            .put(BlobKind::Bundle, bundle.to_vec())
            .map_err(|e| ApiError::Unavailable(e.to_string()))?;
        let key = RoutingKey::for_challenge(&config);
        self.broker.declare(key).map_err(queue_error)?;
        {
            let mut state = self.state.lock();
            if state.challenges.contains_key(&config.id) {
                return Err(ApiError::Conflict(format!("challenge {}", config.id)));
            }
            state.challenges.insert(
                config.id.clone(),
                ChallengeRecord {
                    config: Arc::clone(&config),
                    host_team,
                },
            );
        }
        self.leaderboard.register_challenge(Arc::clone(&config));
        if !config.remote_evaluation {
            self.start_local_pool(&config);
        }
        tracing::info!(challenge = %config.id, remote = config.remote_evaluation, "challenge created");
        Ok(config)
    }

    pub fn challenge(&self, id: &ChallengeId) -> Result<Arc<ChallengeConfig>, ApiError> {
        self.state
            .lock()
            .challenges
            .get(id)
            .map(|r| Arc::clone(&r.config))
            .ok_or_else(|| ApiError::NotFound(format!("challenge {id}")))
    }

    pub fn challenge_ids(&self) -> Vec<ChallengeId> {
        self.state.lock().challenges.keys().cloned().collect()
    }

    pub fn challenge_view(&self, id: &ChallengeId) -> Result<ChallengeView, ApiError> {
        let state = self.state.lock();
        let record = state
            .challenges
            .get(id)
            .ok_or_else(|| ApiError::NotFound(format!("challenge {id}")))?;
        Ok(ChallengeView::new(&record.config, record.host_team.clone()))
    }

    pub fn host_team(&self, id: &ChallengeId) -> Result<TeamId, ApiError> {
        self.state
            .lock()
            .challenges
            .get(id)
            .map(|r| r.host_team.clone())
            .ok_or_else(|| ApiError::NotFound(format!("challenge {id}")))
    }

    /// The caller's role on a challenge, if it is a user.
    pub fn role(&self, caller: &Principal, challenge: &ChallengeId) -> Option<ChallengeRole> {
        let state = self.state.lock();
        role_in(&state, caller, challenge)
    }

    pub fn require_host(&self, caller: &Principal, challenge: &ChallengeId) -> Result<(), ApiError> {
        self.challenge(challenge)?;
        match caller {
            Principal::System => Ok(()),
            _ if self.role(caller, challenge) == Some(ChallengeRole::Host) => Ok(()),
            _ => Err(ApiError::Unauthorized("host access required".into())),
        }
    }

    pub fn dead_letters(&self, challenge: &ChallengeId, caller: &Principal) -> Result<Vec<DeadLetter>, ApiError> {
        self.require_host(caller, challenge)?;
        Ok(self.broker.dead_letters(challenge))
    }

    // ---- submissions ----

    /// Accepts a submission, stores its artifact and queues it for evaluation.
    pub fn create_submission(
        &self,
        challenge: &ChallengeId,
        phase_codename: &str,
        caller: &Principal,
        kind: SubmissionKind,
        artifact: Vec<u8>,
    ) -> Result<Submission, ApiError> {
        let Principal::User(account) = caller else {
            return Err(ApiError::Unauthorized("only participants can submit".into()));
        };
        let config = self.challenge(challenge)?;
        let team = self
            .team_of(account)
            .ok_or_else(|| ApiError::Unauthorized("account has no team".into()))?;
        if self.host_team(challenge)? == team {
            return Err(ApiError::Unauthorized("host teams cannot submit to their own challenge".into()));
        }
        let phase = config
            .phase_by_codename(phase_codename)
            .ok_or_else(|| ApiError::NotFound(format!("phase {phase_codename}")))?;
        let now = self.clock.now();
        if !phase.is_open_at(now) {
            return Err(ApiError::PhaseClosed(phase_codename.to_owned()));
        }
        let expected = SubmissionKind::for_evaluator(config.evaluator.kind);
        if kind != expected {
            return Err(ApiError::BadRequest(format!(
                "this challenge accepts {expected:?} submissions, not {kind:?}"
            )));
        }
        let size = artifact.len() as u64;
        if size > self.settings.artifact_limit_bytes {
            return Err(ApiError::PayloadTooLarge {
                size,
                limit: self.settings.artifact_limit_bytes,
            });
        }
        // Cheap pre-check so rejected submissions do not store blobs.
        let day = now.date_naive();
        let count_key = (challenge.clone(), phase.codename.clone(), team.clone(), day);
        let limit = phase.submission_limit_per_day;
        let reset_at = next_utc_midnight(day);
        if self.state.lock().daily_counts.get(&count_key).copied().unwrap_or(0) >= limit {
            return Err(ApiError::RateLimited { reset_at });
        }
        let (artifact_ref, agent) = match kind {
            SubmissionKind::Predictions => (self.put_blob(BlobKind::SubmissionArtifact, artifact)?, None),
            SubmissionKind::Agent => {
                let split = crate::agent::split_agent_bundle(&artifact)
                    .map_err(|e| ApiError::BadRequest(format!("agent bundle: {e}")))?;
                let image_ref = self.put_blob(BlobKind::AgentImage, split.image)?;
                let snapshot_ref = self.put_blob(BlobKind::AgentSnapshot, split.snapshot)?;
                (image_ref.clone(), Some(AgentRefs { image_ref, snapshot_ref }))
            }
        };
        let submission = Submission {
            id: SubmissionId::generate(),
            challenge_id: challenge.clone(),
            team_id: team,
            phase_codename: phase.codename.clone(),
            kind,
            artifact_ref,
            agent,
            status: SubmissionStatus::Submitted,
            created_at: now,
            status_history: vec![StatusChange {
                status: SubmissionStatus::Submitted,
                at: now,
            }],
            logs_ref: None,
        };
        {
            let mut state = self.state.lock();
            let count = state.daily_counts.entry(count_key.clone()).or_default();
            if *count >= limit {
                return Err(ApiError::RateLimited { reset_at });
            }
            *count += 1;
            state.submissions.insert(submission.id.clone(), submission.clone());
        }
        let msg = QueueMessage::new(RoutingKey::for_challenge(&config), submission.id.clone(), now);
        if let Err(e) = self.broker.publish(msg) {
            let mut state = self.state.lock();
            state.submissions.remove(&submission.id);
            if let Some(count) = state.daily_counts.get_mut(&count_key) {
                *count = count.saturating_sub(1);
            }
            return Err(queue_error(e));
        }
        let queued = self.apply_transition(&submission.id, SubmissionStatus::Queued)?;
        tracing::info!(submission = %queued.id, challenge = %challenge, "submission queued");
        Ok(queued)
    }

    fn put_blob(&self, kind: BlobKind, data: Vec<u8>) -> Result<BlobRef, ApiError> {
        self.blobs.put(kind, data).map_err(|e| ApiError::Unavailable(e.to_string()))
    }

    /// The stored submission, without access checks.
    pub fn submission(&self, id: &SubmissionId) -> Result<Submission, ApiError> {
        self.state
            .lock()
            .submissions
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("submission {id}")))
    }

    /// Submissions of one challenge the caller may see, oldest first.
    pub fn list_submissions(&self, challenge: &ChallengeId, caller: &Principal) -> Result<Vec<SubmissionView>, ApiError> {
        self.challenge(challenge)?;
        let ids: Vec<SubmissionId> = {
            let state = self.state.lock();
            let mut subs: Vec<&Submission> = state
                .submissions
                .values()
                .filter(|s| &s.challenge_id == challenge && may_view(&state, caller, s))
                .collect();
            subs.sort_by(|a, b| (a.created_at, &a.id).cmp(&(b.created_at, &b.id)));
            subs.into_iter().map(|s| s.id.clone()).collect()
        };
        ids.iter().map(|id| self.get_submission(id, caller)).collect()
    }

    /// A submission as the caller may see it.
    pub fn get_submission(&self, id: &SubmissionId, caller: &Principal) -> Result<SubmissionView, ApiError> {
        let (submission, config, viewer) = {
            let state = self.state.lock();
            let submission = state
                .submissions
                .get(id)
                .cloned()
                .ok_or_else(|| ApiError::NotFound(format!("submission {id}")))?;
            if !may_view(&state, caller, &submission) {
                return Err(ApiError::Unauthorized("not your submission".into()));
            }
            let config = Arc::clone(&state.challenges[&submission.challenge_id].config);
            let viewer = viewer_in(&state, Some(caller), &submission.challenge_id);
            (submission, config, viewer)
        };
        let results = self
            .leaderboard
            .results_for(&submission.challenge_id, &submission.id)
            .into_iter()
            .filter(|(split, entry)| {
                let vis = split_visibility(&config, &submission.phase_codename, split);
                viewer.can_see(vis, &entry.team_id)
            })
            .map(|(split, entry)| (split, entry.metrics))
            .collect();
        let log_excerpt = match (&submission.logs_ref, submission.status) {
            (Some(logs), SubmissionStatus::Failed | SubmissionStatus::Finished) => self.blobs.get(logs).ok().map(|data| {
                let text = String::from_utf8_lossy(&data);
                text.chars().take(LOG_EXCERPT_BYTES).collect()
            }),
            _ => None,
        };
        Ok(SubmissionView {
            id: submission.id,
            challenge_id: submission.challenge_id,
            team_id: submission.team_id,
            phase: submission.phase_codename,
            kind: submission.kind,
            status: submission.status,
            created_at: submission.created_at,
            status_history: submission.status_history,
            results,
            log_excerpt,
        })
    }

    /// A status change requested by a worker or host.
    pub fn transition_submission(
        &self,
        id: &SubmissionId,
        to: SubmissionStatus,
        caller: &Principal,
    ) -> Result<Submission, ApiError> {
        let submission = self.submission(id)?;
        let allowed = match caller {
            Principal::System => true,
            Principal::Worker { challenge_id, .. } => challenge_id == &submission.challenge_id,
            Principal::User(_) => self.role(caller, &submission.challenge_id) == Some(ChallengeRole::Host),
        };
        if !allowed {
            return Err(ApiError::Unauthorized("only workers and hosts change submission status".into()));
        }
        self.apply_transition(id, to)
    }

    /// Compare-and-set on the status machine.
    pub(crate) fn apply_transition(&self, id: &SubmissionId, to: SubmissionStatus) -> Result<Submission, ApiError> {
        let now = self.clock.now();
        let mut state = self.state.lock();
        let submission = state
            .submissions
            .get_mut(id)
            .ok_or_else(|| ApiError::NotFound(format!("submission {id}")))?;
        if !submission.status.can_become(to) {
            return Err(ApiError::IllegalTransition {
                from: submission.status.to_string(),
                to: to.to_string(),
            });
        }
        submission.status = to;
        submission.status_history.push(StatusChange { status: to, at: now });
        Ok(submission.clone())
    }

    /// Records per-split metrics for a running (or finished) submission.
    /// Every split of the phase must be present; nothing is written otherwise.
    pub fn record_results(&self, id: &SubmissionId, results: &SplitMetrics) -> Result<(), ApiError> {
        let submission = self.submission(id)?;
        if !matches!(submission.status, SubmissionStatus::Running | SubmissionStatus::Finished) {
            return Err(ApiError::IllegalTransition {
                from: submission.status.to_string(),
                to: "results recorded".into(),
            });
        }
        let config = self.challenge(&submission.challenge_id)?;
        for (ps, split) in config.splits_for_phase(&submission.phase_codename) {
            let metrics = results
                .get(&split.codename)
                .ok_or_else(|| ApiError::SchemaMismatch(format!("missing results for split {:?}", split.codename)))?;
            for metric in &ps.leaderboard_schema {
                match metrics.get(metric) {
                    Some(v) if v.is_finite() => {}
                    Some(_) => return Err(ApiError::SchemaMismatch(format!("metric {metric:?} is not finite"))),
                    None => {
                        return Err(ApiError::SchemaMismatch(format!(
                            "split {:?} is missing metric {metric:?}",
                            split.codename
                        )))
                    }
                }
            }
            if let Some((name, _)) = metrics.iter().find(|(_, v)| !v.is_finite()) {
                return Err(ApiError::SchemaMismatch(format!("metric {name:?} is not finite")));
            }
        }
        if let Some(extra) = results.keys().find(|k| {
            !config
                .splits_for_phase(&submission.phase_codename)
                .iter()
                .any(|(_, s)| &&s.codename == k)
        }) {
            return Err(ApiError::SchemaMismatch(format!("split {extra:?} is not part of this phase")));
        }
        let source = ResultSource {
            challenge_id: submission.challenge_id.clone(),
            submission_id: submission.id.clone(),
            team_id: submission.team_id.clone(),
            phase_codename: submission.phase_codename.clone(),
            submitted_at: submission.created_at,
        };
        for (split, metrics) in results {
            self.leaderboard
                .record_result(&source, split, metrics)
                .map_err(leaderboard_error)?;
        }
        Ok(())
    }

    /// Records results and moves the submission to Finished. Idempotent.
    pub fn finish_submission(&self, id: &SubmissionId, results: &SplitMetrics) -> Result<Submission, ApiError> {
        self.record_results(id, results)?;
        match self.apply_transition(id, SubmissionStatus::Finished) {
            Ok(s) => Ok(s),
            Err(ApiError::IllegalTransition { .. }) if self.submission(id)?.status == SubmissionStatus::Finished => {
                self.submission(id)
            }
            Err(e) => Err(e),
        }
    }

    /// Stores `log` and marks the submission Failed. Queued submissions pass
    /// through Running so the history stays on the status machine.
    pub fn fail_submission(&self, id: &SubmissionId, log: &str) -> Result<Submission, ApiError> {
        let logs_ref = self.put_blob(BlobKind::Log, log.as_bytes().to_vec())?;
        {
            let mut state = self.state.lock();
            if let Some(s) = state.submissions.get_mut(id) {
                s.logs_ref = Some(logs_ref);
            }
        }
        if self.submission(id)?.status == SubmissionStatus::Queued {
            self.apply_transition(id, SubmissionStatus::Running)?;
        }
        self.apply_transition(id, SubmissionStatus::Failed)
    }

    /// Attaches a log to a submission without changing its status.
    pub fn attach_log(&self, id: &SubmissionId, log: &str) -> Result<(), ApiError> {
        let logs_ref = self.put_blob(BlobKind::Log, log.as_bytes().to_vec())?;
        let mut state = self.state.lock();
        let s = state
            .submissions
            .get_mut(id)
            .ok_or_else(|| ApiError::NotFound(format!("submission {id}")))?;
        s.logs_ref = Some(logs_ref);
        Ok(())
    }

    fn on_dead_letter(&self, dead: &DeadLetter) {
        let id = &dead.message.submission_id;
        let Ok(submission) = self.submission(id) else { return };
        if submission.status.is_terminal() {
            return;
        }
        let log = format!(
            "evaluation abandoned after {} delivery attempt(s): {:?}",
            dead.message.attempt, dead.reason
        );
        if let Err(e) = self.fail_submission(id, &log) {
            tracing::warn!(submission = %id, error = %e, "could not fail dead-lettered submission");
        }
    }

    // ---- leaderboards ----

    /// The ranked board as `caller` (or an anonymous viewer) may see it.
    pub fn leaderboard(
        &self,
        challenge: &ChallengeId,
        phase: &str,
        split: &str,
        caller: Option<&Principal>,
    ) -> Result<Vec<RankedEntry>, ApiError> {
        self.challenge(challenge)?;
        let viewer = viewer_in(&self.state.lock(), caller, challenge);
        self.leaderboard
            .rank(challenge, phase, split, &viewer)
            .map_err(leaderboard_error)
    }

    pub fn viewer(&self, caller: Option<&Principal>, challenge: &ChallengeId) -> Viewer {
        viewer_in(&self.state.lock(), caller, challenge)
    }

    // ---- local worker pools ----

    fn start_local_pool(self: &Arc<Self>, config: &Arc<ChallengeConfig>) {
        let mut pools = self.pools.lock();
        for i in 0..self.settings.local_workers {
            let platform = Arc::clone(self);
            let config = Arc::clone(config);
            let worker_id = WorkerId::new(format!("{}-local-{i}", config.id));
            let handle = std::thread::Builder::new()
                .name(worker_id.to_string())
                .spawn(move || {
                    let settings = platform.settings.worker.clone();
                    let mut state = match crate::worker::WorkerState::new(worker_id, config, settings) {
                        Ok(s) => s,
                        Err(e) => {
                            tracing::error!(error = %e, "worker could not start");
                            return;
                        }
                    };
                    let shutdown = platform.shutdown.clone();
                    crate::worker::run_loop(&platform, &mut state, &shutdown, std::time::Duration::from_millis(50));
                })
                .expect("spawn worker thread");
            pools.push(handle);
        }
    }

    /// Stops local workers (in-flight leases are left to expire) and waits for them.
    pub fn shutdown(&self) {
        self.shutdown.cancel();
        let handles: Vec<_> = self.pools.lock().drain(..).collect();
        for h in handles {
            let _ = h.join();
        }
        self.hitl.shutdown();
    }
}

fn role_in(state: &State, caller: &Principal, challenge: &ChallengeId) -> Option<ChallengeRole> {
    let Principal::User(account) = caller else { return None };
    let team = state.account_teams.get(account)?;
    let record = state.challenges.get(challenge)?;
    Some(if &record.host_team == team {
        ChallengeRole::Host
    } else {
        ChallengeRole::Participant
    })
}

fn may_view(state: &State, caller: &Principal, submission: &Submission) -> bool {
    match caller {
        Principal::System => true,
        Principal::Worker { challenge_id, .. } => challenge_id == &submission.challenge_id,
        Principal::User(account) => match role_in(state, caller, &submission.challenge_id) {
            Some(ChallengeRole::Host) => true,
            Some(ChallengeRole::Participant) => state.account_teams.get(account) == Some(&submission.team_id),
            None => false,
        },
    }
}

fn viewer_in(state: &State, caller: Option<&Principal>, challenge: &ChallengeId) -> Viewer {
    match caller {
        Some(Principal::System) => Viewer::Host,
        Some(p @ Principal::User(account)) => match role_in(state, p, challenge) {
            Some(ChallengeRole::Host) => Viewer::Host,
            Some(ChallengeRole::Participant) => Viewer::Participant(state.account_teams[account].clone()),
            None => Viewer::Public,
        },
        _ => Viewer::Public,
    }
}

fn next_utc_midnight(day: NaiveDate) -> Timestamp {
    day.checked_add_days(Days::new(1))
        .expect("date in range")
        .and_hms_opt(0, 0, 0)
        .expect("midnight exists")
        .and_utc()
}

fn new_token() -> String {
    format!("gx_{}{}", uuid::Uuid::new_v4().simple(), uuid::Uuid::new_v4().simple())
}

pub(crate) fn queue_error(e: QueueError) -> ApiError {
    match e {
        QueueError::LeaseExpired(_) | QueueError::LeaseNotHeld(_) => ApiError::LeaseExpired,
        QueueError::UnknownRoute(r) => ApiError::NotFound(format!("route {r}")),
        other => ApiError::Unavailable(other.to_string()),
    }
}

pub(crate) fn leaderboard_error(e: LeaderboardError) -> ApiError {
    match e {
        LeaderboardError::SchemaMismatch(m) => ApiError::SchemaMismatch(format!("missing metric {m:?}")),
        LeaderboardError::UnknownSubmission(s) => ApiError::NotFound(format!("submission {s}")),
        LeaderboardError::NotFound { phase, split } => ApiError::NotFound(format!("leaderboard {phase}/{split}")),
    }
}
