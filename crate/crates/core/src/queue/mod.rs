//! Embedded at-least-once message broker.
//!
//! Each challenge owns one queue addressed by its [`RoutingKey`]. Consumers
//! take time-limited [`Lease`]s on messages; a lease that lapses without an
//! ack makes the message leasable again with its attempt counter bumped.
//! Messages that run out of attempts move to the challenge's dead-letter
//! store. Ordering within a queue is not guaranteed.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::path::Path;
use std::sync::Arc;

use chrono::Duration;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{SharedClock, Timestamp};
use crate::ids::{ChallengeId, MessageId, SubmissionId, WorkerId};
use crate::journal::{Journal, JournalError};
use crate::model::ChallengeConfig;

#[cfg(test)]
mod tests;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    Local,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RoutingKey {
    pub challenge_id: ChallengeId,
    pub pool: Pool,
}

impl RoutingKey {
    pub fn for_challenge(config: &ChallengeConfig) -> Self {
        Self {
            challenge_id: config.id.clone(),
            pool: if config.remote_evaluation { Pool::Remote } else { Pool::Local },
        }
    }
}

impl std::fmt::Display for RoutingKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let pool = match self.pool {
            Pool::Local => "local",
            Pool::Remote => "remote",
        };
        write!(f, "{}.{pool}", self.challenge_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueMessage {
    pub message_id: MessageId,
    pub routing_key: RoutingKey,
    pub submission_id: SubmissionId,
    pub enqueued_at: Timestamp,
    /// Delivery attempt this message is on; 1 for the first delivery.
    pub attempt: u32,
}

impl QueueMessage {
    pub fn new(routing_key: RoutingKey, submission_id: SubmissionId, enqueued_at: Timestamp) -> Self {
        Self {
            message_id: MessageId::generate(),
            routing_key,
            submission_id,
            enqueued_at,
            attempt: 1,
        }
    }
}

/// Exclusive claim on one delivery of a message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lease {
    pub message_id: MessageId,
    pub holder: WorkerId,
    pub attempt: u32,
    pub expires_at: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeadLetterReason {
    Rejected,
    AttemptsExhausted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeadLetter {
    pub message: QueueMessage,
    pub reason: DeadLetterReason,
    pub at: Timestamp,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QueueError {
    #[error("unknown route {0}")]
    UnknownRoute(RoutingKey),
    #[error("broker unavailable: {0}")]
    BrokerUnavailable(String),
    #[error("lease on {0} expired")]
    LeaseExpired(MessageId),
    #[error("lease on {0} not held by caller")]
    LeaseNotHeld(MessageId),
    #[error("visibility timeout must be positive")]
    InvalidVisibility,
}

impl From<JournalError> for QueueError {
    fn from(e: JournalError) -> Self {
        QueueError::BrokerUnavailable(e.to_string())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BrokerConfig {
    pub visibility: Duration,
    pub max_attempts: u32,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        Self {
            visibility: Duration::seconds(300),
            max_attempts: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RouteStats {
    pub ready: usize,
    pub leased: usize,
    pub acked: usize,
    pub dead: usize,
}

/// Journal record. Replaying every record in order rebuilds broker state.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Record {
    Declare { key: RoutingKey },
    Publish { message: QueueMessage },
    Leased { lease: Lease },
    Acked { message_id: MessageId },
    Requeued { message_id: MessageId, attempt: u32 },
    DeadLettered { message_id: MessageId, reason: DeadLetterReason, at: Timestamp },
}

const JOURNAL_NAME: &str = "gauntlet-broker";
const JOURNAL_VERSION: u32 = 1;

struct Entry {
    message: QueueMessage,
    lease: Option<Lease>,
}

#[derive(Default)]
struct Route {
    ready: VecDeque<MessageId>,
    leased: HashSet<MessageId>,
    acked: usize,
}

#[derive(Default)]
struct State {
    routes: BTreeMap<RoutingKey, Route>,
    entries: HashMap<MessageId, Entry>,
    seen: HashSet<MessageId>,
    dead: BTreeMap<ChallengeId, Vec<DeadLetter>>,
    closed: bool,
}

impl State {
    fn apply(&mut self, record: &Record) {
        match record {
            Record::Declare { key } => {
                self.routes.entry(key.clone()).or_default();
            }
            Record::Publish { message } => {
                self.seen.insert(message.message_id.clone());
                if let Some(route) = self.routes.get_mut(&message.routing_key) {
                    route.ready.push_back(message.message_id.clone());
                }
                self.entries.insert(
                    message.message_id.clone(),
                    Entry {
                        message: message.clone(),
                        lease: None,
                    },
                );
            }
            Record::Leased { lease } => {
                if let Some(entry) = self.entries.get_mut(&lease.message_id) {
                    let route = self.routes.get_mut(&entry.message.routing_key).expect("route of live entry");
                    route.ready.retain(|id| id != &lease.message_id);
                    route.leased.insert(lease.message_id.clone());
                    entry.message.attempt = lease.attempt;
                    entry.lease = Some(lease.clone());
                }
            }
            Record::Acked { message_id } => {
                if let Some(entry) = self.entries.remove(message_id) {
                    let route = self.routes.get_mut(&entry.message.routing_key).expect("route of live entry");
                    route.leased.remove(message_id);
                    route.ready.retain(|id| id != message_id);
                    route.acked += 1;
                }
            }
            Record::Requeued { message_id, attempt } => {
                if let Some(entry) = self.entries.get_mut(message_id) {
                    let route = self.routes.get_mut(&entry.message.routing_key).expect("route of live entry");
                    route.leased.remove(message_id);
                    if !route.ready.contains(message_id) {
                        route.ready.push_back(message_id.clone());
                    }
                    entry.lease = None;
                    entry.message.attempt = *attempt;
                }
            }
            Record::DeadLettered { message_id, reason, at } => {
                if let Some(entry) = self.entries.remove(message_id) {
                    let route = self.routes.get_mut(&entry.message.routing_key).expect("route of live entry");
                    route.leased.remove(message_id);
                    route.ready.retain(|id| id != message_id);
                    self.dead
                        .entry(entry.message.routing_key.challenge_id.clone())
                        .or_default()
                        .push(DeadLetter {
                            message: entry.message,
                            reason: *reason,
                            at: *at,
                        });
                }
            }
        }
    }
}

pub type DeadLetterHook = Arc<dyn Fn(&DeadLetter) + Send + Sync>;

pub struct Broker {
    state: Mutex<State>,
    journal: Option<Journal<Record>>,
    clock: SharedClock,
    config: BrokerConfig,
    hook: Mutex<Option<DeadLetterHook>>,
}

impl Broker {
    /// In-memory broker with no persistence.
    pub fn new(clock: SharedClock, config: BrokerConfig) -> Self {
        Self {
            state: Mutex::new(State::default()),
            journal: None,
            clock,
            config,
            hook: Mutex::new(None),
        }
    }

    /// Broker persisted to an append-only record log at `path`; existing
    /// records are replayed, so outstanding leases survive a restart.
    pub fn open(path: impl AsRef<Path>, clock: SharedClock, config: BrokerConfig) -> Result<Self, QueueError> {
        let (journal, records) = Journal::open(path, JOURNAL_NAME, JOURNAL_VERSION)?;
        let mut state = State::default();
        for record in &records {
            state.apply(record);
        }
        Ok(Self {
            state: Mutex::new(state),
            journal: Some(journal),
            clock,
            config,
            hook: Mutex::new(None),
        })
    }

    pub fn config(&self) -> BrokerConfig {
        self.config
    }

    /// Called (outside the broker lock) whenever a message is dead-lettered.
    pub fn set_dead_letter_hook(&self, hook: DeadLetterHook) {
        *self.hook.lock() = Some(hook);
    }

    /// Stops accepting operations; every later call fails with `BrokerUnavailable`.
    pub fn close(&self) {
        self.state.lock().closed = true;
    }

    fn commit(&self, state: &mut State, record: Record) -> Result<(), QueueError> {
        if let Some(journal) = &self.journal {
            journal.append(&record)?;
        }
        state.apply(&record);
        Ok(())
    }

    fn open_state(&self) -> Result<parking_lot::MutexGuard<'_, State>, QueueError> {
        let state = self.state.lock();
        if state.closed {
            return Err(QueueError::BrokerUnavailable("broker closed".into()));
        }
        Ok(state)
    }

    fn fire(&self, dead: Vec<DeadLetter>) {
        if dead.is_empty() {
            return;
        }
        let hook = self.hook.lock().clone();
        if let Some(hook) = hook {
            for d in &dead {
                hook(d);
            }
        }
    }

    pub fn declare(&self, key: RoutingKey) -> Result<(), QueueError> {
        let mut state = self.open_state()?;
        if state.routes.contains_key(&key) {
            return Ok(());
        }
        self.commit(&mut state, Record::Declare { key })
    }

    pub fn has_route(&self, key: &RoutingKey) -> bool {
        self.state.lock().routes.contains_key(key)
    }

    /// Enqueues `msg`. Publishing a message id the broker has already seen
    /// is a no-op.
    pub fn publish(&self, msg: QueueMessage) -> Result<(), QueueError> {
        let mut state = self.open_state()?;
        if !state.routes.contains_key(&msg.routing_key) {
            return Err(QueueError::UnknownRoute(msg.routing_key));
        }
        if state.seen.contains(&msg.message_id) {
            return Ok(());
        }
        self.commit(&mut state, Record::Publish { message: msg })
    }

    /// Moves lapsed leases on `key` back to ready (or to the dead-letter
    /// store once attempts are exhausted).
    fn reclaim(&self, state: &mut State, key: &RoutingKey, now: Timestamp) -> Result<Vec<DeadLetter>, QueueError> {
        let expired: Vec<(MessageId, u32)> = state.routes[key]
            .leased
            .iter()
            .filter_map(|id| {
                let entry = &state.entries[id];
                let lease = entry.lease.as_ref()?;
                (lease.expires_at <= now).then(|| (id.clone(), entry.message.attempt))
            })
            .collect();
        let mut dead = Vec::new();
        for (message_id, attempt) in expired {
            if attempt >= self.config.max_attempts {
                let message = state.entries[&message_id].message.clone();
                let reason = DeadLetterReason::AttemptsExhausted;
                self.commit(state, Record::DeadLettered { message_id, reason, at: now })?;
                dead.push(DeadLetter { message, reason, at: now });
            } else {
                self.commit(state, Record::Requeued { message_id, attempt: attempt + 1 })?;
            }
        }
        Ok(dead)
    }

    /// Reclaims lapsed leases on every route.
    pub fn reclaim_expired(&self) -> Result<(), QueueError> {
        let now = self.clock.now();
        let dead = {
            let mut state = self.open_state()?;
            let keys: Vec<RoutingKey> = state.routes.keys().cloned().collect();
            let mut dead = Vec::new();
            for key in keys {
                dead.extend(self.reclaim(&mut state, &key, now)?);
            }
            dead
        };
        self.fire(dead);
        Ok(())
    }

    /// Leases one ready message from `key`, if any.
    pub fn lease(
        &self,
        key: &RoutingKey,
        worker: &WorkerId,
        visibility: Duration,
    ) -> Result<Option<(QueueMessage, Lease)>, QueueError> {
        if visibility <= Duration::zero() {
            return Err(QueueError::InvalidVisibility);
        }
        let now = self.clock.now();
        let (granted, dead) = {
            let mut state = self.open_state()?;
            if !state.routes.contains_key(key) {
                return Err(QueueError::UnknownRoute(key.clone()));
            }
            let dead = self.reclaim(&mut state, key, now)?;
            let granted = match state.routes[key].ready.front().cloned() {
                Some(message_id) => {
                    let entry = &state.entries[&message_id];
                    let lease = Lease {
                        message_id,
                        holder: worker.clone(),
                        attempt: entry.message.attempt,
                        expires_at: now + visibility,
                    };
                    let message = entry.message.clone();
                    self.commit(&mut state, Record::Leased { lease: lease.clone() })?;
                    Some((message, lease))
                }
                None => None,
            };
            (granted, dead)
        };
        self.fire(dead);
        Ok(granted)
    }

    fn check_lease(&self, state: &State, lease: &Lease, now: Timestamp) -> Result<(), QueueError> {
        let entry = state
            .entries
            .get(&lease.message_id)
            .ok_or_else(|| QueueError::LeaseNotHeld(lease.message_id.clone()))?;
        match &entry.lease {
            Some(current) if current == lease => {
                if current.expires_at <= now {
                    Err(QueueError::LeaseExpired(lease.message_id.clone()))
                } else {
                    Ok(())
                }
            }
            _ if lease.expires_at <= now => Err(QueueError::LeaseExpired(lease.message_id.clone())),
            _ => Err(QueueError::LeaseNotHeld(lease.message_id.clone())),
        }
    }

    /// True while `lease` is the live, unexpired claim on its message.
    pub fn lease_valid(&self, lease: &Lease) -> bool {
        let state = self.state.lock();
        self.check_lease(&state, lease, self.clock.now()).is_ok()
    }

    /// Deletes the leased message permanently.
    pub fn ack(&self, lease: &Lease) -> Result<(), QueueError> {
        let now = self.clock.now();
        let mut state = self.open_state()?;
        self.check_lease(&state, lease, now)?;
        self.commit(
            &mut state,
            Record::Acked {
                message_id: lease.message_id.clone(),
            },
        )
    }

    /// Gives the delivery back. With `requeue`, the message is ready again at
    /// once on its next attempt; without, it stays invisible until the lease
    /// would have lapsed. Either way a message already on its final attempt
    /// goes to the dead-letter store.
    pub fn nack(&self, lease: &Lease, requeue: bool) -> Result<(), QueueError> {
        let now = self.clock.now();
        let dead = {
            let mut state = self.open_state()?;
            self.check_lease(&state, lease, now)?;
            let message = state.entries[&lease.message_id].message.clone();
            if message.attempt >= self.config.max_attempts {
                let reason = if requeue {
                    DeadLetterReason::AttemptsExhausted
                } else {
                    DeadLetterReason::Rejected
                };
                self.commit(
                    &mut state,
                    Record::DeadLettered {
                        message_id: lease.message_id.clone(),
                        reason,
                        at: now,
                    },
                )?;
                vec![DeadLetter { message, reason, at: now }]
            } else {
                if requeue {
                    self.commit(
                        &mut state,
                        Record::Requeued {
                            message_id: lease.message_id.clone(),
                            attempt: message.attempt + 1,
                        },
                    )?;
                }
                Vec::new()
            }
        };
        self.fire(dead);
        Ok(())
    }

    pub fn dead_letters(&self, challenge: &ChallengeId) -> Vec<DeadLetter> {
        self.state.lock().dead.get(challenge).cloned().unwrap_or_default()
    }

    /// Messages on `key` that are ready or leased.
    pub fn depth(&self, key: &RoutingKey) -> usize {
        let state = self.state.lock();
        state.routes.get(key).map_or(0, |r| r.ready.len() + r.leased.len())
    }

    pub fn stats(&self, key: &RoutingKey) -> RouteStats {
        let state = self.state.lock();
        let dead = state
            .dead
            .get(&key.challenge_id)
            .map_or(0, |d| d.iter().filter(|d| &d.message.routing_key == key).count());
        state.routes.get(key).map_or_else(RouteStats::default, |r| RouteStats {
            ready: r.ready.len(),
            leased: r.leased.len(),
            acked: r.acked,
            dead,
        })
    }
}
