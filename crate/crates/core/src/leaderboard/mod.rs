//! Per-(phase, split) leaderboards: idempotent result recording, best-per-team
//! ranking and visibility filtering.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::clock::{SharedClock, Timestamp};
use crate::ids::{ChallengeId, SubmissionId, TeamId};
use crate::model::{resolve_phase_split, ChallengeConfig, Visibility};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub challenge_id: ChallengeId,
    pub phase_codename: String,
    pub split_codename: String,
    #[serde(rename = "team", alias = "team_id")]
    pub team_id: TeamId,
    pub submission_id: SubmissionId,
    pub metrics: BTreeMap<String, f64>,
    /// When the submission was created; breaks ranking ties.
    pub submitted_at: Timestamp,
    pub recorded_at: Timestamp,
}

/// Who is looking at a board.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Viewer {
    Public,
    Participant(TeamId),
    Host,
}

impl Viewer {
    /// Whether this viewer may see `team`'s values on a split with `visibility`.
    pub fn can_see(&self, visibility: Visibility, team: &TeamId) -> bool {
        match (visibility, self) {
            (Visibility::Public, _) | (_, Viewer::Host) => true,
            (Visibility::OwnerOnly, Viewer::Participant(own)) => own == team,
            _ => false,
        }
    }
}

/// The submission a result belongs to.
#[derive(Debug, Clone)]
pub struct ResultSource {
    pub challenge_id: ChallengeId,
    pub submission_id: SubmissionId,
    pub team_id: TeamId,
    pub phase_codename: String,
    pub submitted_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LeaderboardError {
    #[error("result is missing schema metric {0:?}")]
    SchemaMismatch(String),
    #[error("unknown submission {0}")]
    UnknownSubmission(SubmissionId),
    #[error("no leaderboard for phase {phase:?} split {split:?}")]
    NotFound { phase: String, split: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedEntry {
    pub rank: usize,
    #[serde(flatten)]
    pub entry: LeaderboardEntry,
}

type BoardKey = (String, String);

struct ChallengeBoards {
    config: Arc<ChallengeConfig>,
    raw: BTreeMap<(SubmissionId, String), LeaderboardEntry>,
    best: BTreeMap<BoardKey, BTreeMap<TeamId, LeaderboardEntry>>,
}

pub struct Leaderboard {
    clock: SharedClock,
    boards: Mutex<HashMap<ChallengeId, ChallengeBoards>>,
}

impl Leaderboard {
    pub fn new(clock: SharedClock) -> Self {
        Self {
            clock,
            boards: Mutex::new(HashMap::new()),
        }
    }

    pub fn register_challenge(&self, config: Arc<ChallengeConfig>) {
        self.boards.lock().entry(config.id.clone()).or_insert_with(|| ChallengeBoards {
            config,
            raw: BTreeMap::new(),
            best: BTreeMap::new(),
        });
    }

    /// Records a submission's metrics on one split. The first recording for a
    /// (submission, split) is authoritative; repeats return it unchanged with
    /// `false`. The team's ranked entry moves only to a strictly better value,
    /// or an equal value from an earlier submission.
    pub fn record_result(
        &self,
        source: &ResultSource,
        split_codename: &str,
        metrics: &BTreeMap<String, f64>,
    ) -> Result<(LeaderboardEntry, bool), LeaderboardError> {
        let mut boards = self.boards.lock();
        let board = boards
            .get_mut(&source.challenge_id)
            .ok_or_else(|| LeaderboardError::UnknownSubmission(source.submission_id.clone()))?;
        let key = (source.submission_id.clone(), split_codename.to_owned());
        if let Some(existing) = board.raw.get(&key) {
            return Ok((existing.clone(), false));
        }
        let config = Arc::clone(&board.config);
        let ps = resolve_phase_split(&config, &source.phase_codename, split_codename).map_err(|_| {
            LeaderboardError::NotFound {
                phase: source.phase_codename.clone(),
                split: split_codename.to_owned(),
            }
        })?;
        for metric in &ps.leaderboard_schema {
            match metrics.get(metric) {
                Some(v) if v.is_finite() => {}
                _ => return Err(LeaderboardError::SchemaMismatch(metric.clone())),
            }
        }
        if let Some((name, _)) = metrics.iter().find(|(_, v)| !v.is_finite()) {
            return Err(LeaderboardError::SchemaMismatch(name.clone()));
        }
        let entry = LeaderboardEntry {
            challenge_id: source.challenge_id.clone(),
            phase_codename: source.phase_codename.clone(),
            split_codename: split_codename.to_owned(),
            team_id: source.team_id.clone(),
            submission_id: source.submission_id.clone(),
            metrics: metrics.clone(),
            submitted_at: source.submitted_at,
            recorded_at: self.clock.now(),
        };
        board.raw.insert(key, entry.clone());
        let metric = config.default_metric.as_str();
        let higher = config.higher_is_better(metric);
        let teams = board
            .best
            .entry((source.phase_codename.clone(), split_codename.to_owned()))
            .or_default();
        let replace = match teams.get(&entry.team_id) {
            None => true,
            Some(current) => compare(&entry, current, metric, higher) == Ordering::Less,
        };
        if replace {
            teams.insert(entry.team_id.clone(), entry.clone());
        }
        Ok((entry, true))
    }

    /// The ranked board for one phase-split as `viewer` may see it.
    pub fn rank(
        &self,
        challenge: &ChallengeId,
        phase_codename: &str,
        split_codename: &str,
        viewer: &Viewer,
    ) -> Result<Vec<RankedEntry>, LeaderboardError> {
        let not_found = || LeaderboardError::NotFound {
            phase: phase_codename.to_owned(),
            split: split_codename.to_owned(),
        };
        let boards = self.boards.lock();
        let board = boards.get(challenge).ok_or_else(not_found)?;
        let ps = resolve_phase_split(&board.config, phase_codename, split_codename).map_err(|_| not_found())?;
        let visibility = ps.leaderboard_visibility;
        let metric = board.config.default_metric.as_str();
        let higher = board.config.higher_is_better(metric);
        let mut entries: Vec<LeaderboardEntry> = board
            .best
            .get(&(phase_codename.to_owned(), split_codename.to_owned()))
            .map(|teams| {
                teams
                    .values()
                    .filter(|e| viewer.can_see(visibility, &e.team_id))
                    .cloned()
                    .collect()
            })
            .unwrap_or_default();
        entries.sort_by(|a, b| compare(a, b, metric, higher));
        Ok(entries
            .into_iter()
            .enumerate()
            .map(|(i, entry)| RankedEntry { rank: i + 1, entry })
            .collect())
    }

    /// Every recorded result of a submission, keyed by split codename.
    pub fn results_for(&self, challenge: &ChallengeId, submission: &SubmissionId) -> BTreeMap<String, LeaderboardEntry> {
        let boards = self.boards.lock();
        let Some(board) = boards.get(challenge) else {
            return BTreeMap::new();
        };
        board
            .raw
            .range((submission.clone(), String::new())..)
            .take_while(|((sub, _), _)| sub == submission)
            .map(|((_, split), e)| (split.clone(), e.clone()))
            .collect()
    }

    /// Raw results of a team on one phase-split, oldest submission first.
    pub fn history(&self, challenge: &ChallengeId, phase: &str, split: &str, team: &TeamId) -> Vec<LeaderboardEntry> {
        let boards = self.boards.lock();
        let Some(board) = boards.get(challenge) else {
            return Vec::new();
        };
        let mut out: Vec<_> = board
            .raw
            .values()
            .filter(|e| e.phase_codename == phase && e.split_codename == split && &e.team_id == team)
            .cloned()
            .collect();
        out.sort_by(|a, b| (a.submitted_at, &a.submission_id).cmp(&(b.submitted_at, &b.submission_id)));
        out
    }

    /// Number of raw results recorded for a challenge.
    pub fn result_count(&self, challenge: &ChallengeId) -> usize {
        self.boards.lock().get(challenge).map_or(0, |b| b.raw.len())
    }
}

/// Board order: better default metric first, then earlier submission, then team id.
fn compare(a: &LeaderboardEntry, b: &LeaderboardEntry, metric: &str, higher_is_better: bool) -> Ordering {
    let (va, vb) = (a.metrics[metric], b.metrics[metric]);
    let by_value = if higher_is_better { vb.total_cmp(&va) } else { va.total_cmp(&vb) };
    by_value
        .then(a.submitted_at.cmp(&b.submitted_at))
        .then_with(|| a.team_id.cmp(&b.team_id))
        .then_with(|| a.submission_id.cmp(&b.submission_id))
}

#[cfg(test)]
mod tests;
