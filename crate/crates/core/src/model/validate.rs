use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::types::*;

/// One broken config invariant, located by field path.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl Violation {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Returns every invariant violation, sorted by field path. An empty list
/// means the config is valid.
pub fn validate_config(config: &ChallengeConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut v = |path: String, message: String| out.push(Violation::new(path, message));

    if config.phases.is_empty() {
        v("phases".into(), "must be non-empty".into());
    }
    if config.splits.is_empty() {
        v("splits".into(), "must be non-empty".into());
    }

    let mut phase_ids = HashSet::new();
    let mut phase_codenames = HashSet::new();
    for (i, phase) in config.phases.iter().enumerate() {
        if !phase_ids.insert(phase.id.as_str()) {
            v(format!("phases[{i}].id"), format!("duplicate phase id {:?}", phase.id));
        }
        if !phase_codenames.insert(phase.codename.as_str()) {
            v(format!("phases[{i}].codename"), format!("duplicate phase codename {:?}", phase.codename));
        }
        if phase.end.is_some_and(|end| end < phase.start) {
            v(format!("phases[{i}].end"), "must not precede start".into());
        }
    }

    let mut split_ids = HashSet::new();
    let mut split_codenames = HashSet::new();
    let kind = config.evaluator.kind;
    for (i, split) in config.splits.iter().enumerate() {
        if !split_ids.insert(split.id.as_str()) {
            v(format!("splits[{i}].id"), format!("duplicate split id {:?}", split.id));
        }
        if !split_codenames.insert(split.codename.as_str()) {
            v(format!("splits[{i}].codename"), format!("duplicate split codename {:?}", split.codename));
        }
        match (config.remote_evaluation, split.annotation_ref.is_some()) {
            (true, true) => v(
                format!("splits[{i}].annotation_ref"),
                "must be absent for remotely evaluated challenges".into(),
            ),
            (false, false) if kind == EvaluatorKind::Predictions => v(
                format!("splits[{i}].annotation_ref"),
                "required for locally evaluated challenges".into(),
            ),
            _ => {}
        }
        match (&split.environment, kind) {
            (None, EvaluatorKind::Agent) if !config.remote_evaluation => v(
                format!("splits[{i}].environment"),
                "required for agent challenges".into(),
            ),
            (Some(env), _) => {
                if env.episodes.is_empty() {
                    v(format!("splits[{i}].environment.episodes"), "must be non-empty".into());
                }
                if env.action_vocabulary.is_empty() {
                    v(format!("splits[{i}].environment.action_vocabulary"), "must be non-empty".into());
                }
                if env.max_steps_per_episode == 0 {
                    v(format!("splits[{i}].environment.max_steps_per_episode"), "must be positive".into());
                }
            }
            _ => {}
        }
    }

    let mut pairs = HashSet::new();
    for (i, ps) in config.phase_splits.iter().enumerate() {
        if !phase_ids.contains(ps.phase_id.as_str()) {
            v(format!("phase_splits[{i}].phase_id"), format!("unknown phase id {:?}", ps.phase_id));
        }
        if !split_ids.contains(ps.split_id.as_str()) {
            v(format!("phase_splits[{i}].split_id"), format!("unknown split id {:?}", ps.split_id));
        }
        if !pairs.insert((ps.phase_id.as_str(), ps.split_id.as_str())) {
            v(
                format!("phase_splits[{i}]"),
                format!("duplicate pair ({:?}, {:?})", ps.phase_id, ps.split_id),
            );
        }
        if ps.leaderboard_schema.is_empty() {
            v(format!("phase_splits[{i}].leaderboard_schema"), "must be non-empty".into());
        } else if !ps.leaderboard_schema.contains(&config.default_metric) {
            v(
                format!("phase_splits[{i}].leaderboard_schema"),
                format!("default metric {:?} missing", config.default_metric),
            );
        }
    }

    if kind == EvaluatorKind::Hitl && config.hitl.is_none() {
        v("evaluator.kind".into(), "hitl evaluator requires a hitl section".into());
    }
    if let Some(hitl) = &config.hitl {
        let overlap: Vec<_> = hitl.whitelist.intersection(&hitl.blocklist).map(|a| a.as_str()).collect();
        if !overlap.is_empty() {
            v("hitl.whitelist".into(), format!("overlaps blocklist: {}", overlap.join(", ")));
        }
        if hitl.rating_axes.is_empty() {
            v("hitl.rating_axes".into(), "must be non-empty".into());
        }
        if hitl.rounds_required == 0 {
            v("hitl.rounds_required".into(), "must be positive".into());
        }
        if hitl.rating_scale.min > hitl.rating_scale.max {
            v("hitl.rating_scale".into(), "min exceeds max".into());
        }
    }

    out.sort();
    out
}

/// Informational findings that do not make a config invalid.
pub fn config_notices(config: &ChallengeConfig) -> Vec<Violation> {
    let mut by_split: BTreeMap<&str, Vec<Visibility>> = BTreeMap::new();
    for ps in &config.phase_splits {
        by_split.entry(&ps.split_id).or_default().push(ps.leaderboard_visibility);
    }
    by_split
        .into_iter()
        .filter(|(_, vis)| vis.iter().any(|v| *v != vis[0]))
        .map(|(split, _)| {
            Violation::new(
                format!("splits[{split}]"),
                "shared across phases with different leaderboard visibility",
            )
        })
        .collect()
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ResolveError {
    #[error("no phase-split ({phase:?}, {split:?})")]
    NotFound { phase: String, split: String },
    #[error("phase-split ({phase:?}, {split:?}) is ambiguous")]
    Ambiguous { phase: String, split: String },
}

/// Looks up the phase-split addressed by wire-level codenames.
pub fn resolve_phase_split<'a>(
    config: &'a ChallengeConfig,
    phase_codename: &str,
    split_codename: &str,
) -> Result<&'a PhaseSplit, ResolveError> {
    let not_found = || ResolveError::NotFound {
        phase: phase_codename.to_owned(),
        split: split_codename.to_owned(),
    };
    if phase_codename.is_empty() || split_codename.is_empty() {
        return Err(not_found());
    }
    let phase_ids: HashMap<&str, ()> = config
        .phases
        .iter()
        .filter(|p| p.codename == phase_codename)
        .map(|p| (p.id.as_str(), ()))
        .collect();
    let split_ids: HashMap<&str, ()> = config
        .splits
        .iter()
        .filter(|s| s.codename == split_codename)
        .map(|s| (s.id.as_str(), ()))
        .collect();
    let mut matches = config
        .phase_splits
        .iter()
        .filter(|ps| phase_ids.contains_key(ps.phase_id.as_str()) && split_ids.contains_key(ps.split_id.as_str()));
    match (matches.next(), matches.next()) {
        (Some(ps), None) => Ok(ps),
        (None, _) => Err(not_found()),
        (Some(_), Some(_)) => Err(ResolveError::Ambiguous {
            phase: phase_codename.to_owned(),
            split: split_codename.to_owned(),
        }),
    }
}
