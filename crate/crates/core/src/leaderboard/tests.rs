use std::collections::BTreeMap;
use std::sync::Arc;

use chrono::Duration;
use proptest::prelude::*;
use serde_json::json;

use super::*;
use crate::blob::MemoryBlobStore;
use crate::clock::{Clock, ManualClock};
use crate::fixtures::{self, BundleBuilder};

fn board_for(builder: &BundleBuilder) -> (Leaderboard, Arc<ChallengeConfig>, ManualClock) {
    let config = Arc::new(fixtures::install(&builder.build(), &MemoryBlobStore::new()));
    let clock = ManualClock::epoch();
    let board = Leaderboard::new(Arc::new(clock.clone()));
    board.register_challenge(Arc::clone(&config));
    (board, config, clock)
}

fn vqa() -> (Leaderboard, Arc<ChallengeConfig>, ManualClock) {
    board_for(&BundleBuilder::vqa("vqa", false))
}

fn source(config: &ChallengeConfig, sub: &str, team: &str, minute: i64) -> ResultSource {
    ResultSource {
        challenge_id: config.id.clone(),
        submission_id: SubmissionId::new(sub),
        team_id: TeamId::new(team),
        phase_codename: "test-dev".into(),
        submitted_at: ManualClock::epoch().now() + Duration::minutes(minute),
    }
}

fn acc(v: f64) -> BTreeMap<String, f64> {
    BTreeMap::from([("accuracy".to_string(), v)])
}

fn board_values(board: &Leaderboard, config: &ChallengeConfig, split: &str) -> Vec<(String, f64)> {
    board
        .rank(&config.id, "test-dev", split, &Viewer::Host)
        .unwrap()
        .into_iter()
        .map(|r| (r.entry.team_id.to_string(), r.entry.metrics["accuracy"]))
        .collect()
}

#[test]
fn best_result_per_team_is_kept() {
    let (board, config, _) = vqa();
    board.record_result(&source(&config, "s1", "A", 0), "test-dev", &acc(0.5)).unwrap();
    board.record_result(&source(&config, "s2", "A", 1), "test-dev", &acc(0.4)).unwrap();
    let history = board.history(&config.id, "test-dev", "test-dev", &TeamId::new("A"));
    let best = history.iter().map(|e| e.metrics["accuracy"]).fold(f64::MIN, f64::max);
    assert_eq!(history.len(), 2);
    assert_eq!(board_values(&board, &config, "test-dev"), vec![("A".to_string(), best)]);
    assert_eq!(best, 0.5);
}

#[test]
fn duplicate_recording_changes_nothing() {
    let (board, config, clock) = vqa();
    let (first, fresh) = board.record_result(&source(&config, "s1", "A", 0), "test-dev", &acc(0.5)).unwrap();
    assert!(fresh);
    clock.advance(Duration::seconds(10));
    let (again, fresh) = board.record_result(&source(&config, "s1", "A", 0), "test-dev", &acc(0.9)).unwrap();
    assert!(!fresh);
    assert_eq!(first, again);
    assert_eq!(board.result_count(&config.id), 1);
    assert_eq!(board_values(&board, &config, "test-dev"), vec![("A".to_string(), 0.5)]);
}

#[test]
fn ranks_by_metric_then_submission_time() {
    let (board, config, _) = vqa();
    board.record_result(&source(&config, "sb", "B", 5), "test-dev", &acc(0.9)).unwrap();
    board.record_result(&source(&config, "sc", "C", 0), "test-dev", &acc(0.7)).unwrap();
    board.record_result(&source(&config, "sa", "A", 1), "test-dev", &acc(0.9)).unwrap();
    let ranked = board.rank(&config.id, "test-dev", "test-dev", &Viewer::Public).unwrap();
    let order: Vec<_> = ranked.iter().map(|r| (r.rank, r.entry.team_id.as_str())).collect();
    assert_eq!(order, vec![(1, "A"), (2, "B"), (3, "C")]);
}

#[test]
fn equal_submission_times_fall_back_to_team_id() {
    let (board, config, _) = vqa();
    board.record_result(&source(&config, "s2", "zeta", 0), "test-dev", &acc(0.9)).unwrap();
    board.record_result(&source(&config, "s1", "alpha", 0), "test-dev", &acc(0.9)).unwrap();
    let teams: Vec<_> = board_values(&board, &config, "test-dev").into_iter().map(|t| t.0).collect();
    assert_eq!(teams, ["alpha", "zeta"]);
}

#[test]
fn lower_is_better_metrics_rank_ascending() {
    let mut builder = BundleBuilder::vqa("err", false);
    builder.manifest["default_metric"] = json!("error");
    builder.manifest["metrics"] = json!({"error": {"higher_is_better": false}});
    for ps in builder.manifest["phase_splits"].as_array_mut().unwrap() {
        ps["leaderboard_schema"] = json!(["error"]);
    }
    let (board, config, _) = board_for(&builder);
    let err = |v: f64| BTreeMap::from([("error".to_string(), v)]);
    board.record_result(&source(&config, "s1", "A", 0), "test-dev", &err(0.3)).unwrap();
    board.record_result(&source(&config, "s2", "B", 0), "test-dev", &err(0.1)).unwrap();
    board.record_result(&source(&config, "s3", "A", 1), "test-dev", &err(0.2)).unwrap();
    let ranked = board.rank(&config.id, "test-dev", "test-dev", &Viewer::Host).unwrap();
    let got: Vec<_> = ranked.iter().map(|r| (r.entry.team_id.as_str(), r.entry.metrics["error"])).collect();
    assert_eq!(got, vec![("B", 0.1), ("A", 0.2)]);
}

#[test]
fn visibility_matrix() {
    let (board, config, _) = vqa();
    for split in ["test-dev", "test-challenge"] {
        board.record_result(&source(&config, "a1", "A", 0), split, &acc(0.8)).unwrap();
        board.record_result(&source(&config, "b1", "B", 0), split, &acc(0.6)).unwrap();
    }
    let id = &config.id;
    let count = |split: &str, viewer: &Viewer| board.rank(id, "test-dev", split, viewer).unwrap().len();
    let a = Viewer::Participant(TeamId::new("A"));
    assert_eq!(count("test-dev", &Viewer::Public), 2);
    assert_eq!(count("test-dev", &a), 2);
    assert_eq!(count("test-challenge", &Viewer::Public), 0);
    assert_eq!(count("test-challenge", &a), 0);
    assert_eq!(count("test-challenge", &Viewer::Host), 2);

    let mut builder = BundleBuilder::vqa("own", false);
    for ps in builder.manifest["phase_splits"].as_array_mut().unwrap() {
        ps["visibility"] = json!("owner_only");
    }
    let (board, config, _) = board_for(&builder);
    board.record_result(&source(&config, "a1", "A", 0), "test-dev", &acc(0.8)).unwrap();
    board.record_result(&source(&config, "b1", "B", 0), "test-dev", &acc(0.6)).unwrap();
    let own = board.rank(&config.id, "test-dev", "test-dev", &a).unwrap();
    assert_eq!(own.len(), 1);
    assert_eq!(own[0].entry.team_id.as_str(), "A");
    assert!(board.rank(&config.id, "test-dev", "test-dev", &Viewer::Public).unwrap().is_empty());
    assert_eq!(board.rank(&config.id, "test-dev", "test-dev", &Viewer::Host).unwrap().len(), 2);
}

#[test]
fn rejects_bad_metrics_and_unknown_boards() {
    let (board, config, _) = vqa();
    let src = source(&config, "s1", "A", 0);
    assert_eq!(
        board.record_result(&src, "test-dev", &BTreeMap::from([("f1".to_string(), 1.0)])),
        Err(LeaderboardError::SchemaMismatch("accuracy".into()))
    );
    assert_eq!(
        board.record_result(&src, "test-dev", &acc(f64::NAN)),
        Err(LeaderboardError::SchemaMismatch("accuracy".into()))
    );
    assert!(matches!(board.record_result(&src, "nope", &acc(0.1)), Err(LeaderboardError::NotFound { .. })));
    assert!(matches!(
        board.rank(&config.id, "test-dev", "nope", &Viewer::Host),
        Err(LeaderboardError::NotFound { .. })
    ));
    assert_eq!(board.result_count(&config.id), 0);
}

fn arb_results() -> impl Strategy<Value = Vec<(u8, u8, u8)>> {
    // (team, submission minute, accuracy in tenths)
    prop::collection::vec((0u8..5, 0u8..20, 0u8..=10), 1..30)
}

proptest! {
    #[test]
    fn board_is_independent_of_arrival_order(results in arb_results(), seed in any::<u64>()) {
        let record_all = |order: &[usize]| {
            let (board, config, _) = vqa();
            for &i in order {
                let (team, minute, tenths) = results[i];
                let src = source(&config, &format!("s{i}"), &format!("t{team}"), minute as i64);
                board.record_result(&src, "test-dev", &acc(tenths as f64 / 10.0)).unwrap();
            }
            board.rank(&config.id, "test-dev", "test-dev", &Viewer::Host).unwrap()
                .into_iter().map(|r| (r.rank, r.entry.team_id, r.entry.submission_id, r.entry.metrics)).collect::<Vec<_>>()
        };
        let forward: Vec<usize> = (0..results.len()).collect();
        let mut shuffled = forward.clone();
        let mut state = seed;
        for i in (1..shuffled.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (state >> 33) as usize % (i + 1));
        }
        prop_assert_eq!(record_all(&forward), record_all(&shuffled));

        // Oracle: best accuracy per team, earliest (minute, index) among equals.
        let mut best: BTreeMap<u8, (u8, u8, usize)> = BTreeMap::new();
        for (i, &(team, minute, tenths)) in results.iter().enumerate() {
            let cand = (tenths, minute, i);
            best.entry(team)
                .and_modify(|b| {
                    let better = cand.0 > b.0 || (cand.0 == b.0 && (cand.1, format!("s{}", cand.2)) < (b.1, format!("s{}", b.2)));
                    if better { *b = cand; }
                })
                .or_insert(cand);
        }
        let board = record_all(&forward);
        prop_assert_eq!(board.len(), best.len());
        for (_, team, sub, metrics) in &board {
            let t: u8 = team.as_str()[1..].parse().unwrap();
            let (tenths, _, i) = best[&t];
            prop_assert_eq!(sub.as_str(), format!("s{i}"));
            prop_assert_eq!(metrics["accuracy"], tenths as f64 / 10.0);
        }
    }

    #[test]
    fn a_teams_ranked_value_never_worsens(values in prop::collection::vec(0u8..=10, 1..20)) {
        let (board, config, _) = vqa();
        let mut last = f64::MIN;
        for (i, v) in values.iter().enumerate() {
            let src = source(&config, &format!("s{i:02}"), "A", i as i64);
            board.record_result(&src, "test-dev", &acc(*v as f64 / 10.0)).unwrap();
            let now = board_values(&board, &config, "test-dev")[0].1;
            prop_assert!(now >= last);
            last = now;
        }
    }
}
