use std::sync::Arc;

use serde_json::json;

use super::*;
use crate::blob::{BlobKind, MemoryBlobStore};
use crate::fixtures::{self, BundleBuilder};

fn worker_for(builder: &BundleBuilder, parallelism: usize) -> (WorkerState, MemoryBlobStore) {
    let blobs = MemoryBlobStore::new();
    let config = fixtures::install(&builder.build(), &blobs);
    let settings = WorkerConfig {
        parallelism,
        ..WorkerConfig::default()
    };
    let mut state = WorkerState::new(WorkerId::new("w1"), Arc::new(config), settings).unwrap();
    state.warmup(&blobs).unwrap();
    (state, blobs)
}

fn schema() -> Vec<String> {
    vec!["accuracy".into()]
}

#[test]
fn warm_start_stages_each_asset_once() {
    let builder = BundleBuilder::predictions("c1").file("evaluator/vocab.txt", "a b c", false);
    let mut manifest = builder.manifest.clone();
    manifest["evaluator"]["warmup_assets"] = json!(["evaluator/vocab.txt"]);
    let builder = BundleBuilder { manifest, ..builder };
    let (mut state, blobs) = worker_for(&builder, 2);
    let predictions = fixtures::temp_file(b"[0,1,2,3,4,5,6,7,8,9]");
    for _ in 0..5 {
        state.warmup(&blobs).unwrap();
        let r = state
            .evaluate_predictions(predictions.path(), "test-dev", &CancelToken::new())
            .unwrap();
        assert_eq!(r["test"].metrics["accuracy"], 1.0);
    }
    assert_eq!(state.load_counts().len(), 3, "code, warm-up asset and annotations");
    assert!(state.load_counts().values().all(|&n| n == 1), "{:?}", state.load_counts());
    assert!(state.code_dir().join("evaluator/vocab.txt").is_file());
}

#[test]
fn warmup_reports_missing_assets() {
    let builder = BundleBuilder::predictions("c1");
    let blobs = MemoryBlobStore::new();
    let config = fixtures::install(&builder.build(), &blobs);
    let empty = MemoryBlobStore::new();
    // Keep everything but the annotations.
    for info in blobs.list() {
        if info.kind != BlobKind::Annotation {
            empty.put(info.kind, blobs.get(&info.blob).unwrap().to_vec()).unwrap();
        }
    }
    let annotation = config.splits[0].annotation_ref.clone().unwrap();
    let mut state = WorkerState::new(WorkerId::new("w"), Arc::new(config), WorkerConfig::default()).unwrap();
    assert_eq!(state.warmup(&empty).err(), Some(WarmupError::AssetUnavailable(annotation)));
    assert!(!state.is_warmed());
}

#[test]
fn warmup_rejects_a_missing_entrypoint() {
    let blobs = MemoryBlobStore::new();
    let mut config = fixtures::install(&BundleBuilder::predictions("c1").build(), &blobs);
    config.evaluator.entrypoint = "evaluator/missing.py".into();
    let mut state = WorkerState::new(WorkerId::new("w"), Arc::new(config), WorkerConfig::default()).unwrap();
    assert!(matches!(state.warmup(&blobs), Err(WarmupError::EntrypointInvalid(_))));
}

#[test]
fn perfect_predictions_score_one_on_any_chunk() {
    let (state, _) = worker_for(&BundleBuilder::predictions("c1"), 1);
    let predictions = fixtures::temp_file(b"[0,1,2,3,4,5,6,7,8,9]");
    for chunk in plan_chunks(10, 3) {
        let r = state
            .evaluate_chunk(predictions.path(), chunk, "test-dev", "test", None)
            .unwrap();
        assert_eq!(r.metrics["accuracy"], 1.0);
        assert_eq!(r.item_count, chunk.len());
    }
}

#[test]
fn chunked_accuracy_matches_serial_oracle() {
    let labels: Vec<u32> = (0..100).collect();
    let builder = BundleBuilder::predictions_with_labels("c1", &[("test", labels.clone())]);
    let predictions: Vec<u32> = labels.iter().map(|&l| if l % 100 < 37 { l } else { l + 1000 }).collect();
    let predictions = fixtures::temp_file(&serde_json::to_vec(&predictions).unwrap());
    let (chunked, _) = worker_for(&builder, 4);
    let (serial, _) = worker_for(&builder, 1);
    let cancel = CancelToken::new();
    let a = chunked.evaluate_items(predictions.path(), 100, "test-dev", "test", &schema(), &cancel).unwrap();
    let b = serial.evaluate_items(predictions.path(), 100, "test-dev", "test", &schema(), &cancel).unwrap();
    assert_eq!(a.metrics["accuracy"], 0.37);
    assert_eq!(a.metrics["accuracy"].to_bits(), b.metrics["accuracy"].to_bits());
    assert_eq!(a.item_count, 100);
}

#[test]
fn crashing_evaluator_reports_stderr() {
    let builder = BundleBuilder::predictions("c1").evaluator_script(fixtures::CRASHING_EVALUATOR);
    let (state, _) = worker_for(&builder, 2);
    let predictions = fixtures::temp_file(b"[]");
    match state.evaluate_predictions(predictions.path(), "test-dev", &CancelToken::new()) {
        Err(EvalError::Crashed { stderr, .. }) => assert!(stderr.contains("evaluator exploded"), "{stderr}"),
        other => panic!("expected crash, got {other:?}"),
    }
}

#[test]
fn garbage_output_is_a_protocol_error() {
    let builder = BundleBuilder::predictions("c1").evaluator_script(fixtures::GARBAGE_EVALUATOR);
    let (state, _) = worker_for(&builder, 1);
    let predictions = fixtures::temp_file(b"[]");
    let err = state.evaluate_chunk(predictions.path(), Chunk::whole(10), "test-dev", "test", None);
    assert!(matches!(err, Err(EvalError::Protocol(_))), "{err:?}");
}

#[test]
fn missing_schema_metric_is_a_schema_mismatch() {
    let script = "#!/bin/sh\nprintf '{\"result\":{\"f1\":1.0},\"item_count\":%d}' $(( $6 - $5 ))\n";
    let builder = BundleBuilder::predictions("c1").evaluator_script(script);
    let (state, _) = worker_for(&builder, 2);
    let predictions = fixtures::temp_file(b"[]");
    let err = state.evaluate_predictions(predictions.path(), "test-dev", &CancelToken::new());
    assert!(matches!(err, Err(EvalError::SchemaMismatch(_))), "{err:?}");
}

#[test]
fn output_limit_is_passed_and_enforced() {
    let script = "#!/bin/sh\necho \"$EVAL_OUTPUT_LIMIT_BYTES\" >&2\nhead -c 5000 /dev/zero | tr '\\0' x\n";
    let builder = BundleBuilder::predictions("c1").evaluator_script(script);
    let (mut state, _) = worker_for(&builder, 1);
    state.settings.output_limit = 1000;
    let predictions = fixtures::temp_file(b"[]");
    let err = state.evaluate_chunk(predictions.path(), Chunk::whole(10), "test-dev", "test", None);
    assert_eq!(err, Err(EvalError::Protocol("stdout exceeds 1000 bytes".into())));
}

#[test]
fn wall_clock_ceiling_times_out() {
    let mut builder = BundleBuilder::predictions("c1").evaluator_script("#!/bin/sh\nsleep 30\n");
    builder.manifest["evaluator"]["limits"] = json!({"wall_seconds": 1});
    let (state, _) = worker_for(&builder, 1);
    let predictions = fixtures::temp_file(b"[]");
    let start = std::time::Instant::now();
    let err = state.evaluate_chunk(predictions.path(), Chunk::whole(10), "test-dev", "test", None);
    assert_eq!(err, Err(EvalError::Timeout));
    assert!(start.elapsed() < std::time::Duration::from_secs(10));
}

#[test]
fn cpu_ceiling_times_out() {
    let mut builder = BundleBuilder::predictions("c1").evaluator_script("#!/bin/sh\nwhile :; do :; done\n");
    builder.manifest["evaluator"]["limits"] = json!({"cpu_seconds": 1, "wall_seconds": 30});
    let (state, _) = worker_for(&builder, 1);
    let predictions = fixtures::temp_file(b"[]");
    let err = state.evaluate_chunk(predictions.path(), Chunk::whole(10), "test-dev", "test", None);
    assert_eq!(err, Err(EvalError::Timeout));
}

#[test]
fn memory_ceiling_is_enforced() {
    let script = "#!/usr/bin/env python3\nblob = bytearray(512 * 1024 * 1024)\nprint('{\"result\":{\"accuracy\":1},\"item_count\":10}')\n";
    let mut builder = BundleBuilder::predictions("c1").evaluator_script(script);
    builder.manifest["evaluator"]["limits"] = json!({"memory_bytes": 128 * 1024 * 1024});
    let (state, _) = worker_for(&builder, 1);
    let predictions = fixtures::temp_file(b"[]");
    let err = state.evaluate_chunk(predictions.path(), Chunk::whole(10), "test-dev", "test", None);
    match err {
        Err(EvalError::Crashed { stderr, .. }) => assert!(stderr.contains("MemoryError"), "{stderr}"),
        other => panic!("expected crash, got {other:?}"),
    }
}

#[test]
fn evaluator_cannot_reach_host_files() {
    let secret = fixtures::temp_file(b"host-secret-value");
    let script = format!(
        "#!/bin/sh\ncat {} 2>/dev/null\nprintf '{{\"result\":{{\"accuracy\":1}},\"item_count\":%d}}' $(( $6 - $5 ))\n",
        secret.path().display()
    );
    let builder = BundleBuilder::predictions("c1").evaluator_script(&script);
    let (state, _) = worker_for(&builder, 1);
    if state.settings().isolation != crate::sandbox::Isolation::Confined {
        panic!("confined isolation unavailable");
    }
    let predictions = fixtures::temp_file(b"[]");
    let r = state.evaluate_chunk(predictions.path(), Chunk::whole(10), "test-dev", "test", None);
    assert!(r.is_ok(), "secret leaked into stdout: {r:?}");
}

mod run {
    use std::time::Duration;

    use super::*;
    use crate::api::{Platform, SubmissionKind, SubmissionStatus};
    use crate::fixtures::Harness;
    use crate::ids::ChallengeId;

    fn worker(h: &Harness, challenge: &str) -> WorkerState {
        let config = h.platform.challenge(&ChallengeId::new(challenge)).unwrap();
        WorkerState::new(WorkerId::new("w-run"), config, WorkerConfig { parallelism: 2, ..WorkerConfig::default() }).unwrap()
    }

    fn submit(platform: &Platform, challenge: &str, who: &crate::api::Principal, body: &[u8]) -> crate::ids::SubmissionId {
        platform
            .create_submission(&ChallengeId::new(challenge), "test-dev", who, SubmissionKind::Predictions, body.to_vec())
            .unwrap()
            .id
    }

    #[test]
    fn queued_submissions_finish_in_order() {
        let h = Harness::new();
        h.challenge(&BundleBuilder::predictions("c1"));
        let ids: Vec<_> = [&b"[0,1,2,3,4,5,6,7,8,9]"[..], b"[0,1,2,3,4,0,0,0,0,0]", b"[]"]
            .iter()
            .map(|body| submit(&h.platform, "c1", &h.alice, body))
            .collect();
        let mut state = worker(&h, "c1");
        let shutdown = Shutdown::new();
        for id in &ids {
            assert_eq!(process_next(&h.platform, &mut state, &shutdown), Outcome::Finished(id.clone()));
        }
        assert_eq!(process_next(&h.platform, &mut state, &shutdown), Outcome::Idle);
        let accuracy: Vec<f64> = ids
            .iter()
            .map(|id| h.platform.get_submission(id, &h.alice).unwrap().results["test"]["accuracy"])
            .collect();
        assert_eq!(accuracy, [1.0, 0.5, 0.0]);
        assert!(ids.iter().all(|id| h.platform.submission(id).unwrap().status == SubmissionStatus::Finished));
    }

    #[test]
    fn crashing_evaluator_fails_after_max_attempts() {
        let h = Harness::new();
        h.challenge(&BundleBuilder::predictions("c1").evaluator_script(fixtures::CRASHING_EVALUATOR));
        let id = submit(&h.platform, "c1", &h.alice, b"[]");
        let mut state = worker(&h, "c1");
        let shutdown = Shutdown::new();
        let max = h.broker.config().max_attempts;
        for _ in 1..max {
            assert_eq!(process_next(&h.platform, &mut state, &shutdown), Outcome::Retrying(id.clone()));
            assert_eq!(h.platform.submission(&id).unwrap().status, SubmissionStatus::Running);
        }
        assert_eq!(process_next(&h.platform, &mut state, &shutdown), Outcome::Failed(id.clone()));
        assert_eq!(process_next(&h.platform, &mut state, &shutdown), Outcome::Idle);
        let view = h.platform.get_submission(&id, &h.alice).unwrap();
        assert_eq!(view.status, SubmissionStatus::Failed);
        assert!(view.log_excerpt.unwrap().contains("evaluator exploded"));
        assert_eq!(h.platform.dead_letters(&ChallengeId::new("c1"), &h.host).unwrap().len(), 1);
    }

    const SLOW_EVALUATOR: &str = "#!/bin/sh\nsleep 2\nprintf '{\"result\":{\"accuracy\":1.0},\"item_count\":%d}\\n' $(( $6 - $5 ))\n";

    #[test]
    fn shutdown_mid_evaluation_leaves_the_message_for_redelivery() {
        let h = Harness::new();
        h.challenge(&BundleBuilder::predictions("c1").evaluator_script(SLOW_EVALUATOR));
        let id = submit(&h.platform, "c1", &h.alice, b"[]");
        let mut state = worker(&h, "c1");
        let shutdown = Shutdown::new();
        let outcome = std::thread::scope(|s| {
            let run = s.spawn(|| process_next(&h.platform, &mut state, &shutdown));
            std::thread::sleep(Duration::from_millis(300));
            shutdown.cancel();
            run.join().unwrap()
        });
        assert_eq!(outcome, Outcome::Interrupted(id.clone()));
        assert_eq!(h.platform.submission(&id).unwrap().status, SubmissionStatus::Running);

        let fresh = Shutdown::new();
        assert_eq!(process_next(&h.platform, &mut state, &fresh), Outcome::Idle, "still leased");
        h.advance(h.broker.config().visibility.num_seconds() + 1);
        assert_eq!(process_next(&h.platform, &mut state, &fresh), Outcome::Finished(id.clone()));
    }

    #[test]
    fn local_pool_evaluates_in_the_background() {
        let h = Harness::with(crate::api::PlatformSettings::default());
        h.challenge(&BundleBuilder::predictions("c1"));
        let id = submit(&h.platform, "c1", &h.alice, b"[0,1,2,3,4,5,6,7,8,9]");
        let deadline = std::time::Instant::now() + Duration::from_secs(30);
        while h.platform.submission(&id).unwrap().status != SubmissionStatus::Finished {
            assert!(std::time::Instant::now() < deadline, "pool never finished the submission");
            std::thread::sleep(Duration::from_millis(20));
        }
        h.platform.shutdown();
        let board = h.platform.leaderboard(&ChallengeId::new("c1"), "test-dev", "test", None).unwrap();
        assert_eq!(board.len(), 1);
    }

    #[test]
    fn hitl_submissions_are_handed_to_the_broker() {
        let h = Harness::with(crate::api::PlatformSettings {
            local_workers: 0,
            hitl: crate::hitl::HitlSettings {
                launcher: Some(Arc::new(crate::hitl::EchoLauncher)),
                ..Default::default()
            },
            ..Default::default()
        });
        h.challenge(&BundleBuilder::hitl("visdial", 10));
        let id = h
            .platform
            .create_submission(
                &ChallengeId::new("visdial"),
                "test-dev",
                &h.alice,
                SubmissionKind::Agent,
                fixtures::agent_bundle(fixtures::ECHO_AGENT, b""),
            )
            .unwrap()
            .id;
        let mut state = worker(&h, "visdial");
        assert_eq!(process_next(&h.platform, &mut state, &Shutdown::new()), Outcome::HandedOff(id.clone()));
        assert_eq!(h.platform.submission(&id).unwrap().status, SubmissionStatus::Running);
        assert_eq!(h.platform.hitl().sessions_of(&id).len(), 1);
        assert_eq!(process_next(&h.platform, &mut state, &Shutdown::new()), Outcome::Idle);
    }
}
