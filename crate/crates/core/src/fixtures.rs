//! Bundle builders and evaluator/agent scripts shared by the test suites.
//!
//! Scripts assume `/bin/sh` and `python3` on the host.

use serde_json::{json, Value};

use crate::archive::zip_files;

/// Accuracy over `[start, end)` of predictions against a JSON list of labels.
/// Predictions are either a list or an object keyed by split codename.
pub const ACCURACY_EVALUATOR: &str = r#"#!/usr/bin/env python3
import json, sys
ann_path, sub_path, phase, split, start, end = sys.argv[1:7]
start, end = int(start), int(end)
with open(ann_path) as f:
    ann = json.load(f)
with open(sub_path) as f:
    sub = json.load(f)
preds = sub.get(split, []) if isinstance(sub, dict) else sub
n = end - start
correct = sum(1 for i in range(start, end) if i < len(preds) and preds[i] == ann[i])
print(json.dumps({"result": {"accuracy": correct / n if n else 0.0}, "item_count": n}))
"#;

/// Sleeps one millisecond per item, then reports accuracy 1.0.
pub const SLEEPY_EVALUATOR: &str = r#"#!/bin/sh
n=$(( $6 - $5 ))
sleep "$((n / 1000)).$(printf '%03d' $((n % 1000)))"
printf '{"result":{"accuracy":1.0},"item_count":%d}\n' "$n"
"#;

pub const CRASHING_EVALUATOR: &str = "#!/bin/sh\necho 'evaluator exploded: bad predictions' >&2\nexit 1\n";

pub const GARBAGE_EVALUATOR: &str = "#!/bin/sh\necho 'this is not json'\n";

/// Success rate over an episode results file (`[{"metrics": {"success": 0|1}}, ...]`).
pub const SUCCESS_RATE_EVALUATOR: &str = r#"#!/usr/bin/env python3
import json, sys
with open(sys.argv[2]) as f:
    episodes = json.load(f)
start, end = int(sys.argv[5]), int(sys.argv[6])
chosen = episodes[start:end]
n = len(chosen)
wins = sum(1 for e in chosen if e["metrics"].get("success", 0) >= 1)
print(json.dumps({"result": {"success": wins / n if n else 0.0}, "item_count": n}))
"#;

/// Question-answering environment: the answer for every episode is the
/// content of the assets file. `stop` with a matching answer is a success.
pub const ANSWER_ENVIRONMENT: &str = r#"#!/usr/bin/env python3
import json, sys
assets, episode = sys.argv[1], sys.argv[2]
with open(assets) as f:
    truth = f.read().strip()
def send(obj):
    sys.stdout.write(json.dumps(obj) + "\n")
    sys.stdout.flush()
send({"observation": {"episode": episode, "position": 0}})
position, answer, stopped = 0, None, False
for line in sys.stdin:
    msg = json.loads(line)
    if "finish" in msg:
        ok = stopped and answer == truth
        send({"outcome": {"answer": answer, "position": position}, "metrics": {"success": 1 if ok else 0}})
        break
    if msg["action"] == "stop":
        stopped, answer = True, msg.get("answer")
        send({"observation": {"position": position}, "done": True})
    else:
        position += 1
        send({"observation": {"position": position}, "done": False})
"#;

/// Agent that answers immediately with the answer baked into its snapshot.
pub const SNAPSHOT_AGENT: &str = r#"#!/usr/bin/env python3
import json, sys
with open(sys.argv[1]) as f:
    answer = f.read().strip()
for line in sys.stdin:
    sys.stdout.write(json.dumps({"action": "stop", "answer": answer}) + "\n")
    sys.stdout.flush()
"#;

/// Agent that never stops moving.
pub const LOOPING_AGENT: &str = r#"#!/usr/bin/env python3
import json, sys
for line in sys.stdin:
    sys.stdout.write(json.dumps({"action": "move-forward"}) + "\n")
    sys.stdout.flush()
"#;

/// Agent that replies with an action outside any sane vocabulary.
pub const FLYING_AGENT: &str = r#"#!/usr/bin/env python3
import json, sys
for line in sys.stdin:
    sys.stdout.write(json.dumps({"action": "fly"}) + "\n")
    sys.stdout.flush()
"#;

/// Agent that echoes each observation body back as its answer.
pub const ECHO_AGENT: &str = r#"#!/usr/bin/env python3
import json, sys
for line in sys.stdin:
    frame = json.loads(line)
    body = frame["observation"].get("body", "")
    sys.stdout.write(json.dumps({"action": "respond", "answer": body}) + "\n")
    sys.stdout.flush()
"#;

/// Agent that tries to read `path` and reports what it saw as its answer.
pub fn path_probe_agent(path: &str) -> String {
    format!(
        r#"#!/usr/bin/env python3
import json, os, sys
seen = []
for target in [{path:?}, "/proc/1/root" + {path:?}, "../" * 12 + {path:?}.lstrip("/")]:
    try:
        with open(target) as f:
            seen.append("READ:" + f.read())
    except Exception as e:
        seen.append("DENIED:" + type(e).__name__)
try:
    listing = sorted(os.listdir("/"))
except Exception:
    listing = []
for line in sys.stdin:
    sys.stdout.write(json.dumps({{"action": "stop", "answer": json.dumps({{"seen": seen, "root": listing}})}}) + "\n")
    sys.stdout.flush()
"#
    )
}

/// Agent that forks as many sleeping children as it can, then stops.
pub const FORK_STORM_AGENT: &str = r#"#!/usr/bin/env python3
import json, os, sys, time
forked = 0
for _ in range(500):
    try:
        pid = os.fork()
    except OSError:
        break
    if pid == 0:
        time.sleep(600)
        os._exit(0)
    forked += 1
for line in sys.stdin:
    sys.stdout.write(json.dumps({"action": "stop", "answer": str(forked)}) + "\n")
    sys.stdout.flush()
"#;

/// Agent that writes one enormous line.
pub const FLOODING_AGENT: &str = r#"#!/usr/bin/env python3
import sys
for line in sys.stdin:
    sys.stdout.write("x" * (8 * 1024 * 1024) + "\n")
    sys.stdout.flush()
"#;

/// Agent that burns CPU without ever answering.
pub const SPINNING_AGENT: &str = "#!/bin/sh\nwhile :; do :; done\n";

/// Agent bundle archive: `agent.json`, the entrypoint and a snapshot.
pub fn agent_bundle(entrypoint_script: &str, snapshot: &[u8]) -> Vec<u8> {
    let manifest = json!({"entrypoint": "agent.py", "schema_version": 1, "snapshot": "weights.bin"});
    let manifest = serde_json::to_vec(&manifest).unwrap();
    zip_files([
        ("agent.json", manifest.as_slice(), false),
        ("agent.py", entrypoint_script.as_bytes(), true),
        ("weights.bin", snapshot, false),
    ])
}

/// A challenge bundle assembled from a JSON manifest and named files.
#[derive(Debug, Clone)]
pub struct BundleBuilder {
    pub manifest: Value,
    pub files: Vec<(String, Vec<u8>, bool)>,
}

impl BundleBuilder {
    /// One phase (`test-dev`), one split (`test`, 10 items), accuracy evaluator.
    pub fn predictions(id: &str) -> Self {
        Self::predictions_with_labels(id, &[("test", (0..10).collect())])
    }

    /// Local predictions challenge with one split per `(codename, labels)`;
    /// every split is attached to a single public `test-dev` phase.
    pub fn predictions_with_labels(id: &str, splits: &[(&str, Vec<u32>)]) -> Self {
        let mut files = vec![("evaluator/main.py".to_owned(), ACCURACY_EVALUATOR.as_bytes().to_vec(), true)];
        let mut split_values = Vec::new();
        let mut phase_splits = Vec::new();
        for (codename, labels) in splits {
            let path = format!("annotations/{codename}.json");
            files.push((path.clone(), serde_json::to_vec(labels).unwrap(), false));
            split_values.push(json!({
                "id": codename, "name": codename, "item_count": labels.len(), "annotation_file": path
            }));
            phase_splits.push(json!({
                "phase": "dev", "split": codename, "visibility": "public", "leaderboard_schema": ["accuracy"]
            }));
        }
        let manifest = json!({
            "schema_version": 1,
            "id": id,
            "title": format!("Challenge {id}"),
            "description_html": "<p>Predict the labels.</p>",
            "default_metric": "accuracy",
            "phases": [{
                "id": "dev", "codename": "test-dev", "name": "Test-Dev",
                "start": "2000-01-01T00:00:00Z", "end": null, "submission_limit_per_day": 1000
            }],
            "splits": split_values,
            "phase_splits": phase_splits,
            "evaluator": {"kind": "predictions", "entrypoint": "evaluator/main.py", "chunkable": true}
        });
        Self { manifest, files }
    }

    /// Three phases (test-dev, test-std, test-challenge) over two splits,
    /// with the `test-challenge` split host-only on every phase it appears in.
    pub fn vqa(id: &str, remote: bool) -> Self {
        let labels: Vec<u32> = (0..20).map(|i| i % 4).collect();
        let mut b = Self::predictions_with_labels(id, &[("test-dev", labels.clone()), ("test-challenge", labels)]);
        let m = &mut b.manifest;
        m["remote_evaluation"] = json!(remote);
        m["phases"] = json!([
            {"id": "dev", "codename": "test-dev", "name": "Test-Dev",
             "start": "2000-01-01T00:00:00Z", "end": null, "submission_limit_per_day": 1000},
            {"id": "std", "codename": "test-std", "name": "Test-Standard",
             "start": "2000-01-01T00:00:00Z", "end": null, "submission_limit_per_day": 1000},
            {"id": "chal", "codename": "test-challenge", "name": "Test-Challenge",
             "start": "2000-01-01T00:00:00Z", "end": null, "submission_limit_per_day": 1000}
        ]);
        let mut phase_splits = Vec::new();
        for phase in ["dev", "std", "chal"] {
            for (split, vis) in [("test-dev", "public"), ("test-challenge", "host_only")] {
                phase_splits.push(json!({
                    "phase": phase, "split": split, "visibility": vis, "leaderboard_schema": ["accuracy"]
                }));
            }
        }
        m["phase_splits"] = json!(phase_splits);
        if remote {
            for s in m["splits"].as_array_mut().unwrap() {
                s.as_object_mut().unwrap().remove("annotation_file");
            }
            b.files.retain(|(p, _, _)| !p.starts_with("annotations/"));
        }
        b
    }

    /// Agent challenge with one split whose environment answers `truth`.
    pub fn agent(id: &str, truth: &str, episodes: usize, max_steps: u32) -> Self {
        let episode_ids: Vec<String> = (0..episodes).map(|i| format!("ep{i}")).collect();
        let manifest = json!({
            "schema_version": 1,
            "id": id,
            "title": format!("Agent challenge {id}"),
            "default_metric": "success",
            "phases": [{
                "id": "dev", "codename": "test-dev", "name": "Test-Dev",
                "start": "2000-01-01T00:00:00Z", "end": null, "submission_limit_per_day": 1000
            }],
            "splits": [{
                "id": "test", "name": "Test", "item_count": episodes,
                "environment": {
                    "env_id": "house", "program": "env/env.py", "assets_file": "env/secret-answer.txt",
                    "episodes": episode_ids, "max_steps_per_episode": max_steps,
                    "action_vocabulary": ["move-forward", "turn-left", "turn-right", "stop"],
                    "step_deadline_ms": 5000
                }
            }],
            "phase_splits": [{"phase": "dev", "split": "test", "visibility": "public", "leaderboard_schema": ["success"]}],
            "evaluator": {"kind": "agent", "entrypoint": "evaluator/score.py", "chunkable": false}
        });
        Self {
            manifest,
            files: vec![
                ("evaluator/score.py".into(), SUCCESS_RATE_EVALUATOR.as_bytes().to_vec(), true),
                ("env/env.py".into(), ANSWER_ENVIRONMENT.as_bytes().to_vec(), true),
                ("env/secret-answer.txt".into(), truth.as_bytes().to_vec(), false),
            ],
        }
    }

    /// Human-in-the-loop challenge rated on correctness/fluency/consistency.
    pub fn hitl(id: &str, rounds: u32) -> Self {
        let manifest = json!({
            "schema_version": 1,
            "id": id,
            "title": format!("Dialog challenge {id}"),
            "default_metric": "correctness",
            "phases": [{
                "id": "dev", "codename": "test-dev", "name": "Test-Dev",
                "start": "2000-01-01T00:00:00Z", "end": null, "submission_limit_per_day": 1000
            }],
            "splits": [{"id": "test", "name": "Test", "item_count": 1}],
            "phase_splits": [{
                "phase": "dev", "split": "test", "visibility": "public",
                "leaderboard_schema": ["correctness", "fluency", "consistency"]
            }],
            "evaluator": {"kind": "hitl", "entrypoint": "evaluator/noop.sh"},
            "hitl": {
                "instructions_html": "<p>Chat with the agent, then rate every reply.</p>",
                "rating_axes": ["correctness", "fluency", "consistency"],
                "rounds_required": rounds
            }
        });
        Self {
            manifest,
            files: vec![("evaluator/noop.sh".into(), b"#!/bin/sh\nexit 0\n".to_vec(), true)],
        }
    }

    pub fn file(mut self, path: &str, data: impl Into<Vec<u8>>, executable: bool) -> Self {
        self.files.retain(|(p, _, _)| p != path);
        self.files.push((path.to_owned(), data.into(), executable));
        self
    }

    pub fn evaluator_script(self, script: &str) -> Self {
        let entry = self.manifest["evaluator"]["entrypoint"].as_str().unwrap().to_owned();
        self.file(&entry, script, true)
    }

    pub fn build(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec_pretty(&self.manifest).unwrap();
        let mut files: Vec<(&str, &[u8], bool)> = vec![("challenge.json", manifest.as_slice(), false)];
        files.extend(self.files.iter().map(|(p, d, x)| (p.as_str(), d.as_slice(), *x)));
        zip_files(files)
    }
}

/// Parses `bundle` and stores its staged blobs, as challenge creation does.
pub fn install(bundle: &[u8], blobs: &dyn crate::blob::BlobStore) -> crate::model::ChallengeConfig {
    let parsed = crate::model::parse_bundle(bundle).expect("fixture bundle is valid");
    for (blob, staged) in parsed.blobs {
        let stored = blobs.put(staged.kind, staged.data).unwrap();
        assert_eq!(stored, blob);
    }
    parsed.config
}

/// Writes `data` to a fresh temp file.
pub fn temp_file(data: &[u8]) -> tempfile::NamedTempFile {
    let mut file = tempfile::NamedTempFile::new().unwrap();
    std::io::Write::write_all(&mut file, data).unwrap();
    file
}

/// A platform on a manual clock with one host team and two participant teams.
pub struct Harness {
    pub clock: std::sync::Arc<crate::clock::ManualClock>,
    pub blobs: std::sync::Arc<crate::blob::MemoryBlobStore>,
    pub broker: std::sync::Arc<crate::queue::Broker>,
    pub platform: std::sync::Arc<crate::api::Platform>,
    pub host: crate::api::Principal,
    pub alice: crate::api::Principal,
    pub bob: crate::api::Principal,
}

impl Harness {
    /// No local worker threads; tests drive workers themselves.
    pub fn new() -> Self {
        Self::with(crate::api::PlatformSettings {
            local_workers: 0,
            ..Default::default()
        })
    }

    pub fn with(settings: crate::api::PlatformSettings) -> Self {
        use crate::api::{Platform, Principal};
        use crate::ids::{AccountId, TeamId};
        use std::sync::Arc;
        let clock = Arc::new(crate::clock::ManualClock::new("2024-03-10T12:00:00Z".parse().unwrap()));
        let blobs = Arc::new(crate::blob::MemoryBlobStore::new());
        let broker = Arc::new(crate::queue::Broker::new(clock.clone(), crate::queue::BrokerConfig::default()));
        let platform = Platform::new(clock.clone(), blobs.clone(), Arc::clone(&broker), settings);
        for (team, account) in [("hosts", "hannah"), ("t1", "alice"), ("t2", "bob")] {
            platform.create_team(TeamId::new(team), team).unwrap();
            platform.create_account(AccountId::new(account), &TeamId::new(team)).unwrap();
        }
        let user = |a: &str| Principal::User(AccountId::new(a));
        Self {
            clock,
            blobs,
            broker,
            host: user("hannah"),
            alice: user("alice"),
            bob: user("bob"),
            platform,
        }
    }

    pub fn challenge(&self, builder: &BundleBuilder) -> std::sync::Arc<crate::model::ChallengeConfig> {
        self.platform.create_challenge(&builder.build(), &self.host).unwrap()
    }

    pub fn advance(&self, seconds: i64) {
        self.clock.advance(chrono::Duration::seconds(seconds));
    }
}

impl Default for Harness {
    fn default() -> Self {
        Self::new()
    }
}
