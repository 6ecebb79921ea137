use std::sync::Arc;
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use reqwest::StatusCode;
use serde_json::{json, Value};
use tokio::sync::oneshot;
use tokio_tungstenite::tungstenite::Message;

use gauntlet_core::api::{PlatformSettings, Principal};
use gauntlet_core::fixtures::{agent_bundle, BundleBuilder, Harness, ECHO_AGENT};
use gauntlet_core::hitl::{EchoLauncher, HitlSettings};
use gauntlet_core::ids::{AccountId, TeamId};

struct Server {
    h: Harness,
    base: String,
    http: reqwest::Client,
    stop: Option<oneshot::Sender<()>>,
    host: String,
    alice: String,
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
    }
}

async fn start() -> Server {
    let h = Harness::with(PlatformSettings {
        local_workers: 0,
        hitl: HitlSettings {
            launcher: Some(Arc::new(EchoLauncher)),
            ..Default::default()
        },
        ..Default::default()
    });
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let (stop, stopped) = oneshot::channel();
    let platform = Arc::clone(&h.platform);
    tokio::spawn(gauntlet_server::serve(platform, listener, Duration::from_secs(60), async {
        let _ = stopped.await;
    }));
    let host = h.platform.issue_token(h.host.clone());
    let alice = h.platform.issue_token(h.alice.clone());
    Server {
        h,
        base,
        http: reqwest::Client::new(),
        stop: Some(stop),
        host,
        alice,
    }
}

impl Server {
    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    async fn call(&self, method: reqwest::Method, path: &str, token: Option<&str>, body: Option<Value>) -> (StatusCode, Value) {
        let mut req = self.http.request(method, self.url(path));
        if let Some(t) = token {
            req = req.bearer_auth(t);
        }
        if let Some(b) = body {
            req = req.json(&b);
        }
        let resp = req.send().await.unwrap();
        let status = resp.status();
        let text = resp.text().await.unwrap();
        (status, serde_json::from_str(&text).unwrap_or(Value::Null))
    }

    async fn upload(&self, path: &str, token: &str, bytes: Vec<u8>) -> (StatusCode, Value) {
        let resp = self.http.post(self.url(path)).bearer_auth(token).body(bytes).send().await.unwrap();
        let status = resp.status();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    fn evaluator(&self, name: &str) -> String {
        let team = TeamId::new("crowd");
        let _ = self.h.platform.create_team(team.clone(), "crowd");
        self.h.platform.create_account(AccountId::new(name), &team).unwrap();
        self.h.platform.issue_token(Principal::User(AccountId::new(name)))
    }
}

use reqwest::Method;

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn errors_use_the_envelope() {
    let s = start().await;
    let (status, body) = s.call(Method::GET, "/challenges/nope/submissions", None, None).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    assert_eq!(body["error"]["code"], "unauthenticated");

    let (status, body) = s.call(Method::GET, "/challenges/nope", None, None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"]["code"], "not_found");

    let (status, body) = s.call(Method::GET, "/challenges/nope", Some("forged-token-value"), None).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    assert!(body["error"]["message"].is_string());

    let resp = s
        .http
        .post(s.url("/remote/workers"))
        .bearer_auth(&s.host)
        .header("content-type", "application/json")
        .body("{not json")
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
    let body: Value = resp.json().await.unwrap();
    assert_eq!(body["error"]["code"], "bad_request");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn challenge_and_submission_lifecycle() {
    let s = start().await;
    let (status, body) = s.upload("/challenges", &s.host, BundleBuilder::predictions("cifar").build()).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    assert_eq!(body["id"], "cifar");

    let (status, body) = s.upload("/challenges", &s.host, b"not a zip".to_vec()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");

    let (_, list) = s.call(Method::GET, "/challenges", None, None).await;
    assert_eq!(list["challenges"].as_array().unwrap().len(), 1);

    let preds = serde_json::to_vec(&(0..10).collect::<Vec<u32>>()).unwrap();
    let (status, body) = s.upload("/challenges/cifar/phases/test-dev/submissions", &s.alice, preds.clone()).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{body}");
    assert_eq!(body["queue_depth"], 1);
    assert_eq!(body["submission"]["status"], "queued");
    let id = body["submission"]["id"].as_str().unwrap().to_owned();

    let (status, body) = s.upload("/challenges/cifar/phases/test-std/submissions", &s.alice, preds).await;
    assert_eq!(status, StatusCode::NOT_FOUND, "{body}");

    let (status, body) = s.call(Method::GET, &format!("/submissions/{id}"), Some(&s.alice), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["phase"], "test-dev");

    let bob = s.h.platform.issue_token(s.h.bob.clone());
    let (status, _) = s.call(Method::GET, &format!("/submissions/{id}"), Some(&bob), None).await;
    assert_eq!(status, StatusCode::FORBIDDEN);

    let patch = json!({"status": "running"});
    let (status, body) = s.call(Method::PATCH, &format!("/submissions/{id}/status"), Some(&s.alice), Some(patch.clone())).await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    assert_eq!(body["error"]["code"], "unauthorized");
    let (status, body) = s.call(Method::PATCH, &format!("/submissions/{id}/status"), Some(&s.host), Some(patch.clone())).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["status"], "running");
    let (status, body) = s.call(Method::PATCH, &format!("/submissions/{id}/status"), Some(&s.host), Some(json!({"status": "submitted"}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"]["code"], "illegal_transition");

    let (status, body) = s.call(Method::GET, "/challenges/cifar/leaderboard?phase=test-dev&split=test", None, None).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["entries"], json!([]));

    let (_, body) = s.call(Method::GET, "/challenges/cifar/submissions", Some(&s.alice), None).await;
    assert_eq!(body["submissions"].as_array().unwrap().len(), 1);
    let (status, _) = s.call(Method::GET, "/challenges/cifar/dead-letters", Some(&s.alice), None).await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    let (status, body) = s.call(Method::GET, "/challenges/cifar/dead-letters", Some(&s.host), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["dead_letters"], json!([]));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn remote_worker_round_trip() {
    let s = start().await;
    let (status, body) = s.upload("/challenges", &s.host, BundleBuilder::vqa("vqa", true).build()).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");

    let (status, reg) = s.call(Method::POST, "/remote/workers", Some(&s.host), Some(json!({"challenge_id": "vqa"}))).await;
    assert_eq!(status, StatusCode::CREATED, "{reg}");
    let worker = reg["token"].as_str().unwrap().to_owned();

    let (status, _) = s.call(Method::POST, "/remote/heartbeat", Some(&worker), None).await;
    assert_eq!(status, StatusCode::OK);
    let (status, _) = s.call(Method::POST, "/remote/lease", Some(&worker), Some(json!({}))).await;
    assert_eq!(status, StatusCode::NO_CONTENT);

    let artifact = serde_json::to_vec(&(0..20).map(|i| i % 4).collect::<Vec<u32>>()).unwrap();
    let (_, sub) = s.upload("/challenges/vqa/phases/test-dev/submissions", &s.alice, artifact.clone()).await;
    let sub_id = sub["submission"]["id"].as_str().unwrap().to_owned();

    let (status, body) = s.call(Method::POST, "/remote/lease", Some(&worker), Some(json!({"challenge_id": "other"}))).await;
    assert_eq!(status, StatusCode::FORBIDDEN, "{body}");
    let (status, grant) = s.call(Method::POST, "/remote/lease", Some(&worker), Some(json!({"challenge_id": "vqa"}))).await;
    assert_eq!(status, StatusCode::OK, "{grant}");
    assert_eq!(grant["submission_id"], sub_id.as_str());

    let bytes = s.http.get(s.url(grant["artifact_url"].as_str().unwrap())).send().await.unwrap().bytes().await.unwrap();
    assert_eq!(bytes.as_ref(), artifact.as_slice());

    let report = json!({
        "lease_id": grant["lease_id"],
        "outcome": "metrics",
        "results": {"test-dev": {"accuracy": 1.0}, "test-challenge": {"accuracy": 1.0}}
    });
    let (status, ack) = s.call(Method::POST, "/remote/results", Some(&worker), Some(report.clone())).await;
    assert_eq!(status, StatusCode::OK, "{ack}");
    assert_eq!(ack, json!({"duplicate": false, "submission_status": "finished"}));
    let (_, ack) = s.call(Method::POST, "/remote/results", Some(&worker), Some(report)).await;
    assert_eq!(ack["duplicate"], true);

    let (_, board) = s.call(Method::GET, "/challenges/vqa/leaderboard?phase=test-dev&split=test-dev", None, None).await;
    assert_eq!(board["entries"].as_array().unwrap().len(), 1);
    assert_eq!(board["entries"][0]["rank"], 1);
    let (_, hidden) = s.call(Method::GET, "/challenges/vqa/leaderboard?phase=test-dev&split=test-challenge", Some(&s.alice), None).await;
    assert_eq!(hidden["entries"], json!([]));
    let (_, shown) = s.call(Method::GET, "/challenges/vqa/leaderboard?phase=test-dev&split=test-challenge", Some(&s.host), None).await;
    assert_eq!(shown["entries"].as_array().unwrap().len(), 1);
}

/// Creates a HITL challenge with one open session; returns (session id, submission id, evaluator token).
async fn hitl_session(s: &Server, rounds: u32) -> (String, String, String) {
    let (status, body) = s.upload("/challenges", &s.host, BundleBuilder::hitl("dialog", rounds).build()).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    let eve = s.evaluator("eve");
    let (status, body) = s
        .call(Method::PUT, "/hitl/challenges/dialog/evaluators/eve/qualification", Some(&s.host), Some(json!({"passed": true})))
        .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["qualification_passed"], true);

    let (_, sub) = s.upload("/challenges/dialog/phases/test-dev/submissions?kind=agent", &s.alice, agent_bundle(ECHO_AGENT, b"")).await;
    let sub_id = sub["submission"]["id"].as_str().unwrap().to_owned();
    s.call(Method::PATCH, &format!("/submissions/{sub_id}/status"), Some(&s.host), Some(json!({"status": "running"}))).await;
    let (status, opened) = s.call(Method::POST, &format!("/hitl/submissions/{sub_id}/sessions"), Some(&s.host), Some(json!({"count": 1}))).await;
    assert_eq!(status, StatusCode::CREATED, "{opened}");
    let session = opened["sessions"][0]["session_id"].as_str().unwrap().to_owned();
    (session, sub_id, eve)
}

type Socket = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

async fn connect(s: &Server, token: &str, session: &str) -> Socket {
    let url = format!("{}/hitl/channel?session={session}&token={token}", s.base.replace("http://", "ws://"));
    tokio_tungstenite::connect_async(url).await.unwrap().0
}

async fn next(ws: &mut Socket) -> Value {
    loop {
        match tokio::time::timeout(Duration::from_secs(10), ws.next()).await.unwrap() {
            Some(Ok(Message::Text(t))) => return serde_json::from_str(&t).unwrap(),
            Some(Ok(Message::Close(_))) | None => return Value::Null,
            Some(Ok(_)) => continue,
            Some(Err(e)) => panic!("socket error: {e}"),
        }
    }
}

async fn exchange(ws: &mut Socket, frame: Value) -> Value {
    ws.send(Message::Text(frame.to_string().into())).await.unwrap();
    next(ws).await
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn channel_survives_reconnects() {
    let s = start().await;
    let (session, sub_id, eve) = hitl_session(&s, 2).await;

    let mut ws = connect(&s, &eve, &session).await;
    let hello = next(&mut ws).await;
    assert_eq!(hello["type"], "instructions");
    assert_eq!(hello["rounds_required"], 2);
    let reply = exchange(&mut ws, json!({"type": "msg", "body": "what colour is the car?"})).await;
    assert_eq!(reply, json!({"type": "agent_msg", "round": 1, "body": "what colour is the car?", "rounds_remaining": 1}));
    let bad = exchange(&mut ws, json!({"type": "dance"})).await;
    assert_eq!(bad["type"], "error");
    assert_eq!(bad["code"], "bad_request");
    drop(ws);

    let mut ws = connect(&s, &eve, &session).await;
    let replay = next(&mut ws).await;
    assert_eq!(replay["type"], "replay");
    assert_eq!(replay["round_count"], 1);
    assert_eq!(replay["transcript"].as_array().unwrap().len(), 2);

    let mut takeover = connect(&s, &eve, &session).await;
    assert_eq!(next(&mut takeover).await["type"], "replay");
    let stale = exchange(&mut ws, json!({"type": "msg", "body": "still there?"})).await;
    assert_eq!(stale["code"], "superseded");
    let mut ws = takeover;

    let reply = exchange(&mut ws, json!({"type": "msg", "body": "and the sky?"})).await;
    assert_eq!(reply["round"], 2);
    assert_eq!(reply["rounds_remaining"], 0);
    let extra = exchange(&mut ws, json!({"type": "msg", "body": "one more"})).await;
    assert_eq!(extra["code"], "rounds_exhausted");
    let early = exchange(&mut ws, json!({"type": "finalize"})).await;
    assert_eq!(early["code"], "session_incomplete");

    for (round, value) in [(1, 4), (2, 2)] {
        for axis in ["correctness", "fluency", "consistency"] {
            let ack = exchange(&mut ws, json!({"type": "rate", "axis": axis, "round": round, "value": value})).await;
            assert_eq!(ack, json!({"type": "ack", "of": "rate", "axis": axis, "round": round, "value": value}));
        }
    }
    let out = exchange(&mut ws, json!({"type": "rate", "axis": "fluency", "round": 1, "value": 99})).await;
    assert_eq!(out["code"], "out_of_scale");
    let done = exchange(&mut ws, json!({"type": "finalize"})).await;
    assert_eq!(done, json!({"type": "ack", "of": "finalize", "outcome": "approved"}));
    assert_eq!(next(&mut ws).await, Value::Null);

    let (status, report) = s.call(Method::GET, &format!("/hitl/submissions/{sub_id}/report"), Some(&s.host), None).await;
    assert_eq!(status, StatusCode::OK, "{report}");
    assert_eq!(report["completed_sessions"], 1);
    assert_eq!(report["aggregate"], json!({"consistency": 3.0, "correctness": 3.0, "fluency": 3.0}));
    let (status, _) = s.call(Method::GET, &format!("/hitl/submissions/{sub_id}/report"), Some(&s.alice), None).await;
    assert_eq!(status, StatusCode::FORBIDDEN);

    let (_, board) = s.call(Method::GET, "/challenges/dialog/leaderboard?phase=test-dev&split=test", None, None).await;
    assert_eq!(board["entries"][0]["metrics"]["fluency"], 3.0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn unqualified_evaluator_gets_an_error_frame() {
    let s = start().await;
    let (session, _, _) = hitl_session(&s, 1).await;
    let mallory = s.evaluator("mallory");
    let mut ws = connect(&s, &mallory, &session).await;
    let frame = next(&mut ws).await;
    assert_eq!(frame["type"], "error");
    assert_eq!(frame["code"], "not_qualified");
    assert_eq!(next(&mut ws).await, Value::Null);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn rest_fallbacks_complete_a_session() {
    let s = start().await;
    let (session, sub_id, eve) = hitl_session(&s, 1).await;
    let (status, claimed) = s.call(Method::POST, "/hitl/claim", Some(&eve), None).await;
    assert_eq!(status, StatusCode::OK, "{claimed}");
    assert_eq!(claimed["session_id"], session.as_str());
    assert_eq!(claimed["frame"]["type"], "instructions");

    let base = format!("/hitl/sessions/{session}");
    let (status, reply) = s.call(Method::POST, &format!("{base}/messages"), Some(&eve), Some(json!({"body": "hi"}))).await;
    assert_eq!(status, StatusCode::OK, "{reply}");
    assert_eq!(reply, json!({"round": 1, "body": "hi", "rounds_remaining": 0}));
    for axis in ["correctness", "fluency", "consistency"] {
        let (status, ack) = s
            .call(Method::POST, &format!("{base}/ratings"), Some(&eve), Some(json!({"axis": axis, "round": 1, "value": 5})))
            .await;
        assert_eq!(status, StatusCode::OK, "{ack}");
    }
    let (status, bad) = s
        .call(Method::POST, &format!("{base}/ratings"), Some(&eve), Some(json!({"axis": "humour", "round": 1, "value": 5})))
        .await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(bad["error"]["code"], "unknown_axis");

    let (_, snap) = s.call(Method::GET, &base, Some(&eve), None).await;
    assert_eq!(snap["ratings"].as_array().unwrap().len(), 3);
    let (status, done) = s.call(Method::POST, &format!("{base}/finalize"), Some(&eve), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(done["outcome"], "approved");

    let (_, report) = s.call(Method::GET, &format!("/hitl/submissions/{sub_id}/report"), Some(&s.host), None).await;
    assert_eq!(report["aggregate"]["correctness"], 5.0);
}
