use std::sync::Arc;

use axum::body::Body;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use gauntlet_core::api::{ApiError, Principal, SubmissionKind, SubmissionStatus};
use gauntlet_core::ids::{AccountId, ChallengeId, LeaseId, SubmissionId};
use gauntlet_core::queue::RoutingKey;
use gauntlet_core::remote::RemoteReport;

use crate::{blocking, AppState, Caller, HttpError, HttpResult, JsonBody, MaybeCaller};

pub(crate) fn routes() -> Router<AppState> {
    Router::new()
        .route("/health", get(|| async { Json(json!({"status": "ok"})) }))
        .route("/challenges", post(create_challenge).get(list_challenges))
        .route("/challenges/{id}", get(get_challenge))
        .route("/challenges/{id}/phases/{codename}/submissions", post(create_submission))
        .route("/challenges/{id}/submissions", get(list_submissions))
        .route("/challenges/{id}/leaderboard", get(leaderboard))
        .route("/challenges/{id}/dead-letters", get(dead_letters))
        .route("/submissions/{id}", get(get_submission))
        .route("/submissions/{id}/status", patch(transition))
        .route("/remote/workers", post(register_worker))
        .route("/remote/heartbeat", post(heartbeat))
        .route("/remote/lease", post(lease))
        .route("/remote/results", post(report))
        .route("/artifacts/{nonce}", get(artifact))
        .route("/hitl/submissions/{id}/report", get(hitl_report))
        .route("/hitl/submissions/{id}/sessions", post(open_sessions))
        .route(
            "/hitl/challenges/{id}/evaluators/{account}/qualification",
            put(qualification),
        )
}

async fn read_body(body: Body, limit: u64) -> HttpResult<Vec<u8>> {
    let cap = usize::try_from(limit).unwrap_or(usize::MAX).saturating_add(1);
    axum::body::to_bytes(body, cap)
        .await
        .map(|b| b.to_vec())
        .map_err(|_| HttpError(ApiError::PayloadTooLarge { size: limit.saturating_add(1), limit }))
}

async fn create_challenge(State(s): State<AppState>, Caller(caller): Caller, body: Body) -> HttpResult<Response> {
    let bundle = read_body(body, s.platform.settings().artifact_limit_bytes).await?;
    let p = Arc::clone(&s.platform);
    let view = blocking(move || {
        let config = p.create_challenge(&bundle, &caller)?;
        p.challenge_view(&config.id)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(view)).into_response())
}

async fn list_challenges(State(s): State<AppState>, _: MaybeCaller) -> HttpResult<Json<Value>> {
    let p = s.platform;
    let views = blocking(move || p.challenge_ids().iter().map(|id| p.challenge_view(id)).collect::<Result<Vec<_>, _>>()).await?;
    Ok(Json(json!({ "challenges": views })))
}

async fn get_challenge(State(s): State<AppState>, _: MaybeCaller, Path(id): Path<String>) -> HttpResult<Response> {
    let p = s.platform;
    let view = blocking(move || p.challenge_view(&ChallengeId::new(id))).await?;
    Ok(Json(view).into_response())
}

#[derive(Debug, Default, Deserialize, Serialize)]
pub struct SubmissionQuery {
    pub kind: Option<SubmissionKind>,
}

async fn create_submission(
    State(s): State<AppState>,
    Caller(caller): Caller,
    Path((id, codename)): Path<(String, String)>,
    Query(q): Query<SubmissionQuery>,
    body: Body,
) -> HttpResult<Response> {
    let artifact = read_body(body, s.platform.settings().artifact_limit_bytes).await?;
    let p = s.platform;
    let challenge = ChallengeId::new(id);
    let submission = blocking(move || {
        let config = p.challenge(&challenge)?;
        let kind = q.kind.unwrap_or_else(|| SubmissionKind::for_evaluator(config.evaluator.kind));
        let created = p.create_submission(&challenge, &codename, &caller, kind, artifact)?;
        let depth = p.broker().depth(&RoutingKey::for_challenge(&config));
        let view = p.get_submission(&created.id, &caller)?;
        Ok(json!({ "submission": view, "queue_depth": depth }))
    })
    .await?;
    Ok((StatusCode::ACCEPTED, Json(submission)).into_response())
}

async fn list_submissions(State(s): State<AppState>, Caller(caller): Caller, Path(id): Path<String>) -> HttpResult<Json<Value>> {
    let p = s.platform;
    let subs = blocking(move || p.list_submissions(&ChallengeId::new(id), &caller)).await?;
    Ok(Json(json!({ "submissions": subs })))
}

async fn get_submission(State(s): State<AppState>, Caller(caller): Caller, Path(id): Path<String>) -> HttpResult<Response> {
    let p = s.platform;
    let view = blocking(move || p.get_submission(&SubmissionId::new(id), &caller)).await?;
    Ok(Json(view).into_response())
}

#[derive(Deserialize)]
struct TransitionBody {
    status: SubmissionStatus,
}

async fn transition(
    State(s): State<AppState>,
    Caller(caller): Caller,
    Path(id): Path<String>,
    JsonBody(body): JsonBody<TransitionBody>,
) -> HttpResult<Json<Value>> {
    let p = s.platform;
    let sub = blocking(move || p.transition_submission(&SubmissionId::new(id), body.status, &caller)).await?;
    Ok(Json(json!({ "id": sub.id, "status": sub.status })))
}

#[derive(Deserialize)]
struct BoardQuery {
    phase: String,
    split: String,
}

async fn leaderboard(
    State(s): State<AppState>,
    MaybeCaller(caller): MaybeCaller,
    Path(id): Path<String>,
    Query(q): Query<BoardQuery>,
) -> HttpResult<Json<Value>> {
    let p = s.platform;
    let entries = blocking(move || p.leaderboard(&ChallengeId::new(id), &q.phase, &q.split, caller.as_ref())).await?;
    Ok(Json(json!({ "entries": entries })))
}

async fn dead_letters(State(s): State<AppState>, Caller(caller): Caller, Path(id): Path<String>) -> HttpResult<Json<Value>> {
    let p = s.platform;
    let dead = blocking(move || p.dead_letters(&ChallengeId::new(id), &caller)).await?;
    Ok(Json(json!({ "dead_letters": dead })))
}

#[derive(Deserialize)]
struct RegisterBody {
    challenge_id: ChallengeId,
}

async fn register_worker(
    State(s): State<AppState>,
    Caller(caller): Caller,
    JsonBody(body): JsonBody<RegisterBody>,
) -> HttpResult<Response> {
    let p = s.platform;
    let reg = blocking(move || p.register_remote_worker(&body.challenge_id, &caller)).await?;
    Ok((StatusCode::CREATED, Json(reg)).into_response())
}

async fn heartbeat(State(s): State<AppState>, Caller(caller): Caller) -> HttpResult<Json<Value>> {
    let p = s.platform;
    let at = blocking(move || p.remote_heartbeat(&caller)).await?;
    Ok(Json(json!({ "last_heartbeat": at })))
}

#[derive(Deserialize, Default)]
struct LeaseBody {
    challenge_id: Option<ChallengeId>,
}

async fn lease(State(s): State<AppState>, Caller(caller): Caller, JsonBody(body): JsonBody<LeaseBody>) -> HttpResult<Response> {
    let p = s.platform;
    let grant = blocking(move || p.lease_remote(&caller, body.challenge_id.as_ref())).await?;
    Ok(match grant {
        Some(grant) => Json(grant).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

#[derive(Deserialize)]
struct ReportBody {
    lease_id: LeaseId,
    #[serde(flatten)]
    report: RemoteReport,
}

async fn report(State(s): State<AppState>, Caller(caller): Caller, JsonBody(body): JsonBody<ReportBody>) -> HttpResult<Response> {
    let p = s.platform;
    let ack = blocking(move || p.report_remote_result(&caller, &body.lease_id, &body.report)).await?;
    Ok(Json(ack).into_response())
}

async fn artifact(State(s): State<AppState>, Path(nonce): Path<String>) -> HttpResult<Response> {
    let p = s.platform;
    let data = blocking(move || p.fetch_artifact(&nonce)).await?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], data.as_ref().clone()).into_response())
}

async fn hitl_report(State(s): State<AppState>, Caller(caller): Caller, Path(id): Path<String>) -> HttpResult<Response> {
    let p = s.platform;
    let report = blocking(move || p.hitl().report(&SubmissionId::new(id), &caller)).await?;
    Ok(Json(report).into_response())
}

#[derive(Deserialize)]
struct OpenBody {
    count: u32,
}

async fn open_sessions(
    State(s): State<AppState>,
    Caller(caller): Caller,
    Path(id): Path<String>,
    JsonBody(body): JsonBody<OpenBody>,
) -> HttpResult<Response> {
    let p = s.platform;
    let sessions = blocking(move || p.hitl().open_sessions(&SubmissionId::new(id), body.count, &caller)).await?;
    Ok((StatusCode::CREATED, Json(json!({ "sessions": sessions }))).into_response())
}

#[derive(Deserialize)]
struct QualificationBody {
    passed: bool,
}

async fn qualification(
    State(s): State<AppState>,
    Caller(caller): Caller,
    Path((id, account)): Path<(String, String)>,
    JsonBody(body): JsonBody<QualificationBody>,
) -> HttpResult<Response> {
    let p = s.platform;
    let profile = blocking(move || {
        let challenge = ChallengeId::new(id);
        let account = AccountId::new(account);
        p.hitl().set_qualification(&challenge, &account, body.passed, &caller)?;
        Ok(p.hitl().profile(&challenge, &account))
    })
    .await?;
    Ok(Json(profile).into_response())
}

/// The account behind a user token, or 403 for worker tokens.
pub(crate) fn user(caller: &Principal) -> Result<AccountId, ApiError> {
    match caller {
        Principal::User(account) => Ok(account.clone()),
        _ => Err(ApiError::Unauthorized("an evaluator account is required".into())),
    }
}
