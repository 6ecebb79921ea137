//! Evaluator-facing HITL endpoints: the session channel and its REST fallbacks.

use axum::extract::ws::{Message as WsMessage, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use gauntlet_core::api::ApiError;
use gauntlet_core::hitl::frames::{Ack, ClientFrame, ServerFrame};
use gauntlet_core::hitl::{Actor, Pairing};
use gauntlet_core::ids::{AccountId, SessionId};

use crate::routes::user;
use crate::{blocking, AppState, Caller, HttpResult, JsonBody};

pub(crate) fn routes() -> Router<AppState> {
    Router::new()
        .route("/hitl/channel", get(channel))
        .route("/hitl/claim", post(claim))
        .route("/hitl/sessions/{id}", get(snapshot))
        .route("/hitl/sessions/{id}/pair", post(pair))
        .route("/hitl/sessions/{id}/messages", post(message))
        .route("/hitl/sessions/{id}/ratings", post(rate))
        .route("/hitl/sessions/{id}/finalize", post(finalize))
        .route("/hitl/sessions/{id}/abandon", post(abandon))
}

#[derive(Serialize)]
struct PairingBody {
    session_id: SessionId,
    frame: ServerFrame,
}

impl From<Pairing> for PairingBody {
    fn from(p: Pairing) -> Self {
        Self {
            session_id: p.session_id,
            frame: p.frame,
        }
    }
}

async fn claim(State(s): State<AppState>, Caller(caller): Caller) -> HttpResult<Json<PairingBody>> {
    let p = s.platform;
    let pairing = blocking(move || p.hitl().claim(&user(&caller)?)).await?;
    Ok(Json(pairing.into()))
}

async fn pair(State(s): State<AppState>, Caller(caller): Caller, Path(id): Path<String>) -> HttpResult<Json<PairingBody>> {
    let p = s.platform;
    let pairing = blocking(move || p.hitl().pair(&SessionId::new(id), &user(&caller)?)).await?;
    Ok(Json(pairing.into()))
}

async fn snapshot(State(s): State<AppState>, Caller(caller): Caller, Path(id): Path<String>) -> HttpResult<Response> {
    let p = s.platform;
    let snap = blocking(move || p.hitl().snapshot(&SessionId::new(id), &user(&caller)?)).await?;
    Ok(Json(snap).into_response())
}

#[derive(Deserialize)]
struct MessageBody {
    body: String,
}

async fn message(
    State(s): State<AppState>,
    Caller(caller): Caller,
    Path(id): Path<String>,
    JsonBody(body): JsonBody<MessageBody>,
) -> HttpResult<Response> {
    let p = s.platform;
    let reply = blocking(move || {
        let evaluator = user(&caller)?;
        p.hitl().relay(&SessionId::new(id), &Actor::rest(&evaluator), &body.body)
    })
    .await?;
    Ok(Json(reply).into_response())
}

#[derive(Deserialize)]
struct RateBody {
    axis: String,
    round: u32,
    value: i32,
}

async fn rate(
    State(s): State<AppState>,
    Caller(caller): Caller,
    Path(id): Path<String>,
    JsonBody(body): JsonBody<RateBody>,
) -> HttpResult<Response> {
    let p = s.platform;
    let ack = blocking(move || {
        let evaluator = user(&caller)?;
        p.hitl()
            .rate(&SessionId::new(id), &Actor::rest(&evaluator), &body.axis, body.round, body.value)
    })
    .await?;
    Ok(Json(ack).into_response())
}

async fn finalize(State(s): State<AppState>, Caller(caller): Caller, Path(id): Path<String>) -> HttpResult<Response> {
    let p = s.platform;
    let outcome = blocking(move || {
        let evaluator = user(&caller)?;
        p.hitl().finalize(&SessionId::new(id), &Actor::rest(&evaluator))
    })
    .await?;
    Ok(Json(json!({ "outcome": outcome })).into_response())
}

async fn abandon(State(s): State<AppState>, Caller(caller): Caller, Path(id): Path<String>) -> HttpResult<Response> {
    let p = s.platform;
    let outcome = blocking(move || {
        let evaluator = user(&caller)?;
        p.hitl().abandon(&SessionId::new(id), &Actor::rest(&evaluator))
    })
    .await?;
    Ok(Json(json!({ "outcome": outcome })).into_response())
}

#[derive(Deserialize)]
struct ChannelQuery {
    session: Option<String>,
}

async fn channel(
    State(s): State<AppState>,
    Caller(caller): Caller,
    Query(q): Query<ChannelQuery>,
    ws: WebSocketUpgrade,
) -> HttpResult<Response> {
    let evaluator = user(&caller)?;
    Ok(ws.on_upgrade(move |socket| run_channel(socket, s, evaluator, q.session.map(SessionId::new))))
}

fn error_frame(e: &ApiError) -> ServerFrame {
    ServerFrame::Error {
        code: e.code().to_owned(),
        message: e.to_string(),
    }
}

async fn send(socket: &mut WebSocket, frame: &ServerFrame) -> bool {
    let text = serde_json::to_string(frame).expect("frames serialize");
    socket.send(WsMessage::Text(text.into())).await.is_ok()
}

async fn run_channel(mut socket: WebSocket, state: AppState, evaluator: AccountId, session: Option<SessionId>) {
    let p = state.platform.clone();
    let who = evaluator.clone();
    let paired = blocking(move || match session {
        Some(id) => p.hitl().pair(&id, &who),
        None => p.hitl().claim(&who),
    })
    .await;
    let Pairing {
        session_id,
        connection,
        frame,
    } = match paired {
        Ok(pairing) => pairing,
        Err(e) => {
            send(&mut socket, &error_frame(&e.0)).await;
            let _ = socket.send(WsMessage::Close(None)).await;
            return;
        }
    };
    if send(&mut socket, &frame).await {
        serve_frames(&mut socket, &state, &evaluator, &session_id, connection).await;
    }
    let p = state.platform.clone();
    let _ = tokio::task::spawn_blocking(move || p.hitl().disconnect(&session_id, connection)).await;
}

async fn serve_frames(socket: &mut WebSocket, state: &AppState, evaluator: &AccountId, session: &SessionId, connection: u64) {
    while let Some(Ok(msg)) = socket.recv().await {
        let text = match msg {
            WsMessage::Text(text) => text,
            WsMessage::Close(_) => return,
            _ => continue,
        };
        let frame: ClientFrame = match serde_json::from_str(text.as_str()) {
            Ok(frame) => frame,
            Err(e) => {
                let err = ApiError::BadRequest(format!("unreadable frame: {e}"));
                if !send(socket, &error_frame(&err)).await {
                    return;
                }
                continue;
            }
        };
        let p = state.platform.clone();
        let (evaluator, session) = (evaluator.clone(), session.clone());
        let finalizing = matches!(frame, ClientFrame::Finalize);
        let reply = blocking(move || {
            let actor = Actor::channel(&evaluator, connection);
            let hitl = p.hitl();
            Ok(match frame {
                ClientFrame::Msg { body } => {
                    let r = hitl.relay(&session, &actor, &body)?;
                    ServerFrame::AgentMsg {
                        round: r.round,
                        body: r.body,
                        rounds_remaining: r.rounds_remaining,
                    }
                }
                ClientFrame::Rate { axis, round, value } => ServerFrame::Ack(hitl.rate(&session, &actor, &axis, round, value)?),
                ClientFrame::Finalize => ServerFrame::Ack(Ack::Finalize {
                    outcome: hitl.finalize(&session, &actor)?,
                }),
            })
        })
        .await;
        let (frame, done) = match reply {
            Ok(frame) => (frame, finalizing),
            Err(e) => {
                let superseded = e.0.code() == "superseded";
                (error_frame(&e.0), superseded)
            }
        };
        if !send(socket, &frame).await || done {
            let _ = socket.send(WsMessage::Close(None)).await;
            return;
        }
    }
}
