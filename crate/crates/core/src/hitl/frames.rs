//! JSON frames exchanged with an evaluator client over the session channel.

use serde::{Deserialize, Serialize};

use crate::ids::SessionId;
use crate::model::RatingScale;

use super::{Message, SessionState};

/// Frames the broker sends to the evaluator client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerFrame {
    /// First frame of a fresh pairing.
    Instructions(SessionSnapshot),
    /// First frame after a reconnect; carries the full transcript so far.
    Replay(SessionSnapshot),
    AgentMsg { round: u32, body: String, rounds_remaining: u32 },
    Ack(Ack),
    Error { code: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub session_id: SessionId,
    pub state: SessionState,
    pub instructions_html: String,
    pub rating_axes: Vec<String>,
    pub rating_scale: RatingScale,
    pub rounds_required: u32,
    pub round_count: u32,
    pub transcript: Vec<Message>,
    /// Ratings given so far, by axis then round.
    pub ratings: Vec<Rating>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rating {
    pub axis: String,
    pub round: u32,
    pub value: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "of", rename_all = "snake_case")]
pub enum Ack {
    Rate { axis: String, round: u32, value: i32 },
    Finalize { outcome: super::SessionOutcome },
}

/// Frames the evaluator client sends to the broker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientFrame {
    Msg { body: String },
    Rate { axis: String, round: u32, value: i32 },
    Finalize,
}
