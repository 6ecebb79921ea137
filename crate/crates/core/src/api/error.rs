use crate::clock::Timestamp;
use crate::model::Violation;

/// Every error the platform surfaces to clients, with a stable code.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ApiError {
    #[error("missing or invalid credentials")]
    Unauthenticated,
    #[error("not allowed: {0}")]
    Unauthorized(String),
    #[error("{0} not found")]
    NotFound(String),
    #[error("bundle failed validation ({} violation(s))", .0.len())]
    ValidationFailed(Vec<Violation>),
    #[error("invalid bundle: {0}")]
    InvalidBundle(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("phase {0:?} is not open for submissions")]
    PhaseClosed(String),
    #[error("daily submission limit reached; resets at {reset_at}")]
    RateLimited { reset_at: Timestamp },
    #[error("payload of {size} bytes exceeds the {limit} byte limit")]
    PayloadTooLarge { size: u64, limit: u64 },
    #[error("illegal transition from {from} to {to}")]
    IllegalTransition { from: String, to: String },
    #[error("results do not match the leaderboard schema: {0}")]
    SchemaMismatch(String),
    #[error("{0} already exists")]
    Conflict(String),
    #[error("lease has expired")]
    LeaseExpired,
    #[error("worker heartbeat is stale; send a heartbeat before leasing")]
    StaleHeartbeat,
    #[error("challenge is not evaluated remotely")]
    NotRemoteChallenge,
    #[error("challenge is not a human-in-the-loop challenge")]
    NotHitlChallenge,
    #[error("{code}: {message}")]
    Session { code: &'static str, message: String },
    #[error("service unavailable: {0}")]
    Unavailable(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ApiError {
    pub fn code(&self) -> &'static str {
        match self {
            ApiError::Unauthenticated => "unauthenticated",
            ApiError::Unauthorized(_) => "unauthorized",
            ApiError::NotFound(_) => "not_found",
            ApiError::ValidationFailed(_) => "validation_failed",
            ApiError::InvalidBundle(_) => "invalid_bundle",
            ApiError::BadRequest(_) => "bad_request",
            ApiError::PhaseClosed(_) => "phase_closed",
            ApiError::RateLimited { .. } => "rate_limited",
            ApiError::PayloadTooLarge { .. } => "payload_too_large",
            ApiError::IllegalTransition { .. } => "illegal_transition",
            ApiError::SchemaMismatch(_) => "schema_mismatch",
            ApiError::Conflict(_) => "conflict",
            ApiError::LeaseExpired => "lease_expired",
            ApiError::StaleHeartbeat => "stale_heartbeat",
            ApiError::NotRemoteChallenge => "not_remote_challenge",
            ApiError::NotHitlChallenge => "not_hitl_challenge",
            ApiError::Session { code, .. } => code,
            ApiError::Unavailable(_) => "unavailable",
            ApiError::Internal(_) => "internal",
        }
    }

    pub fn http_status(&self) -> u16 {
        match self {
            ApiError::Unauthenticated => 401,
            ApiError::Unauthorized(_) => 403,
            ApiError::NotFound(_) => 404,
            ApiError::ValidationFailed(_) | ApiError::SchemaMismatch(_) => 422,
            ApiError::InvalidBundle(_) | ApiError::BadRequest(_) => 400,
            ApiError::NotRemoteChallenge | ApiError::NotHitlChallenge => 400,
            ApiError::PhaseClosed(_) => 403,
            ApiError::RateLimited { .. } => 429,
            ApiError::PayloadTooLarge { .. } => 413,
            ApiError::IllegalTransition { .. } | ApiError::Conflict(_) => 409,
            ApiError::LeaseExpired | ApiError::StaleHeartbeat => 409,
            ApiError::Session { .. } => 409,
            ApiError::Unavailable(_) => 503,
            ApiError::Internal(_) => 500,
        }
    }

    /// The `{"error": {...}}` envelope sent to clients.
    pub fn envelope(&self) -> serde_json::Value {
        let mut error = serde_json::json!({"code": self.code(), "message": self.to_string()});
        match self {
            ApiError::ValidationFailed(violations) => {
                error["violations"] = serde_json::to_value(violations).unwrap_or_default();
            }
            ApiError::RateLimited { reset_at } => {
                error["reset_at"] = serde_json::json!(reset_at);
            }
            _ => {}
        }
        serde_json::json!({ "error": error })
    }
}
