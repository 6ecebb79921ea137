//! Process exit codes and the error type commands fail with.

use serde_json::{json, Value};

use crate::client::ClientError;

pub const OK: i32 = 0;
pub const VIOLATIONS: i32 = 1;
pub const BAD_INPUT: i32 = 2;
pub const RATE_LIMITED: i32 = 3;
pub const PHASE_CLOSED: i32 = 4;
pub const FAILED: i32 = 5;
pub const AUTH: i32 = 6;
pub const API: i32 = 7;

/// A failed command: its exit code, a one-line message and structured detail.
#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub exit_code: i32,
    pub code: String,
    pub message: String,
    pub detail: Value,
}

impl CliError {
    pub fn new(exit_code: i32, code: &str, message: impl Into<String>) -> Self {
        Self {
            exit_code,
            code: code.to_owned(),
            message: message.into(),
            detail: Value::Null,
        }
    }

    pub fn bad_input(message: impl Into<String>) -> Self {
        Self::new(BAD_INPUT, "bad_input", message)
    }

    pub fn with_detail(mut self, detail: Value) -> Self {
        self.detail = detail;
        self
    }

    pub fn to_json(&self) -> Value {
        let mut error = json!({"code": self.code, "message": self.message});
        if let Value::Object(extra) = &self.detail {
            for (k, v) in extra {
                if k != "code" && k != "message" {
                    error[k] = v.clone();
                }
            }
        }
        json!({"error": error, "exit_code": self.exit_code})
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

/// Exit code for an API failure.
pub fn code_for(e: &ClientError) -> i32 {
    match e {
        ClientError::Api { code, status, .. } => match code.as_str() {
            "rate_limited" => RATE_LIMITED,
            "phase_closed" => PHASE_CLOSED,
            "unauthenticated" | "unauthorized" => AUTH,
            "validation_failed" => VIOLATIONS,
            "invalid_bundle" | "bad_request" | "payload_too_large" => BAD_INPUT,
            _ if *status == 401 => AUTH,
            _ => API,
        },
        ClientError::Transport(_) => API,
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        let exit_code = code_for(&e);
        let mut message = e.to_string();
        let detail = match &e {
            ClientError::Api { detail, .. } => detail.clone(),
            ClientError::Transport(_) => Value::Null,
        };
        if let Some(reset) = detail.get("reset_at").and_then(Value::as_str) {
            message = format!("{message}; the limit resets at {reset}");
        }
        CliError {
            exit_code,
            code: e.code().to_owned(),
            message,
            detail,
        }
    }
}
