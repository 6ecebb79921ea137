//! Blocking HTTP client for the platform API.

use std::io::Read;
use std::time::Duration;

use serde::Serialize;
use serde_json::Value;

use crate::config::Secret;

#[derive(Debug, Clone, PartialEq)]
pub enum ClientError {
    /// The server answered with an error envelope.
    Api { status: u16, code: String, message: String, detail: Value },
    /// The request never produced an HTTP response.
    Transport(String),
}

impl ClientError {
    pub fn code(&self) -> &str {
        match self {
            ClientError::Api { code, .. } => code,
            ClientError::Transport(_) => "transport",
        }
    }
}

impl std::fmt::Display for ClientError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClientError::Api { status, message, .. } => write!(f, "{message} (HTTP {status})"),
            ClientError::Transport(m) => write!(f, "cannot reach the API: {m}"),
        }
    }
}

impl std::error::Error for ClientError {}

/// A successful response: status and decoded body (`Null` when empty).
#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub status: u16,
    pub body: Value,
}

#[derive(Clone)]
pub struct Client {
    base: String,
    token: Option<Secret>,
    agent: ureq::Agent,
}

impl Client {
    pub fn new(base: &str, token: Option<Secret>) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout_connect(Duration::from_secs(10))
            .timeout(Duration::from_secs(300))
            .build();
        Self {
            base: base.trim_end_matches('/').to_owned(),
            token,
            agent,
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn request(&self, method: &str, path: &str) -> ureq::Request {
        let req = self.agent.request(method, &format!("{}{path}", self.base));
        match &self.token {
            Some(t) => req.set("Authorization", &format!("Bearer {}", t.expose())),
            None => req,
        }
    }

    pub fn get(&self, path: &str) -> Result<Reply, ClientError> {
        finish(self.request("GET", path).call())
    }

    pub fn send_json<T: Serialize>(&self, method: &str, path: &str, body: &T) -> Result<Reply, ClientError> {
        finish(self.request(method, path).send_json(body))
    }

    pub fn post_bytes(&self, path: &str, data: &[u8]) -> Result<Reply, ClientError> {
        finish(
            self.request("POST", path)
                .set("Content-Type", "application/octet-stream")
                .send_bytes(data),
        )
    }

    /// Raw bytes of a download.
    pub fn get_bytes(&self, path: &str) -> Result<Vec<u8>, ClientError> {
        match self.request("GET", path).call() {
            Ok(resp) => {
                let mut out = Vec::new();
                resp.into_reader()
                    .read_to_end(&mut out)
                    .map_err(|e| ClientError::Transport(e.to_string()))?;
                Ok(out)
            }
            Err(e) => Err(error_of(e)),
        }
    }
}

fn finish(result: Result<ureq::Response, ureq::Error>) -> Result<Reply, ClientError> {
    match result {
        Ok(resp) => {
            let status = resp.status();
            let text = resp.into_string().map_err(|e| ClientError::Transport(e.to_string()))?;
            let body = if text.trim().is_empty() {
                Value::Null
            } else {
                serde_json::from_str(&text).map_err(|e| ClientError::Transport(format!("unreadable response: {e}")))?
            };
            Ok(Reply { status, body })
        }
        Err(e) => Err(error_of(e)),
    }
}

fn error_of(e: ureq::Error) -> ClientError {
    match e {
        ureq::Error::Status(status, resp) => {
            let body: Value = resp.into_json().unwrap_or(Value::Null);
            let error = &body["error"];
            ClientError::Api {
                status,
                code: error["code"].as_str().unwrap_or("http_error").to_owned(),
                message: error["message"].as_str().map_or_else(|| format!("HTTP {status}"), str::to_owned),
                detail: error.clone(),
            }
        }
        ureq::Error::Transport(t) => ClientError::Transport(match t.message() {
            Some(m) => format!("{}: {m}", t.kind()),
            None => t.kind().to_string(),
        }),
    }
}
