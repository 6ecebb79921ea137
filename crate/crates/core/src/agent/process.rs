//! Line-delimited JSON conversation with a sandboxed child process.

use std::io::{Read, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde_json::Value;

use crate::sandbox::Sandbox;

pub const MAX_LINE_BYTES: usize = 1024 * 1024;
const STDERR_KEEP: usize = 16 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LineError {
    #[error("no reply within the deadline")]
    Timeout,
    #[error("process closed its output")]
    Closed,
    #[error("reply line exceeds {MAX_LINE_BYTES} bytes")]
    TooLong,
    #[error("reply is not valid JSON: {0}")]
    Invalid(String),
    #[error("could not write to process: {0}")]
    Write(String),
}

enum Event {
    Line(Vec<u8>),
    TooLong,
    Closed,
}

/// A running process exchanging one JSON document per line.
pub struct LineProcess {
    sandbox: Sandbox,
    child: Child,
    stdin: Option<ChildStdin>,
    lines: mpsc::Receiver<Event>,
    stderr: Arc<Mutex<Vec<u8>>>,
    dead: bool,
    scratch: Option<tempfile::TempDir>,
}

impl LineProcess {
    pub fn spawn(sandbox: Sandbox, mut cmd: Command) -> std::io::Result<Self> {
        cmd.stdin(Stdio::piped()).stdout(Stdio::piped()).stderr(Stdio::piped());
        let mut child = cmd.spawn()?;
        let stdin = child.stdin.take();
        let mut stdout = child.stdout.take().expect("piped stdout");
        let mut stderr_pipe = child.stderr.take().expect("piped stderr");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let mut pending = Vec::new();
            let mut chunk = [0u8; 64 * 1024];
            loop {
                let n = match stdout.read(&mut chunk) {
                    Ok(0) | Err(_) => {
                        let _ = tx.send(Event::Closed);
                        return;
                    }
                    Ok(n) => n,
                };
                pending.extend_from_slice(&chunk[..n]);
                while let Some(pos) = pending.iter().position(|&b| b == b'\n') {
                    let line: Vec<u8> = pending.drain(..=pos).collect();
                    if tx.send(Event::Line(line)).is_err() {
                        return;
                    }
                }
                if pending.len() > MAX_LINE_BYTES {
                    let _ = tx.send(Event::TooLong);
                    return;
                }
            }
        });
        let stderr = Arc::new(Mutex::new(Vec::new()));
        let sink = Arc::clone(&stderr);
        std::thread::spawn(move || {
            let mut chunk = [0u8; 4096];
            while let Ok(n) = stderr_pipe.read(&mut chunk) {
                if n == 0 {
                    break;
                }
                let mut buf = sink.lock().unwrap();
                let room = STDERR_KEEP.saturating_sub(buf.len());
                buf.extend_from_slice(&chunk[..n.min(room)]);
            }
        });
        Ok(Self {
            sandbox,
            child,
            stdin,
            lines: rx,
            stderr,
            dead: false,
            scratch: None,
        })
    }

    pub fn send(&mut self, frame: &Value) -> Result<(), LineError> {
        let stdin = self.stdin.as_mut().ok_or(LineError::Closed)?;
        let mut line = serde_json::to_vec(frame).expect("frames serialize");
        line.push(b'\n');
        stdin
            .write_all(&line)
            .and_then(|_| stdin.flush())
            .map_err(|e| LineError::Write(e.to_string()))
    }

    /// Next JSON line, waiting until `deadline` at most.
    pub fn recv(&mut self, deadline: Instant) -> Result<Value, LineError> {
        if self.dead {
            return Err(LineError::Closed);
        }
        let wait = deadline.saturating_duration_since(Instant::now());
        match self.lines.recv_timeout(wait) {
            Ok(Event::Line(line)) => serde_json::from_slice(&line).map_err(|e| LineError::Invalid(e.to_string())),
            Ok(Event::TooLong) => {
                self.dead = true;
                Err(LineError::TooLong)
            }
            Ok(Event::Closed) | Err(mpsc::RecvTimeoutError::Disconnected) => {
                self.dead = true;
                Err(LineError::Closed)
            }
            Err(mpsc::RecvTimeoutError::Timeout) => Err(LineError::Timeout),
        }
    }

    pub fn recv_within(&mut self, timeout: Duration) -> Result<Value, LineError> {
        self.recv(Instant::now() + timeout)
    }

    /// Captured stderr so far (bounded).
    pub fn stderr(&self) -> String {
        // Give the reader a moment to drain what a dying process wrote.
        std::thread::sleep(Duration::from_millis(20));
        String::from_utf8_lossy(&self.stderr.lock().unwrap()).into_owned()
    }

    /// Keeps `dir` alive for as long as this process handle.
    pub fn hold(&mut self, dir: tempfile::TempDir) {
        self.scratch = Some(dir);
    }

    pub fn sandbox(&self) -> &Sandbox {
        &self.sandbox
    }

    pub fn kill(&mut self) {
        self.stdin.take();
        let pid = self.child.id() as i32;
        unsafe {
            libc::kill(-pid, libc::SIGKILL);
            libc::kill(pid, libc::SIGKILL);
        }
        self.sandbox.kill_all();
        let _ = self.child.wait();
        self.dead = true;
    }
}

impl Drop for LineProcess {
    fn drop(&mut self) {
        self.kill();
    }
}
