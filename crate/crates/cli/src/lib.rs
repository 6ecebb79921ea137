//! The `gauntlet` command-line client.
//!
//! Exit codes: 0 success, 1 bundle violations, 2 bad input, 3 rate limited,
//! 4 phase closed, 5 evaluation failed, 6 authentication refused, 7 any
//! other API or transport error.

pub mod client;
pub mod config;
pub mod exit;
pub mod remote_worker;
pub mod serve;

use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use gauntlet_core::model::{config_notices, parse_bundle, BundleError};

use client::Client;
use config::{CliConfig, Format, Overrides};
use exit::CliError;

#[derive(Debug, Parser)]
#[command(name = "gauntlet", version, about = "Client for the gauntlet challenge platform")]
pub struct Cli {
    /// API base URL.
    #[arg(long, global = true, env = config::ENV_API_URL)]
    pub api_url: Option<String>,
    /// API token.
    #[arg(long, global = true, env = config::ENV_TOKEN, hide_env_values = true)]
    pub token: Option<String>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    /// Config file (TOML with api_url, token, format).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a challenge bundle locally.
    Lint { bundle: PathBuf },
    /// Upload a challenge bundle.
    CreateChallenge { bundle: PathBuf },
    /// Upload a submission artifact.
    Submit {
        #[arg(long)]
        challenge: String,
        #[arg(long)]
        phase: String,
        /// `predictions` or `agent`; defaults to what the challenge accepts.
        #[arg(long)]
        kind: Option<String>,
        /// Poll until the submission reaches a terminal status.
        #[arg(long)]
        watch: bool,
        #[arg(long, default_value_t = 1000)]
        poll_interval_ms: u64,
        /// Give up watching after this many seconds.
        #[arg(long)]
        watch_timeout_secs: Option<u64>,
        artifact: PathBuf,
    },
    /// Show one submission.
    Status { submission: String },
    /// Show a ranked leaderboard.
    Leaderboard {
        #[arg(long)]
        challenge: String,
        #[arg(long)]
        phase: String,
        #[arg(long)]
        split: String,
    },
    /// Evaluate a remote challenge's submissions on this machine.
    RemoteWorker {
        /// Evaluator entrypoint.
        #[arg(long)]
        evaluator: PathBuf,
        /// Directory of `<split>.json` annotation files.
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        challenge: Option<String>,
        #[arg(long, default_value_t = 1)]
        parallelism: usize,
        /// Stop once no submission is waiting.
        #[arg(long)]
        exit_when_idle: bool,
    },
    /// Human evaluation report for a submission (hosts only).
    HitlReport { submission: String },
    /// Run the platform server.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        /// JSON file of teams, members and tokens.
        #[arg(long)]
        accounts: PathBuf,
        #[arg(long)]
        hitl_journal: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        local_workers: usize,
        #[arg(long)]
        artifact_limit: Option<u64>,
    },
}

/// A command's result: a JSON document and its table rendering.
pub struct Output {
    pub json: Value,
    pub table: String,
    pub exit_code: i32,
}

impl Output {
    fn ok(json: Value, table: String) -> Self {
        Self { json, table, exit_code: exit::OK }
    }
}

/// Parses `args` and runs the command, writing to `out` and `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::BAD_INPUT } else { exit::OK };
            let _ = if code == 0 { write!(out, "{e}") } else { write!(err, "{e}") };
            return code;
        }
    };
    let overrides = Overrides {
        api_url: cli.api_url.clone(),
        token: cli.token.clone(),
        format: cli.format,
        config_path: cli.config.clone(),
    };
    let format = cli.format.unwrap_or_default();
    let config = match CliConfig::resolve(overrides) {
        Ok(c) => c,
        Err(m) => return report(format, CliError::bad_input(m), out, err),
    };
    match execute(cli.command, &config) {
        Ok(output) => {
            match config.format {
                Format::Json => {
                    let _ = writeln!(out, "{}", output.json);
                }
                Format::Table => {
                    let _ = write!(out, "{}", output.table);
                }
            }
            output.exit_code
        }
        Err(e) => report(config.format, e, out, err),
    }
}

fn report(format: Format, e: CliError, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    match format {
        Format::Json => {
            let _ = writeln!(out, "{}", e.to_json());
        }
        Format::Table => {
            let _ = writeln!(err, "error: {}", e.message);
            if let Some(violations) = e.detail.get("violations").and_then(Value::as_array) {
                for v in violations {
                    let _ = writeln!(err, "  {}: {}", v["path"].as_str().unwrap_or(""), v["message"].as_str().unwrap_or(""));
                }
            }
        }
    }
    e.exit_code
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::bad_input(format!("cannot read {}: {e}", path.display())))
}

fn client(config: &CliConfig) -> Client {
    Client::new(&config.api_url, config.token.clone())
}

fn execute(command: Command, config: &CliConfig) -> Result<Output, CliError> {
    match command {
        Command::Lint { bundle } => lint(&bundle),
        Command::CreateChallenge { bundle } => {
            let data = read_file(&bundle)?;
            let reply = client(config).post_bytes("/challenges", &data)?;
            let id = reply.body["id"].as_str().unwrap_or_default().to_owned();
            let table = format!("created challenge {id}\n");
            Ok(Output::ok(reply.body, table))
        }
        Command::Submit {
            challenge,
            phase,
            kind,
            watch,
            poll_interval_ms,
            watch_timeout_secs,
            artifact,
        } => {
            let data = read_file(&artifact)?;
            let mut path = format!("/challenges/{challenge}/phases/{phase}/submissions");
            if let Some(kind) = kind {
                path.push_str(&format!("?kind={kind}"));
            }
            let api = client(config);
            let reply = api.post_bytes(&path, &data)?;
            let submission = reply.body["submission"].clone();
            let id = submission["id"].as_str().unwrap_or_default().to_owned();
            if !watch {
                let table = format!("{id}\n");
                return Ok(Output::ok(reply.body, table));
            }
            let deadline = watch_timeout_secs.map(|s| Instant::now() + Duration::from_secs(s));
            watch_submission(&api, &id, Duration::from_millis(poll_interval_ms), deadline)
        }
        Command::Status { submission } => {
            let view = client(config).get(&format!("/submissions/{submission}"))?.body;
            let code = status_exit(&view);
            Ok(Output {
                table: render_submission(&view),
                json: view,
                exit_code: code,
            })
        }
        Command::Leaderboard { challenge, phase, split } => {
            let path = format!("/challenges/{challenge}/leaderboard?phase={phase}&split={split}");
            let body = client(config).get(&path)?.body;
            Ok(Output::ok(body.clone(), render_board(&body)))
        }
        Command::RemoteWorker {
            evaluator,
            annotations,
            challenge,
            parallelism,
            exit_when_idle,
        } => {
            if config.token.is_none() {
                return Err(CliError::new(exit::AUTH, "unauthenticated", "a worker token is required"));
            }
            let mut opts = remote_worker::WorkerOptions::new(evaluator);
            opts.annotations = annotations;
            opts.challenge = challenge;
            opts.parallelism = parallelism;
            opts.exit_when_idle = exit_when_idle;
            let stop = Arc::new(AtomicBool::new(false));
            let stats = remote_worker::run(&client(config), &opts, &stop)?;
            let json = json!({
                "evaluated": stats.evaluated, "failed": stats.failed,
                "duplicates": stats.duplicates, "expired": stats.expired
            });
            let table = format!(
                "evaluated {} failed {} duplicates {} expired {}\n",
                stats.evaluated, stats.failed, stats.duplicates, stats.expired
            );
            Ok(Output::ok(json, table))
        }
        Command::HitlReport { submission } => {
            let body = client(config).get(&format!("/hitl/submissions/{submission}/report"))?.body;
            Ok(Output::ok(body.clone(), render_hitl(&body)))
        }
        Command::Serve {
            bind,
            accounts,
            hitl_journal,
            local_workers,
            artifact_limit,
        } => {
            let _ = tracing_subscriber::fmt()
                .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
                .with_writer(std::io::stderr)
                .try_init();
            serve::run(serve::ServeOptions {
                bind,
                accounts,
                hitl_journal,
                local_workers,
                artifact_limit,
            })?;
            Ok(Output::ok(json!({"stopped": true}), String::new()))
        }
    }
}

fn lint(path: &Path) -> Result<Output, CliError> {
    let data = read_file(path)?;
    match parse_bundle(&data) {
        Ok(parsed) => {
            let notices: Vec<Value> = config_notices(&parsed.config)
                .iter()
                .map(|n| json!({"path": n.path, "message": n.message}))
                .collect();
            let mut table = format!("{}: ok\n", parsed.config.id);
            for n in config_notices(&parsed.config) {
                table.push_str(&format!("notice {n}\n"));
            }
            Ok(Output::ok(
                json!({"valid": true, "challenge_id": parsed.config.id, "violations": [], "notices": notices}),
                table,
            ))
        }
        Err(BundleError::SchemaError { violations }) => {
            let list: Vec<Value> = violations.iter().map(|v| json!({"path": v.path, "message": v.message})).collect();
            let table: String = violations.iter().map(|v| format!("{v}\n")).collect();
            Ok(Output {
                json: json!({"valid": false, "violations": list}),
                table,
                exit_code: exit::VIOLATIONS,
            })
        }
        Err(e) => Err(CliError::bad_input(e.to_string())),
    }
}

const TERMINAL: [&str; 3] = ["finished", "failed", "cancelled"];

fn status_exit(view: &Value) -> i32 {
    match view["status"].as_str() {
        Some("failed" | "cancelled") => exit::FAILED,
        _ => exit::OK,
    }
}

fn watch_submission(api: &Client, id: &str, every: Duration, deadline: Option<Instant>) -> Result<Output, CliError> {
    loop {
        let view = api.get(&format!("/submissions/{id}"))?.body;
        if view["status"].as_str().is_some_and(|s| TERMINAL.contains(&s)) {
            return Ok(Output {
                table: render_submission(&view),
                exit_code: status_exit(&view),
                json: view,
            });
        }
        if deadline.is_some_and(|d| Instant::now() >= d) {
            return Err(CliError::new(exit::API, "watch_timeout", format!("submission {id} is still {}", view["status"]))
                .with_detail(json!({"submission": view})));
        }
        std::thread::sleep(every);
    }
}

fn metric_line(metrics: &Value) -> String {
    metrics
        .as_object()
        .map(|m| m.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" "))
        .unwrap_or_default()
}

fn render_submission(view: &Value) -> String {
    let mut s = format!(
        "{}  {}  phase={}  team={}\n",
        view["id"].as_str().unwrap_or(""),
        view["status"].as_str().unwrap_or(""),
        view["phase"].as_str().unwrap_or(""),
        view["team_id"].as_str().unwrap_or("")
    );
    if let Some(results) = view["results"].as_object() {
        for (split, metrics) in results {
            s.push_str(&format!("  {split}: {}\n", metric_line(metrics)));
        }
    }
    if let Some(log) = view["log_excerpt"].as_str() {
        s.push_str("log:\n");
        for line in log.lines() {
            s.push_str(&format!("  {line}\n"));
        }
    }
    s
}

fn render_board(body: &Value) -> String {
    let entries = body["entries"].as_array().cloned().unwrap_or_default();
    if entries.is_empty() {
        return "no entries\n".to_owned();
    }
    entries
        .iter()
        .map(|e| format!("{:>4}  {:<20}  {}\n", e["rank"], e["team"].as_str().unwrap_or(""), metric_line(&e["metrics"])))
        .collect()
}

fn render_hitl(body: &Value) -> String {
    let sessions = body["sessions"].as_array().map_or(0, Vec::len);
    let mut s = format!(
        "{}: {} of {} sessions completed\n",
        body["submission_id"].as_str().unwrap_or(""),
        body["completed_sessions"],
        sessions
    );
    s.push_str(&format!("  {}\n", metric_line(&body["aggregate"])));
    s
}
