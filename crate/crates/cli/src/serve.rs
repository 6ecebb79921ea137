//! Runs the platform in-process behind the HTTP server.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;

use gauntlet_core::api::{Platform, PlatformSettings, Principal};
use gauntlet_core::hitl::HitlSettings;
use gauntlet_core::queue::{Broker, BrokerConfig};
use gauntlet_core::{AccountId, MemoryBlobStore, SystemClock, TeamId};

use crate::exit::CliError;

/// Teams, their members and each member's API token.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Accounts {
    pub teams: Vec<TeamSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeamSpec {
    pub id: String,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub members: Vec<MemberSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberSpec {
    pub account: String,
    pub token: String,
}

pub struct ServeOptions {
    pub bind: SocketAddr,
    pub accounts: PathBuf,
    pub hitl_journal: Option<PathBuf>,
    pub local_workers: usize,
    pub artifact_limit: Option<u64>,
}

pub fn load_accounts(path: &Path) -> Result<Accounts, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::bad_input(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::bad_input(format!("invalid accounts file {}: {e}", path.display())))
}

/// A platform on the system clock with `accounts` registered.
pub fn build_platform(accounts: &Accounts, settings: PlatformSettings) -> Result<Arc<Platform>, CliError> {
    let clock = Arc::new(SystemClock);
    let broker = Arc::new(Broker::new(clock.clone(), BrokerConfig::default()));
    let platform = Platform::new(clock, Arc::new(MemoryBlobStore::new()), broker, settings);
    for team in &accounts.teams {
        let id = TeamId::new(team.id.clone());
        let bad = |e: gauntlet_core::api::ApiError| CliError::bad_input(format!("team {}: {e}", team.id));
        platform.create_team(id.clone(), team.name.as_deref().unwrap_or(&team.id)).map_err(bad)?;
        for member in &team.members {
            let account = AccountId::new(member.account.clone());
            platform.create_account(account.clone(), &id).map_err(bad)?;
            platform.adopt_token(&member.token, Principal::User(account)).map_err(bad)?;
        }
    }
    Ok(platform)
}

pub fn run(opts: ServeOptions) -> Result<(), CliError> {
    let accounts = load_accounts(&opts.accounts)?;
    let mut settings = PlatformSettings {
        local_workers: opts.local_workers,
        hitl: HitlSettings {
            journal_path: opts.hitl_journal,
            ..Default::default()
        },
        ..Default::default()
    };
    if let Some(limit) = opts.artifact_limit {
        settings.artifact_limit_bytes = limit;
    }
    let platform = build_platform(&accounts, settings)?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::new(crate::exit::API, "runtime", e.to_string()))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(opts.bind)
            .await
            .map_err(|e| CliError::bad_input(format!("cannot bind {}: {e}", opts.bind)))?;
        tracing::info!(addr = %opts.bind, "listening");
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        gauntlet_server::serve(platform, listener, Duration::from_secs(15), shutdown)
            .await
            .map_err(|e| CliError::new(crate::exit::API, "server", e.to_string()))
    })
}
