//! Connection settings, resolved from flags, then the environment, then a
//! config file.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::Deserialize;

pub const DEFAULT_API_URL: &str = "http://127.0.0.1:8080";
pub const ENV_API_URL: &str = "GAUNTLET_API_URL";
pub const ENV_TOKEN: &str = "GAUNTLET_TOKEN";
pub const ENV_CONFIG: &str = "GAUNTLET_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Table,
    Json,
}

/// A bearer token that never appears in `Debug` or `Display` output.
#[derive(Clone, PartialEq, Eq)]
pub struct Secret(String);

impl Secret {
    pub fn new(token: impl Into<String>) -> Self {
        Self(token.into())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Secret(<redacted>)")
    }
}

impl fmt::Display for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("<redacted>")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub api_url: String,
    pub token: Option<Secret>,
    pub format: Format,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    api_url: Option<String>,
    token: Option<String>,
    format: Option<Format>,
}

/// Values supplied on the command line or through the environment.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub api_url: Option<String>,
    pub token: Option<String>,
    pub format: Option<Format>,
    pub config_path: Option<PathBuf>,
}

/// `$GAUNTLET_CONFIG`, else `~/.config/gauntlet/config.toml`.
pub fn default_config_path() -> Option<PathBuf> {
    if let Some(p) = std::env::var_os(ENV_CONFIG) {
        return Some(PathBuf::from(p));
    }
    std::env::var_os("HOME").map(|home| Path::new(&home).join(".config/gauntlet/config.toml"))
}

impl CliConfig {
    /// Fills every field not given in `overrides` from the config file. A
    /// missing file is fine; an unreadable or malformed one is an error.
    pub fn resolve(overrides: Overrides) -> Result<Self, String> {
        let path = overrides.config_path.clone().or_else(default_config_path);
        let file = match path {
            Some(path) if path.exists() => {
                let text = std::fs::read_to_string(&path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
                toml::from_str::<FileConfig>(&text).map_err(|e| format!("invalid config {}: {}", path.display(), e.message()))?
            }
            Some(path) if overrides.config_path.is_some() => {
                return Err(format!("config file {} does not exist", path.display()));
            }
            _ => FileConfig::default(),
        };
        let api_url = overrides
            .api_url
            .or(file.api_url)
            .unwrap_or_else(|| DEFAULT_API_URL.to_owned());
        Ok(Self {
            api_url: api_url.trim_end_matches('/').to_owned(),
            token: overrides.token.or(file.token).filter(|t| !t.is_empty()).map(Secret::new),
            format: overrides.format.or(file.format).unwrap_or_default(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        std::io::Write::write_all(&mut f, text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn flags_beat_file() {
        let f = file("api_url = \"http://file:1\"\ntoken = \"file-token\"\nformat = \"json\"\n");
        let cfg = CliConfig::resolve(Overrides {
            api_url: Some("http://flag:2/".into()),
            config_path: Some(f.path().into()),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(cfg.api_url, "http://flag:2");
        assert_eq!(cfg.token, Some(Secret::new("file-token")));
        assert_eq!(cfg.format, Format::Json);
    }

    #[test]
    fn defaults_without_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("none.toml");
        let cfg = CliConfig::resolve(Overrides {
            config_path: None,
            ..Default::default()
        });
        assert!(cfg.is_ok());
        let err = CliConfig::resolve(Overrides {
            config_path: Some(missing),
            ..Default::default()
        })
        .unwrap_err();
        assert!(err.contains("does not exist"));
    }

    #[test]
    fn malformed_file_is_reported_without_its_contents() {
        let f = file("token = \"super-secret-value\"\nbogus = 1\n");
        let err = CliConfig::resolve(Overrides {
            config_path: Some(f.path().into()),
            ..Default::default()
        })
        .unwrap_err();
        assert!(!err.contains("super-secret-value"), "{err}");
    }

    #[test]
    fn token_is_redacted() {
        let cfg = CliConfig {
            api_url: DEFAULT_API_URL.into(),
            token: Some(Secret::new("tok-123456789")),
            format: Format::Table,
        };
        let shown = format!("{cfg:?} {}", cfg.token.as_ref().unwrap());
        assert!(!shown.contains("tok-123456789"));
    }
}
