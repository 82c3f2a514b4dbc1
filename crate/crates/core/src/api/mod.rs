//! The HTTP service surface of the control plane.

mod client;
mod router;
mod server;

pub use client::{ApiClient, ClientError};
pub use router::{Api, ApiError, ApiRequest, ApiResponse};
pub use server::{serve, HttpServer};

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, SystemClock};
use crate::control::ControlPlane;
use crate::deploy::{
    Connector, CredentialStore, MemoryConnector, SimNetwork, SshConnector, DEFAULT_BASE_DIR,
};
use crate::model::validate_address;
use crate::store::{JournalBackend, Store, StoreError};
use crate::telemetry::{HttpActionClient, LogNotifier, Notifier, WebhookNotifier};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file {0} not found")]
    Missing(PathBuf),
    #[error("cannot read {path}: {reason}")]
    Unreadable { path: PathBuf, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Storage(#[from] StoreError),
}

/// How the control plane reaches devices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    #[default]
    Ssh,
    /// In-process simulated devices, created on first contact.
    Simulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    pub storage_path: PathBuf,
    #[serde(default)]
    pub credentials_path: Option<PathBuf>,
    #[serde(default)]
    pub notifier_url: Option<String>,
    pub admin_token: String,
    #[serde(default = "default_base_dir")]
    pub base_dir: String,
    #[serde(default)]
    pub transport: TransportKind,
    #[serde(default = "default_ssh_user")]
    pub ssh_user: String,
    #[serde(default = "default_ssh_port")]
    pub ssh_port: u16,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

fn default_base_dir() -> String {
    DEFAULT_BASE_DIR.into()
}

fn default_ssh_user() -> String {
    "pi".into()
}

fn default_ssh_port() -> u16 {
    22
}

fn default_workers() -> usize {
    4
}

/// Parses a JSON or TOML document, chosen by the file extension.
pub(crate) fn parse_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    if !path.exists() {
        return Err(ConfigError::Missing(path.to_owned()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Unreadable {
        path: path.to_owned(),
        reason: e.to_string(),
    })?;
    let is_toml = path.extension().is_some_and(|e| e == "toml");
    if is_toml {
        toml::from_str(&text).map_err(|e| ConfigError::Invalid(e.to_string()))
    } else {
        serde_json::from_str(&text).map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

impl ApiConfig {
    /// Loads a config file and applies `FNFLEET_*` environment overrides.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let mut config: ApiConfig = parse_config(path)?;
        config.apply_overrides(|key| std::env::var(key).ok());
        config.validate()?;
        Ok(config)
    }

    pub fn apply_overrides(&mut self, var: impl Fn(&str) -> Option<String>) {
        if let Some(listen) = var("FNFLEET_LISTEN") {
            self.listen = listen;
        }
        if let Some(storage) = var("FNFLEET_STORAGE") {
            self.storage_path = storage.into();
        }
        if let Some(token) = var("FNFLEET_ADMIN_TOKEN") {
            self.admin_token = token;
        }
        if let Some(url) = var("FNFLEET_NOTIFIER_URL") {
            self.notifier_url = Some(url);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        validate_address(&self.listen)
            .map_err(|e| ConfigError::Invalid(format!("listen address: {e}")))?;
        if self.admin_token.trim().is_empty() {
            return Err(ConfigError::Invalid("admin token must not be empty".into()));
        }
        if self.workers == 0 {
            return Err(ConfigError::Invalid("workers must be at least 1".into()));
        }
        Ok(())
    }

    /// Opens the journal under `storage_path` and builds the control plane.
    pub fn open_control_plane(&self) -> Result<ControlPlane, ConfigError> {
        std::fs::create_dir_all(&self.storage_path).map_err(|e| ConfigError::Unreadable {
            path: self.storage_path.clone(),
            reason: e.to_string(),
        })?;
        let store = Store::open(Box::new(JournalBackend::open(&self.storage_path, true)?))?;
        let connector: Arc<dyn Connector> = match self.transport {
            TransportKind::Ssh => {
                let credentials = match &self.credentials_path {
                    Some(path) => {
                        CredentialStore::load(path).map_err(|e| ConfigError::Unreadable {
                            path: path.clone(),
                            reason: e.to_string(),
                        })?
                    }
                    None => CredentialStore::default(),
                };
                Arc::new(SshConnector::new(
                    credentials,
                    &self.ssh_user,
                    self.ssh_port,
                ))
            }
            TransportKind::Simulated => Arc::new(MemoryConnector::provisioning(
                Arc::new(SimNetwork::new()),
                &["python", "python3", "sh"],
            )),
        };
        let notifier: Arc<dyn Notifier> = match &self.notifier_url {
            Some(url) => Arc::new(WebhookNotifier::new(url)),
            None => Arc::new(LogNotifier),
        };
        let clock: Arc<dyn Clock> = Arc::new(SystemClock);
        Ok(ControlPlane::open(
            store,
            clock,
            connector,
            &self.base_dir,
            Arc::new(HttpActionClient::new()),
            notifier,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_json_configs() {
        let dir = tempfile::tempdir().unwrap();
        let toml_path = dir.path().join("plane.toml");
        std::fs::write(
            &toml_path,
            "listen = \"0.0.0.0:8080\"\nstorage_path = \"/var/lib/fnfleet\"\nadmin_token = \"t\"\n",
        )
        .unwrap();
        let config: ApiConfig = parse_config(&toml_path).unwrap();
        assert_eq!(config.listen, "0.0.0.0:8080");
        assert_eq!(config.base_dir, "/opt/fnfleet");
        assert_eq!(config.transport, TransportKind::Ssh);

        let json_path = dir.path().join("plane.json");
        std::fs::write(
            &json_path,
            r#"{"storage_path": "/tmp/x", "admin_token": "t", "transport": "simulated"}"#,
        )
        .unwrap();
        let config: ApiConfig = parse_config(&json_path).unwrap();
        assert_eq!(config.listen, "127.0.0.1:8080");
        assert_eq!(config.transport, TransportKind::Simulated);
    }

    #[test]
    fn missing_and_invalid_configs() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            ApiConfig::load(&dir.path().join("missing.toml")),
            Err(ConfigError::Missing(_))
        ));
        let path = dir.path().join("bad.json");
        std::fs::write(&path, r#"{"storage_path": "/tmp/x", "admin_token": ""}"#).unwrap();
        let mut config: ApiConfig = parse_config(&path).unwrap();
        assert!(config.validate().is_err());
        config.admin_token = "x".into();
        config.listen = "nowhere".into();
        assert!(config.validate().is_err());
    }

    #[test]
    fn environment_overrides() {
        let mut config = ApiConfig {
            listen: default_listen(),
            storage_path: "/a".into(),
            credentials_path: None,
            notifier_url: None,
            admin_token: "file".into(),
            base_dir: default_base_dir(),
            transport: TransportKind::Ssh,
            ssh_user: default_ssh_user(),
            ssh_port: 22,
            workers: 1,
        };
        config.apply_overrides(|key| match key {
            "FNFLEET_LISTEN" => Some("0.0.0.0:9999".into()),
            "FNFLEET_STORAGE" => Some("/b".into()),
            "FNFLEET_ADMIN_TOKEN" => Some("env".into()),
            "FNFLEET_NOTIFIER_URL" => Some("http://hook/x".into()),
            _ => None,
        });
        assert_eq!(config.listen, "0.0.0.0:9999");
        assert_eq!(config.storage_path, PathBuf::from("/b"));
        assert_eq!(config.admin_token, "env");
        assert_eq!(config.notifier_url.as_deref(), Some("http://hook/x"));
    }
}
