use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use ccrs_core::backends::{BackendConfig, GcPolicy};
use ccrs_core::executor::ExecutionLimits;
use ccrs_core::jobs::JobConfig;
use ccrs_core::model::wire::DEFAULT_NAMESPACE;
use ccrs_core::model::{ContainerType, ServerPolicy};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("environment variable {var}: {message}")]
    Env { var: &'static str, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct GcSettings {
    pub interval_secs: u64,
    pub context_ttl_secs: u64,
    pub session_ttl_secs: u64,
    pub container_idle_ttl_secs: u64,
    pub user_ttl_secs: u64,
}

impl Default for GcSettings {
    fn default() -> Self {
        Self {
            interval_secs: 60,
            context_ttl_secs: 24 * 3600,
            session_ttl_secs: 7 * 24 * 3600,
            container_idle_ttl_secs: 3600,
            user_ttl_secs: 7 * 24 * 3600,
        }
    }
}

/// Server configuration, read from TOML and then overridden by `CCRS_*`
/// environment variables.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct ServerConfig {
    pub listen_address: SocketAddr,
    pub spool_root: PathBuf,
    /// Site registry file. Without one, sites live only in memory.
    pub registry_file: Option<PathBuf>,
    pub log_file: PathBuf,
    pub log_max_bytes: u64,
    pub log_max_files: usize,
    pub enabled_backends: BTreeSet<ContainerType>,
    pub type_namespace: String,
    /// Shared secret for the `/admin` endpoints. Unset disables them.
    pub admin_key: Option<String>,
    /// Directory served under `/static`.
    pub static_dir: Option<PathBuf>,
    pub path_env: String,
    pub bind_roots: Vec<PathBuf>,
    pub allowed_images: Vec<String>,
    pub max_upload_bytes: usize,
    pub max_running_per_user: usize,
    pub max_sessions_per_user: usize,
    /// Take the client address from `X-Forwarded-For` (behind a proxy).
    pub trust_forwarded_for: bool,
    pub defaults: ExecutionLimits,
    pub gc: GcSettings,
    pub image_dir: PathBuf,
    pub container_root: PathBuf,
}

impl Default for ServerConfig {
    fn default() -> Self {
        let jobs = JobConfig::default();
        Self {
            listen_address: SocketAddr::from(([127, 0, 0, 1], 8080)),
            spool_root: jobs.spool_root,
            registry_file: None,
            log_file: PathBuf::from("/tmp/ccrs-audit.log"),
            log_max_bytes: 16 * 1024 * 1024,
            log_max_files: 5,
            enabled_backends: [ContainerType::LocalSandbox].into_iter().collect(),
            type_namespace: DEFAULT_NAMESPACE.to_owned(),
            admin_key: None,
            static_dir: None,
            path_env: BackendConfig::default().path_env,
            bind_roots: Vec::new(),
            allowed_images: Vec::new(),
            max_upload_bytes: 8 * 1024 * 1024,
            max_running_per_user: jobs.max_running_per_user,
            max_sessions_per_user: jobs.max_sessions_per_user,
            trust_forwarded_for: false,
            defaults: ExecutionLimits::default(),
            gc: GcSettings::default(),
            image_dir: PathBuf::from("/var/lib/ccrs/images"),
            container_root: PathBuf::from("/var/lib/machines"),
        }
    }
}

impl ServerConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    /// Applies `CCRS_*` overrides; `lookup` is `std::env::var` in production.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(v) = lookup("CCRS_LISTEN_ADDRESS") {
            self.listen_address = v.parse().map_err(|e| ConfigError::Env {
                var: "CCRS_LISTEN_ADDRESS",
                message: format!("{e}"),
            })?;
        }
        if let Some(v) = lookup("CCRS_SPOOL_ROOT") {
            self.spool_root = v.into();
        }
        if let Some(v) = lookup("CCRS_REGISTRY_FILE") {
            self.registry_file = Some(v.into());
        }
        if let Some(v) = lookup("CCRS_LOG_FILE") {
            self.log_file = v.into();
        }
        if let Some(v) = lookup("CCRS_TYPE_NAMESPACE") {
            self.type_namespace = v;
        }
        if let Some(v) = lookup("CCRS_ADMIN_KEY") {
            self.admin_key = Some(v);
        }
        if let Some(v) = lookup("CCRS_STATIC_DIR") {
            self.static_dir = Some(v.into());
        }
        if let Some(v) = lookup("CCRS_ENABLED_BACKENDS") {
            let mut set = BTreeSet::new();
            for name in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                let kind = ContainerType::from_wire_name(name).ok_or_else(|| ConfigError::Env {
                    var: "CCRS_ENABLED_BACKENDS",
                    message: format!("unknown backend {name:?}"),
                })?;
                set.insert(kind);
            }
            self.enabled_backends = set;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if !self.spool_root.is_absolute() {
            return invalid(format!("spoolRoot {} is not absolute", self.spool_root.display()));
        }
        if self.enabled_backends.is_empty() {
            return invalid("at least one backend must be enabled".into());
        }
        if self.type_namespace.trim().is_empty() {
            return invalid("typeNamespace must be non-empty".into());
        }
        if self.admin_key.as_deref() == Some("") {
            return invalid("adminKey must be non-empty when set".into());
        }
        if self.max_upload_bytes == 0 || self.max_running_per_user == 0 {
            return invalid("maxUploadBytes and maxRunningPerUser must be positive".into());
        }
        if self.gc.interval_secs == 0 {
            return invalid("gc.intervalSecs must be positive".into());
        }
        if let Some(bad) = self.bind_roots.iter().find(|p| !p.is_absolute()) {
            return invalid(format!("bind root {} is not absolute", bad.display()));
        }
        self.defaults
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("defaults: {e}")))
    }

    pub fn job_config(&self) -> JobConfig {
        JobConfig {
            spool_root: self.spool_root.clone(),
            context_ttl: Duration::from_secs(self.gc.context_ttl_secs),
            session_ttl: Duration::from_secs(self.gc.session_ttl_secs),
            max_running_per_user: self.max_running_per_user,
            max_sessions_per_user: self.max_sessions_per_user,
            default_limits: self.defaults,
            policy: ServerPolicy {
                allowed_images: self.allowed_images.clone(),
                bind_roots: self.bind_roots.clone(),
                enabled_backends: self.enabled_backends.clone(),
            },
            gc: GcPolicy {
                container_idle_ttl: Duration::from_secs(self.gc.container_idle_ttl_secs),
                user_ttl: Duration::from_secs(self.gc.user_ttl_secs),
            },
        }
    }

    pub fn backend_config(&self) -> BackendConfig {
        BackendConfig {
            path_env: self.path_env.clone(),
        }
    }
}
