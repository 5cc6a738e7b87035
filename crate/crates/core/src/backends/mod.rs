//! Container lifecycle strategies.
//!
//! A backend turns validated metadata, a job context directory and a user
//! command into a [`CommandSpec`], creating whatever host state it needs
//! along the way (host accounts, long-lived containers). [`Backends`] owns
//! the enabled strategies, the shared accounting of that host state, and the
//! garbage collection of it.

mod accounting;
mod image;
mod local;
pub mod provision;
mod shared;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use crate::clock::Millis;
use crate::executor::CommandSpec;
use crate::model::{ContainerType, JobMetadata, MountSpec};

pub use accounting::{BackendAccounting, ContainerEntry, HostUserKey, Usage};
pub use image::ImagePerJobBackend;
pub use local::LocalSandboxBackend;
pub use provision::{ProvisionCall, Provisioner, RecordingProvisioner};
#[cfg(feature = "live")]
pub use provision::HostProvisioner;
pub use shared::{machine_name, SharedContainerBackend};

/// In-container path of the job context for every backend.
pub const CONTEXT_MOUNT_POINT: &str = "/work";

/// Site identity as seen by the backends.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SiteScope {
    pub site_id: String,
    pub user_prefix: String,
}

impl SiteScope {
    pub fn new(site_id: impl Into<String>, user_prefix: impl Into<String>) -> Self {
        Self {
            site_id: site_id.into(),
            user_prefix: user_prefix.into(),
        }
    }
}

/// Backend state needed to launch jobs for one (site, user, container spec).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreparedEnvironment {
    pub backend_kind: ContainerType,
    pub site_id: String,
    /// Host account (image-per-job) or in-container account (shared).
    pub host_user: Option<String>,
    /// Machine name of the shared container.
    pub container_handle: Option<String>,
    pub context_mount: MountSpec,
    /// Image (image-per-job) or container specification (shared).
    pub image_ref: Option<String>,
}

impl PreparedEnvironment {
    pub fn context_path(&self) -> &Path {
        &self.context_mount.host_path
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("failed to provision user: {0}")]
    UserProvisionFailed(String),
    #[error("failed to start container: {0}")]
    ContainerStartFailed(String),
    #[error("image not available: {0}")]
    ImageMissing(String),
    #[error("backend {0} is not enabled")]
    UnsupportedBackend(ContainerType),
    #[error("command must be non-empty")]
    EmptyCommand,
}

/// Mutable state a backend may touch while preparing.
pub struct PrepareCtx<'a> {
    pub accounting: &'a mut BackendAccounting,
    pub provisioner: &'a dyn Provisioner,
    pub now: Millis,
}

pub trait ContainerBackend: Send + Sync {
    fn kind(&self) -> ContainerType;

    fn prepare(
        &self,
        m: &JobMetadata,
        scope: &SiteScope,
        context: &Path,
        ctx: PrepareCtx<'_>,
    ) -> Result<PreparedEnvironment, BackendError>;

    /// Pure: the same inputs always give the same spec.
    fn build_command(
        &self,
        env: &PreparedEnvironment,
        m: &JobMetadata,
        user_command: &str,
    ) -> Result<CommandSpec, BackendError>;
}

/// Settings shared by all backends.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendConfig {
    /// `PATH` given to every job process.
    pub path_env: String,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            path_env: "/usr/local/bin:/usr/bin:/bin".to_owned(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GcPolicy {
    /// Shared containers with no running job for this long are stopped.
    pub container_idle_ttl: Duration,
    /// Host users with no activity for this long are removed.
    pub user_ttl: Duration,
}

impl Default for GcPolicy {
    fn default() -> Self {
        Self {
            container_idle_ttl: Duration::from_secs(3600),
            user_ttl: Duration::from_secs(7 * 24 * 3600),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Reclaimed {
    Container { spec: String, handle: String },
    HostUser { site: String, name: String },
}

/// The enabled backends plus their shared accounting.
pub struct Backends {
    backends: BTreeMap<ContainerType, Box<dyn ContainerBackend>>,
    accounting: Mutex<BackendAccounting>,
    provisioner: Arc<dyn Provisioner>,
}

impl Backends {
    pub fn new(provisioner: Arc<dyn Provisioner>) -> Self {
        Self {
            backends: BTreeMap::new(),
            accounting: Mutex::new(BackendAccounting::default()),
            provisioner,
        }
    }

    /// All three built-in backends.
    pub fn standard(provisioner: Arc<dyn Provisioner>, config: BackendConfig) -> Self {
        Self::new(provisioner)
            .with(ImagePerJobBackend::new(config.clone()))
            .with(SharedContainerBackend::new(config.clone()))
            .with(LocalSandboxBackend::new(config))
    }

    pub fn with(mut self, backend: impl ContainerBackend + 'static) -> Self {
        self.backends.insert(backend.kind(), Box::new(backend));
        self
    }

    pub fn only(mut self, kinds: &[ContainerType]) -> Self {
        self.backends.retain(|k, _| kinds.contains(k));
        self
    }

    pub fn kinds(&self) -> Vec<ContainerType> {
        self.backends.keys().copied().collect()
    }

    fn get(&self, kind: ContainerType) -> Result<&dyn ContainerBackend, BackendError> {
        self.backends
            .get(&kind)
            .map(|b| b.as_ref())
            .ok_or(BackendError::UnsupportedBackend(kind))
    }

    /// Idempotent per (site, user, container spec).
    pub fn prepare(
        &self,
        m: &JobMetadata,
        scope: &SiteScope,
        context: &Path,
        now: Millis,
    ) -> Result<PreparedEnvironment, BackendError> {
        let backend = self.get(m.container_type)?;
        let mut acct = self.accounting.lock().unwrap();
        let env = backend.prepare(
            m,
            scope,
            context,
            PrepareCtx {
                accounting: &mut acct,
                provisioner: self.provisioner.as_ref(),
                now,
            },
        )?;
        acct.contexts.insert(context.to_path_buf());
        Ok(env)
    }

    pub fn build_command(
        &self,
        env: &PreparedEnvironment,
        m: &JobMetadata,
        user_command: &str,
    ) -> Result<CommandSpec, BackendError> {
        if user_command.trim().is_empty() {
            return Err(BackendError::EmptyCommand);
        }
        self.get(env.backend_kind)?.build_command(env, m, user_command)
    }

    /// Marks the resources behind `env` as used by a running job.
    pub fn acquire(&self, env: &PreparedEnvironment, now: Millis) {
        self.adjust(env, now, |u| u.active_jobs += 1);
    }

    pub fn release(&self, env: &PreparedEnvironment, now: Millis) {
        self.adjust(env, now, |u| u.active_jobs = u.active_jobs.saturating_sub(1));
    }

    fn adjust(&self, env: &PreparedEnvironment, now: Millis, f: impl Fn(&mut Usage)) {
        let mut acct = self.accounting.lock().unwrap();
        if let (ContainerType::ImagePerJob, Some(name)) = (env.backend_kind, &env.host_user) {
            let key = HostUserKey {
                site: env.site_id.clone(),
                name: name.clone(),
            };
            if let Some(u) = acct.user_mut(&key) {
                f(u);
                u.last_used = u.last_used.max(now);
            }
        }
        if env.backend_kind == ContainerType::SharedContainer {
            if let Some(spec) = &env.image_ref {
                if let Some(u) = acct.container_usage_mut(spec) {
                    f(u);
                    u.last_used = u.last_used.max(now);
                }
            }
        }
    }

    /// Drops a context that the job manager has removed.
    pub fn forget_context(&self, path: &Path) {
        self.accounting.lock().unwrap().contexts.remove(path);
    }

    pub fn accounting(&self) -> BackendAccounting {
        self.accounting.lock().unwrap().clone()
    }

    /// Reclaims idle shared containers and host users. Resources with a
    /// running job are never touched; failed removals stay accounted and are
    /// retried on the next sweep.
    pub fn gc(&self, policy: &GcPolicy, now: Millis) -> Vec<Reclaimed> {
        let mut acct = self.accounting.lock().unwrap();
        let mut out = Vec::new();
        for (spec, handle) in acct.idle_containers(policy.container_idle_ttl, now) {
            match self.provisioner.stop_container(&handle) {
                Ok(()) => {
                    acct.containers.remove(&spec);
                    out.push(Reclaimed::Container { spec, handle });
                }
                Err(e) => tracing::warn!(%handle, error = %e, "container stop failed"),
            }
        }
        for key in acct.idle_users(policy.user_ttl, now) {
            match self.provisioner.remove_host_user(&key.name) {
                Ok(()) => {
                    acct.users.remove(&key);
                    out.push(Reclaimed::HostUser {
                        site: key.site,
                        name: key.name,
                    });
                }
                Err(e) => tracing::warn!(user = %key.name, error = %e, "user removal failed"),
            }
        }
        out.sort();
        out
    }
}

fn base_env(config: &BackendConfig) -> BTreeMap<String, String> {
    BTreeMap::from([("PATH".to_owned(), config.path_env.clone())])
}

fn context_mount(context: &Path) -> MountSpec {
    MountSpec::new(context, CONTEXT_MOUNT_POINT, false)
}

fn bind_arg(host: &Path, container: &Path, read_only: bool) -> String {
    let mut s = format!("{}:{}", host.display(), container.display());
    if read_only {
        s.push_str(":ro");
    }
    s
}
