//! HTTP facade over the job manager and site registry.
//!
//! Routes live in [`router`]; [`build_state`] wires the services from a
//! [`ServerConfig`] and [`spawn_maintenance`] runs periodic garbage
//! collection and registry reloads.

mod admin;
mod api;
pub mod config;
mod error;
pub mod health;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use axum::extract::DefaultBodyLimit;
use axum::http::{header, HeaderName, HeaderValue, Method};
use axum::routing::{get, post, put};
use axum::Router;
use ccrs_core::audit::{AuditConfig, AuditLog};
use ccrs_core::backends::{Backends, Provisioner};
use ccrs_core::clock::{Clock, SystemClock};
use ccrs_core::executor::{Executor, ProcessExecutor};
use ccrs_core::jobs::JobManager;
use ccrs_core::model::WireCodec;
use ccrs_core::sites::SiteRegistry;
use tokio::task::JoinHandle;
use tower_http::cors::{AllowOrigin, CorsLayer};
use tower_http::services::ServeDir;

pub use config::ServerConfig;
pub use error::ApiError;
pub use health::{HealthProbe, HealthReport};

pub const SITE_KEY_HEADER: &str = "x-site-key";
pub const SITE_USER_HEADER: &str = "x-site-user";
pub const ADMIN_KEY_HEADER: &str = "x-admin-key";

/// Shared services behind every handler.
#[derive(Clone)]
pub struct AppState {
    pub jobs: JobManager,
    pub sites: Arc<SiteRegistry>,
    pub codec: WireCodec,
    pub admin_key: Option<Arc<str>>,
    pub max_upload_bytes: usize,
    pub trust_forwarded_for: bool,
    pub static_dir: Option<PathBuf>,
    pub health: Arc<HealthProbe>,
}

impl AppState {
    pub fn new(jobs: JobManager, sites: Arc<SiteRegistry>, codec: WireCodec) -> Self {
        let cfg = jobs.config();
        let health = HealthProbe::new(
            cfg.policy.enabled_backends.iter().copied().collect(),
            &ccrs_core::backends::BackendConfig::default().path_env,
            &cfg.spool_root,
        );
        Self {
            jobs,
            sites,
            codec,
            admin_key: None,
            max_upload_bytes: 8 * 1024 * 1024,
            trust_forwarded_for: false,
            static_dir: None,
            health: Arc::new(health),
        }
    }

    pub fn with_admin_key(mut self, key: impl Into<Arc<str>>) -> Self {
        self.admin_key = Some(key.into());
        self
    }

    pub fn with_max_upload_bytes(mut self, n: usize) -> Self {
        self.max_upload_bytes = n;
        self
    }

    pub fn with_health(mut self, probe: HealthProbe) -> Self {
        self.health = Arc::new(probe);
        self
    }
}

pub fn router(state: AppState) -> Router {
    let registry = state.sites.clone();
    let cors = CorsLayer::new()
        .allow_origin(AllowOrigin::predicate(move |origin: &HeaderValue, _| {
            origin.to_str().is_ok_and(|o| registry.origin_known(o))
        }))
        .allow_methods([Method::GET, Method::POST, Method::PUT])
        .allow_headers([
            header::CONTENT_TYPE,
            HeaderName::from_static("last-event-id"),
            HeaderName::from_static(SITE_KEY_HEADER),
            HeaderName::from_static(SITE_USER_HEADER),
        ])
        .max_age(Duration::from_secs(600));

    let mut app = Router::new()
        .route("/healthz", get(api::healthz))
        .route("/api/v1/one-shot", post(api::one_shot))
        .route("/api/v1/sessions", post(api::create_session))
        .route("/api/v1/sessions/{job_id}/files", put(api::stage_files))
        .route("/api/v1/sessions/{job_id}/actions/{name}", post(api::run_action))
        .route("/api/v1/jobs/{job_id}/events", get(api::events))
        .route("/admin/sites", post(admin::register_site))
        .route("/admin/sites/{site_id}/enabled", post(admin::set_enabled))
        .route("/admin/jobs/{job_id}/audit", get(admin::job_audit));
    if let Some(dir) = &state.static_dir {
        app = app.nest_service("/static", ServeDir::new(dir));
    }
    app.layer(DefaultBodyLimit::max(state.max_upload_bytes))
        .layer(cors)
        .with_state(state)
}

/// Builds the services described by `cfg` with a real process executor.
pub fn build_state(cfg: &ServerConfig) -> anyhow::Result<AppState> {
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let executor: Arc<dyn Executor> = Arc::new(ProcessExecutor::new(clock.clone()));
    build_state_with(cfg, executor, clock)
}

pub fn build_state_with(
    cfg: &ServerConfig,
    executor: Arc<dyn Executor>,
    clock: Arc<dyn Clock>,
) -> anyhow::Result<AppState> {
    cfg.validate()?;
    let mut audit_cfg = AuditConfig::new(&cfg.log_file);
    audit_cfg.max_bytes = cfg.log_max_bytes;
    audit_cfg.max_files = cfg.log_max_files;
    if let Some(dir) = cfg.log_file.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let audit = Arc::new(
        AuditLog::open(audit_cfg).with_context(|| format!("opening {}", cfg.log_file.display()))?,
    );
    let sites = match &cfg.registry_file {
        Some(path) => SiteRegistry::open(path)?,
        None => SiteRegistry::in_memory(),
    };
    let kinds: Vec<_> = cfg.enabled_backends.iter().copied().collect();
    let backends = Backends::standard(provisioner(cfg), cfg.backend_config()).only(&kinds);
    let jobs = JobManager::new(cfg.job_config(), backends, executor, audit, clock)?;
    let health = HealthProbe::new(kinds, &cfg.path_env, &jobs.config().spool_root);
    Ok(AppState {
        admin_key: cfg.admin_key.as_deref().map(Arc::from),
        max_upload_bytes: cfg.max_upload_bytes,
        trust_forwarded_for: cfg.trust_forwarded_for,
        static_dir: cfg.static_dir.clone(),
        health: Arc::new(health),
        ..AppState::new(jobs, Arc::new(sites), WireCodec::new(&cfg.type_namespace))
    })
}

#[cfg(feature = "live")]
fn provisioner(cfg: &ServerConfig) -> Arc<dyn Provisioner> {
    Arc::new(ccrs_core::backends::HostProvisioner {
        image_dir: cfg.image_dir.clone(),
        container_root: cfg.container_root.clone(),
        spool_root: cfg.spool_root.clone(),
    })
}

#[cfg(not(feature = "live"))]
fn provisioner(cfg: &ServerConfig) -> Arc<dyn Provisioner> {
    if cfg.enabled_backends.len() > 1
        || !cfg
            .enabled_backends
            .contains(&ccrs_core::model::ContainerType::LocalSandbox)
    {
        tracing::warn!("container backends enabled without the `live` feature; host users and containers will not be provisioned");
    }
    Arc::new(ccrs_core::backends::RecordingProvisioner::new())
}

/// Periodically sweeps idle contexts and picks up registry file edits.
pub fn spawn_maintenance(state: AppState, every: Duration) -> JoinHandle<()> {
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(every);
        tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        tick.tick().await;
        loop {
            tick.tick().await;
            let jobs = state.jobs.clone();
            let sites = state.sites.clone();
            let swept = tokio::task::spawn_blocking(move || {
                if let Err(e) = sites.reload_if_changed() {
                    tracing::warn!(error = %e, "site registry reload failed");
                }
                jobs.gc_sweep(jobs.now())
            })
            .await;
            match swept {
                Ok(r) if !r.contexts.is_empty() || !r.reclaimed.is_empty() => tracing::info!(
                    contexts = r.contexts.len(),
                    reclaimed = r.reclaimed.len(),
                    "gc sweep"
                ),
                Ok(_) => {}
                Err(e) => tracing::error!(error = %e, "gc sweep panicked"),
            }
        }
    })
}
