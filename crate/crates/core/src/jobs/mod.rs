//! Job lifecycle: ids, contexts, one-shot and session runs, file staging,
//! event fan-out and context garbage collection.
//!
//! Every job owns a context directory `<spool>/<site>/<jobId>` that outlives
//! its runs and is removed only by [`JobManager::gc_sweep`]. A one-shot job
//! gets a fresh context unless the caller names an existing job it owns; a
//! session keeps one context across all of its actions.

mod actions;
mod context;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use serde::Serialize;

use crate::audit::{AuditEvent, AuditLog, AuditRecord};
use crate::backends::{Backends, GcPolicy, PreparedEnvironment, Reclaimed, SiteScope};
use crate::clock::{Clock, Millis};
use crate::events::{EventLog, EventStream};
use crate::executor::{EventSink, ExecState, ExecutionHandle, ExecutionLimits, Executor};
use crate::model::{make_job_id, validate_metadata, EventBody, JobId, JobMetadata, ServerPolicy};
use crate::sites::SiteUser;

pub use actions::{expand, ActionSet};
use context::{stage, StageRefusal};

/// Reason given when a disabled site's jobs are terminated.
pub const SITE_DISABLED_REASON: &str = "site-disabled";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobConfig {
    pub spool_root: PathBuf,
    pub context_ttl: Duration,
    pub session_ttl: Duration,
    /// Concurrently running jobs per (site, login).
    pub max_running_per_user: usize,
    /// Sessions per (site, login).
    pub max_sessions_per_user: usize,
    pub default_limits: ExecutionLimits,
    pub policy: ServerPolicy,
    pub gc: GcPolicy,
}

impl Default for JobConfig {
    fn default() -> Self {
        Self {
            spool_root: PathBuf::from("/tmp/ccrs"),
            context_ttl: Duration::from_secs(24 * 3600),
            session_ttl: Duration::from_secs(7 * 24 * 3600),
            max_running_per_user: 8,
            max_sessions_per_user: 32,
            default_limits: ExecutionLimits::default(),
            policy: ServerPolicy::default(),
            gc: GcPolicy::default(),
        }
    }
}

/// The authenticated party a request acts for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Caller {
    pub scope: SiteScope,
    pub login: String,
    pub limits: Option<ExecutionLimits>,
    /// Site image allow-list; empty means the server policy alone applies.
    pub images: Vec<String>,
}

impl Caller {
    pub fn new(site_id: &str, user_prefix: &str, login: &str) -> Self {
        Self {
            scope: SiteScope::new(site_id, user_prefix),
            login: login.to_owned(),
            limits: None,
            images: Vec::new(),
        }
    }

    pub fn site_id(&self) -> &str {
        &self.scope.site_id
    }
}

impl From<&SiteUser> for Caller {
    fn from(u: &SiteUser) -> Self {
        Self {
            scope: u.scope(),
            login: u.login.clone(),
            limits: u.site.limit_overrides,
            images: u.site.image_allow_list.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub enum JobMode {
    OneShot,
    Session,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase", tag = "state")]
pub enum JobState {
    Idle,
    Running,
    Finished { code: i32 },
    Failed { reason: String },
}

/// Snapshot of a job's context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct JobContext {
    pub job_id: JobId,
    pub path: PathBuf,
    pub created_at: Millis,
    pub last_used_at: Millis,
    pub mode: JobMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct JobInfo {
    pub site_id: String,
    pub user: String,
    pub context: JobContext,
    pub state: JobState,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum JobError {
    #[error("validation failed: {0}")]
    ValidationFailed(String),
    #[error("too many live jobs for this user")]
    QuotaExceeded,
    #[error("job belongs to another user")]
    NotOwner,
    #[error("unknown job {0}")]
    UnknownJob(String),
    #[error("unknown action {0:?}")]
    UnknownAction(String),
    #[error("job is already running")]
    Busy,
    #[error("job is not a session")]
    NotSession,
    #[error("file name {0:?} escapes the job context")]
    PathEscape(String),
    #[error("context would hold {needed} bytes, limit is {limit}")]
    ContextQuotaExceeded { needed: u64, limit: u64 },
    #[error("backend: {0}")]
    Backend(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl From<std::io::Error> for JobError {
    fn from(e: std::io::Error) -> Self {
        JobError::Internal(e.to_string())
    }
}

/// A run that has been spawned.
pub struct Started {
    pub job_id: JobId,
    /// First sequence number of this run's events.
    pub from_seq: u64,
    pub events: EventStream,
}

impl std::fmt::Debug for Started {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Started")
            .field("job_id", &self.job_id)
            .field("from_seq", &self.from_seq)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SweepReport {
    pub contexts: Vec<(JobId, PathBuf)>,
    pub reclaimed: Vec<Reclaimed>,
}

struct Job {
    id: JobId,
    site_id: String,
    login: String,
    mode: JobMode,
    created_at: Millis,
    path: PathBuf,
    log: Arc<EventLog>,
    inner: Mutex<JobInner>,
}

struct JobInner {
    metadata: JobMetadata,
    scope: SiteScope,
    limits: ExecutionLimits,
    actions: ActionSet,
    main: Option<String>,
    staged: BTreeSet<String>,
    state: JobState,
    handle: Option<ExecutionHandle>,
    last_used: Millis,
    removed: bool,
}

impl Job {
    fn owned_by(&self, c: &Caller) -> bool {
        self.site_id == c.scope.site_id && self.login == c.login
    }
}

struct Shared {
    config: JobConfig,
    backends: Backends,
    executor: Arc<dyn Executor>,
    audit: Arc<AuditLog>,
    clock: Arc<dyn Clock>,
    jobs: RwLock<HashMap<JobId, Arc<Job>>>,
    /// Running executions per (site, login). Never locked while waiting for
    /// a job lock.
    running: Mutex<HashMap<(String, String), usize>>,
    /// Context directories found at startup that no record owns.
    orphans: Mutex<Vec<(PathBuf, Millis)>>,
}

#[derive(Clone)]
pub struct JobManager {
    shared: Arc<Shared>,
}

impl JobManager {
    /// Creates the spool root if needed and adopts any context directories
    /// left by an earlier process so they are swept like idle one-shots.
    pub fn new(
        mut config: JobConfig,
        backends: Backends,
        executor: Arc<dyn Executor>,
        audit: Arc<AuditLog>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, JobError> {
        fs::create_dir_all(&config.spool_root)?;
        config.spool_root = config.spool_root.canonicalize()?;
        let orphans = find_contexts(&config.spool_root);
        Ok(Self {
            shared: Arc::new(Shared {
                config,
                backends,
                executor,
                audit,
                clock,
                jobs: RwLock::new(HashMap::new()),
                running: Mutex::new(HashMap::new()),
                orphans: Mutex::new(orphans),
            }),
        })
    }

    pub fn config(&self) -> &JobConfig {
        &self.shared.config
    }

    pub fn backends(&self) -> &Backends {
        &self.shared.backends
    }

    pub fn audit(&self) -> &AuditLog {
        &self.shared.audit
    }

    pub fn now(&self) -> Millis {
        self.shared.clock.now_ms()
    }

    fn job(&self, id: &JobId) -> Result<Arc<Job>, JobError> {
        self.shared
            .jobs
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| JobError::UnknownJob(id.to_string()))
    }

    fn owned_job(&self, caller: &Caller, id: &JobId) -> Result<Arc<Job>, JobError> {
        let job = self.job(id)?;
        if job.owned_by(caller) {
            Ok(job)
        } else {
            Err(JobError::NotOwner)
        }
    }

    fn validate(&self, caller: &Caller, m: &JobMetadata) -> Result<(), JobError> {
        if m.user != caller.login {
            return Err(JobError::ValidationFailed(
                "metadata user does not match the authenticated user".into(),
            ));
        }
        if let Err(v) = validate_metadata(m, &self.shared.config.policy) {
            let msg: Vec<String> = v.iter().map(ToString::to_string).collect();
            return Err(JobError::ValidationFailed(msg.join("; ")));
        }
        if let Some(image) = &m.image {
            if !caller.images.is_empty() && !caller.images.contains(image) {
                return Err(JobError::ValidationFailed(format!(
                    "image not allowed for this site: {image}"
                )));
            }
        }
        Ok(())
    }

    fn count<F: Fn(&Job, &JobInner) -> bool>(&self, caller: &Caller, f: F) -> usize {
        let jobs: Vec<Arc<Job>> = self.shared.jobs.read().unwrap().values().cloned().collect();
        jobs.iter()
            .filter(|j| j.owned_by(caller))
            .filter(|j| f(j, &j.inner.lock().unwrap()))
            .count()
    }

    fn running_count(&self, caller: &Caller) -> usize {
        let key = (caller.site_id().to_owned(), caller.login.clone());
        self.shared.running.lock().unwrap().get(&key).copied().unwrap_or(0)
    }

    fn reserve_slot(&self, caller: &Caller) -> Result<(), JobError> {
        let key = (caller.site_id().to_owned(), caller.login.clone());
        let mut running = self.shared.running.lock().unwrap();
        let n = running.entry(key).or_default();
        if *n >= self.shared.config.max_running_per_user {
            return Err(JobError::QuotaExceeded);
        }
        *n += 1;
        Ok(())
    }

    fn limits_for(&self, caller: &Caller) -> ExecutionLimits {
        caller.limits.unwrap_or(self.shared.config.default_limits)
    }

    fn create_job(
        &self,
        caller: &Caller,
        m: &JobMetadata,
        mode: JobMode,
        actions: ActionSet,
        main: Option<String>,
    ) -> Result<Arc<Job>, JobError> {
        let now = self.now();
        let id = make_job_id(self.shared.clock.as_ref());
        let path = self
            .shared
            .config
            .spool_root
            .join(caller.site_id())
            .join(id.as_str());
        fs::create_dir_all(path.parent().expect("site directory"))?;
        fs::create_dir(&path)?;
        let job = Arc::new(Job {
            id: id.clone(),
            site_id: caller.site_id().to_owned(),
            login: caller.login.clone(),
            mode,
            created_at: now,
            path: path.clone(),
            log: EventLog::new(id.clone(), self.shared.clock.clone()),
            inner: Mutex::new(JobInner {
                metadata: m.clone(),
                scope: caller.scope.clone(),
                limits: self.limits_for(caller),
                actions,
                main,
                staged: BTreeSet::new(),
                state: JobState::Idle,
                handle: None,
                last_used: now,
                removed: false,
            }),
        });
        self.shared.jobs.write().unwrap().insert(id.clone(), job.clone());
        let mut record = AuditRecord::new(AuditEvent::JobCreated, now)
            .job(&id)
            .site(caller.site_id())
            .detail("user", &caller.login)
            .detail("mode", mode_name(mode))
            .detail("containerType", m.container_type)
            .detail("contextPath", path.display());
        if let Some(a) = &m.address {
            record = record.detail("clientAddress", a);
        }
        if let Some(h) = &m.hostname {
            record = record.detail("clientHostname", h);
        }
        self.shared.audit.record(record);
        Ok(job)
    }

    /// Runs `command` once. Without `existing` the job gets a fresh id and
    /// context; with it, the named job's context is reused.
    pub fn run_one_shot(
        &self,
        caller: &Caller,
        m: &JobMetadata,
        command: &str,
        existing: Option<&JobId>,
    ) -> Result<Started, JobError> {
        self.validate(caller, m)?;
        if command.trim().is_empty() {
            return Err(JobError::ValidationFailed("command must be non-empty".into()));
        }
        let job = match existing {
            Some(id) => self.owned_job(caller, id)?,
            None => {
                if self.running_count(caller) >= self.shared.config.max_running_per_user {
                    return Err(JobError::QuotaExceeded);
                }
                self.create_job(caller, m, JobMode::OneShot, ActionSet::default(), None)?
            }
        };
        self.launch(caller, &job, command.to_owned(), Some(m))
    }

    /// Creates a session, or returns the existing one when
    /// `m.container_id` names a session the caller owns.
    pub fn create_session(
        &self,
        caller: &Caller,
        m: &JobMetadata,
        actions: ActionSet,
        main: Option<String>,
    ) -> Result<JobId, JobError> {
        self.validate(caller, m)?;
        actions.validate().map_err(JobError::ValidationFailed)?;
        if let Some(main) = &main {
            if context::safe_relative(main).is_none() {
                return Err(JobError::PathEscape(main.clone()));
            }
        }
        if let Some(resume) = m.container_id.as_deref().and_then(|c| JobId::parse(c).ok()) {
            if let Ok(job) = self.job(&resume) {
                if !job.owned_by(caller) {
                    return Err(JobError::NotOwner);
                }
                if job.mode != JobMode::Session {
                    return Err(JobError::NotSession);
                }
                let mut inner = job.inner.lock().unwrap();
                if !actions.0.is_empty() {
                    inner.actions = actions;
                }
                if main.is_some() {
                    inner.main = main;
                }
                inner.last_used = inner.last_used.max(self.now());
                return Ok(job.id.clone());
            }
        }
        let sessions = self.count(caller, |j, i| j.mode == JobMode::Session && !i.removed);
        if sessions >= self.shared.config.max_sessions_per_user {
            return Err(JobError::QuotaExceeded);
        }
        let mut stored = m.clone();
        if stored.container_type != crate::model::ContainerType::SharedContainer {
            stored.container_id = None;
        }
        let job = self.create_job(caller, &stored, JobMode::Session, actions, main)?;
        Ok(job.id.clone())
    }

    pub fn stage_files(
        &self,
        caller: &Caller,
        id: &JobId,
        files: &BTreeMap<String, Vec<u8>>,
    ) -> Result<(), JobError> {
        let job = self.owned_job(caller, id)?;
        if job.mode != JobMode::Session {
            return Err(JobError::NotSession);
        }
        let mut inner = job.inner.lock().unwrap();
        if inner.removed {
            return Err(JobError::UnknownJob(id.to_string()));
        }
        if inner.state == JobState::Running {
            return Err(JobError::Busy);
        }
        match stage(&job.path, files, inner.limits.max_context_bytes)? {
            Ok(()) => {}
            Err(StageRefusal::PathEscape(n)) => return Err(JobError::PathEscape(n)),
            Err(StageRefusal::Quota { needed, limit }) => {
                return Err(JobError::ContextQuotaExceeded { needed, limit })
            }
        }
        inner.staged.extend(files.keys().cloned());
        inner.last_used = inner.last_used.max(self.now());
        Ok(())
    }

    pub fn run_action(&self, caller: &Caller, id: &JobId, action: &str) -> Result<Started, JobError> {
        let job = self.owned_job(caller, id)?;
        if job.mode != JobMode::Session {
            return Err(JobError::NotSession);
        }
        let command = {
            let inner = job.inner.lock().unwrap();
            let template = inner
                .actions
                .get(action)
                .ok_or_else(|| JobError::UnknownAction(action.to_owned()))?;
            let main = inner
                .main
                .clone()
                .or_else(|| inner.staged.iter().next().cloned());
            expand(template, main.as_deref(), &inner.staged).map_err(JobError::ValidationFailed)?
        };
        self.launch(caller, &job, command, None)
    }

    fn launch(
        &self,
        caller: &Caller,
        job: &Arc<Job>,
        command: String,
        metadata: Option<&JobMetadata>,
    ) -> Result<Started, JobError> {
        // Held until the spawn is audited so the exit path, which takes the
        // same lock, always records after it.
        let mut inner = job.inner.lock().unwrap();
        if inner.removed {
            return Err(JobError::UnknownJob(job.id.to_string()));
        }
        if inner.state == JobState::Running {
            return Err(JobError::Busy);
        }
        self.reserve_slot(caller)?;
        let result = self.launch_locked(&mut inner, job, command, metadata, caller);
        if result.is_err() {
            release_slot(&self.shared, &job.site_id, &job.login);
        }
        drop(inner);
        let from_seq = result?;
        Ok(Started {
            job_id: job.id.clone(),
            from_seq,
            events: job.log.subscribe(from_seq),
        })
    }

    fn launch_locked(
        &self,
        inner: &mut JobInner,
        job: &Arc<Job>,
        command: String,
        metadata: Option<&JobMetadata>,
        caller: &Caller,
    ) -> Result<u64, JobError> {
        if let Some(m) = metadata {
            inner.metadata = m.clone();
        }
        inner.scope = caller.scope.clone();
        inner.limits = self.limits_for(caller);

        let now = self.now();
        inner.last_used = inner.last_used.max(now);
        let backends = &self.shared.backends;
        let env = backends
            .prepare(&inner.metadata, &inner.scope, &job.path, now)
            .map_err(|e| JobError::Backend(e.to_string()))?;
        let spec = backends
            .build_command(&env, &inner.metadata, &command)
            .map_err(|e| JobError::Backend(e.to_string()))?;
        let argv0 = spec.argv.first().cloned().unwrap_or_default();

        let from_seq = job.log.begin_run();
        let sink = Arc::new(JobSink {
            job: job.clone(),
            shared: self.shared.clone(),
            env: env.clone(),
        });
        backends.acquire(&env, now);
        match self.shared.executor.spawn(spec, &inner.limits, &job.id, sink) {
            Ok(handle) => {
                inner.handle = Some(handle);
                inner.state = JobState::Running;
                let mut r = AuditRecord::new(AuditEvent::JobSpawned, now)
                    .job(&job.id)
                    .site(&job.site_id)
                    .detail("backend", env.backend_kind)
                    .detail("command", &command)
                    .detail("argv0", argv0)
                    .detail("contextPath", job.path.display())
                    .detail("wallClockTtlSecs", inner.limits.wall_clock_ttl.as_secs());
                if let Some(u) = &env.host_user {
                    r = r.detail("hostUser", u);
                }
                self.shared.audit.record(r);
            }
            Err(e) => {
                backends.release(&env, now);
                inner.state = JobState::Failed {
                    reason: e.to_string(),
                };
                self.shared.audit.record(
                    AuditRecord::new(AuditEvent::InternalError, now)
                        .job(&job.id)
                        .site(&job.site_id)
                        .detail("stage", "spawn")
                        .detail("error", &e),
                );
                job.log.push(EventBody::Error(e.to_string()));
                return Err(JobError::Internal(e.to_string()));
            }
        }
        Ok(from_seq)
    }

    /// Buffered events of the latest run with `seq >= from`, then live ones.
    pub fn subscribe(&self, caller: &Caller, id: &JobId, from: u64) -> Result<EventStream, JobError> {
        let job = self.owned_job(caller, id)?;
        Ok(job.log.subscribe(from))
    }

    pub fn info(&self, caller: &Caller, id: &JobId) -> Result<JobInfo, JobError> {
        let job = self.owned_job(caller, id)?;
        Ok(info_of(&job))
    }

    /// Admin view without an ownership check.
    pub fn info_any(&self, id: &JobId) -> Option<JobInfo> {
        self.job(id).ok().map(|j| info_of(&j))
    }

    pub fn job_ids(&self) -> Vec<JobId> {
        let mut ids: Vec<JobId> = self.shared.jobs.read().unwrap().keys().cloned().collect();
        ids.sort();
        ids
    }

    /// Kills every running job of `site_id` and records the disable.
    /// Returns how many runs were signalled.
    pub fn site_disabled(&self, site_id: &str) -> usize {
        let jobs: Vec<Arc<Job>> = self.shared.jobs.read().unwrap().values().cloned().collect();
        let mut killed = 0;
        for job in jobs.iter().filter(|j| j.site_id == site_id) {
            let handle = job.inner.lock().unwrap().handle.clone();
            if handle.is_some_and(|h| h.kill(SITE_DISABLED_REASON)) {
                killed += 1;
            }
        }
        self.shared.audit.record(
            AuditRecord::new(AuditEvent::SiteDisabled, self.now())
                .site(site_id)
                .detail("killedJobs", killed),
        );
        killed
    }

    /// Removes contexts idle past their TTL and reclaims idle backend state.
    pub fn gc_sweep(&self, now: Millis) -> SweepReport {
        let cfg = &self.shared.config;
        let mut report = SweepReport::default();
        let jobs: Vec<Arc<Job>> = self.shared.jobs.read().unwrap().values().cloned().collect();
        for job in jobs {
            let mut inner = job.inner.lock().unwrap();
            let ttl = match job.mode {
                JobMode::OneShot => cfg.context_ttl,
                JobMode::Session => cfg.session_ttl,
            };
            let idle = now.saturating_sub(inner.last_used) > ttl.as_millis() as Millis;
            if inner.removed || inner.state == JobState::Running || !idle {
                continue;
            }
            if let Err(e) = remove_dir(&job.path) {
                self.shared.audit.record(
                    AuditRecord::new(AuditEvent::InternalError, now)
                        .job(&job.id)
                        .site(&job.site_id)
                        .detail("stage", "gc")
                        .detail("error", e),
                );
                continue;
            }
            inner.removed = true;
            drop(inner);
            self.shared.jobs.write().unwrap().remove(&job.id);
            self.shared.backends.forget_context(&job.path);
            self.shared.audit.record(
                AuditRecord::new(AuditEvent::GcContext, now)
                    .job(&job.id)
                    .site(&job.site_id)
                    .detail("mode", mode_name(job.mode))
                    .detail("contextPath", job.path.display()),
            );
            report.contexts.push((job.id.clone(), job.path.clone()));
        }

        let mut orphans = self.shared.orphans.lock().unwrap();
        orphans.retain(|(path, mtime)| {
            let idle = now.saturating_sub(*mtime) > cfg.context_ttl.as_millis() as Millis;
            if !idle || remove_dir(path).is_err() {
                return true;
            }
            let id = path
                .file_name()
                .and_then(|n| JobId::parse(&n.to_string_lossy()).ok());
            let mut r = AuditRecord::new(AuditEvent::GcContext, now)
                .detail("contextPath", path.display())
                .detail("mode", "orphan");
            if let Some(id) = &id {
                r = r.job(id);
                report.contexts.push((id.clone(), path.clone()));
            }
            self.shared.audit.record(r);
            false
        });
        drop(orphans);

        report.reclaimed = self.shared.backends.gc(&cfg.gc, now);
        for r in &report.reclaimed {
            let rec = match r {
                Reclaimed::Container { spec, handle } => {
                    AuditRecord::new(AuditEvent::GcContainer, now)
                        .detail("spec", spec)
                        .detail("handle", handle)
                }
                Reclaimed::HostUser { site, name } => AuditRecord::new(AuditEvent::GcUser, now)
                    .site(site)
                    .detail("user", name),
            };
            self.shared.audit.record(rec);
        }
        report.contexts.sort();
        report
    }
}

fn release_slot(shared: &Shared, site: &str, login: &str) {
    let mut running = shared.running.lock().unwrap();
    let key = (site.to_owned(), login.to_owned());
    if let Some(n) = running.get_mut(&key) {
        *n = n.saturating_sub(1);
        if *n == 0 {
            running.remove(&key);
        }
    }
}

fn mode_name(m: JobMode) -> &'static str {
    match m {
        JobMode::OneShot => "oneShot",
        JobMode::Session => "session",
    }
}

fn info_of(job: &Job) -> JobInfo {
    let inner = job.inner.lock().unwrap();
    JobInfo {
        site_id: job.site_id.clone(),
        user: job.login.clone(),
        context: JobContext {
            job_id: job.id.clone(),
            path: job.path.clone(),
            created_at: job.created_at,
            last_used_at: inner.last_used,
            mode: job.mode,
        },
        state: inner.state.clone(),
    }
}

fn remove_dir(path: &Path) -> std::io::Result<()> {
    match fs::remove_dir_all(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e),
        _ => Ok(()),
    }
}

/// `<spool>/<site>/<jobId>` directories present on disk.
fn find_contexts(spool: &Path) -> Vec<(PathBuf, Millis)> {
    let mut out = Vec::new();
    let Ok(sites) = fs::read_dir(spool) else {
        return out;
    };
    for site in sites.flatten() {
        let Ok(jobs) = fs::read_dir(site.path()) else {
            continue;
        };
        for job in jobs.flatten() {
            let name = job.file_name();
            if JobId::parse(&name.to_string_lossy()).is_err() {
                continue;
            }
            let mtime = job
                .metadata()
                .and_then(|m| m.modified())
                .ok()
                .and_then(|t| t.duration_since(std::time::UNIX_EPOCH).ok())
                .map_or(0, |d| d.as_millis() as Millis);
            out.push((job.path(), mtime));
        }
    }
    out
}

/// Forwards a run's events to the job's log and settles the job's state
/// before the terminal event becomes visible.
struct JobSink {
    job: Arc<Job>,
    shared: Arc<Shared>,
    env: PreparedEnvironment,
}

impl EventSink for JobSink {
    fn emit(&self, body: EventBody) {
        self.job.log.push(body);
    }

    fn terminated(&self, state: &ExecState) {
        let now = self.shared.clock.now_ms();
        let mut inner = self.job.inner.lock().unwrap();
        inner.handle = None;
        inner.last_used = inner.last_used.max(now);
        let record = match state {
            ExecState::Exited(code) => {
                inner.state = JobState::Finished { code: *code };
                AuditRecord::new(AuditEvent::JobExited, now).detail("exitCode", code)
            }
            ExecState::Killed(reason) => {
                inner.state = JobState::Failed {
                    reason: format!("killed: {reason}"),
                };
                AuditRecord::new(AuditEvent::JobKilled, now)
                    .detail("reason", reason)
                    .detail("exitCode", crate::model::KILLED_EXIT_CODE)
            }
            ExecState::Running => return,
        };
        drop(inner);
        release_slot(&self.shared, &self.job.site_id, &self.job.login);
        self.shared.backends.release(&self.env, now);
        self.shared.audit.record(
            record
                .job(&self.job.id)
                .site(&self.job.site_id)
                .detail("contextPath", self.job.path.display()),
        );
    }
}
